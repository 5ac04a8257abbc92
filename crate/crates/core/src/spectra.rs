//! Kernel broadening of discrete transition lines and a one-Gaussian
//! least-squares fit of the resulting curve.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::model::GaussianPeak;

const SQRT_2PI: f64 = 2.506_628_274_631_000_7;

#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumLines {
    lines: Vec<(f64, f64)>,
}

impl SpectrumLines {
    /// `(energy eV, intensity)` pairs; needs at least one line, finite
    /// energies and non-negative intensities.
    pub fn new(lines: Vec<(f64, f64)>) -> Result<Self> {
        if lines.is_empty() {
            return Err(Error::Empty("spectrum has no lines".into()));
        }
        for &(e, i) in &lines {
            if !e.is_finite() || !i.is_finite() || i < 0.0 {
                return Err(Error::Data(format!("invalid line (E={e}, I={i})")));
            }
        }
        Ok(Self { lines })
    }

    pub fn lines(&self) -> &[(f64, f64)] {
        &self.lines
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BroadenConfig {
    /// Kernel standard deviation, eV.
    pub kernel_sigma: f64,
    /// Grid spacing, eV.
    pub step: f64,
    /// Grid extends this many kernel widths beyond the outermost lines.
    pub margin: f64,
    /// Weight each kernel by its line intensity; otherwise plain KDE with
    /// weights `1/n`.
    pub intensity_weighted: bool,
}

impl Default for BroadenConfig {
    fn default() -> Self {
        Self {
            kernel_sigma: 0.2,
            step: 0.005,
            margin: 5.0,
            intensity_weighted: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BroadenedSpectrum {
    pub start: f64,
    pub step: f64,
    pub values: Vec<f64>,
}

impl BroadenedSpectrum {
    pub fn energy(&self, k: usize) -> f64 {
        self.start + k as f64 * self.step
    }

    pub fn energies(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.values.len()).map(|k| self.energy(k))
    }

    /// Trapezoidal integral over the grid.
    pub fn integral(&self) -> f64 {
        let v = &self.values;
        if v.len() < 2 {
            return 0.0;
        }
        self.step * (v.iter().sum::<f64>() - 0.5 * (v[0] + v[v.len() - 1]))
    }
}

/// `f(x) = sum_i w_i N(x; E_i, sigma)` on a uniform grid covering
/// `[min E - margin sigma, max E + margin sigma]`.
pub fn broaden(lines: &SpectrumLines, cfg: &BroadenConfig) -> Result<BroadenedSpectrum> {
    if !(cfg.kernel_sigma > 0.0 && cfg.step > 0.0 && cfg.margin >= 0.0) {
        return Err(Error::Config("kernel width and grid step must be positive".into()));
    }
    let (lo, hi) = lines
        .lines
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &(e, _)| {
            (lo.min(e), hi.max(e))
        });
    let start = lo - cfg.margin * cfg.kernel_sigma;
    let end = hi + cfg.margin * cfg.kernel_sigma;
    let n = ((end - start) / cfg.step).ceil() as usize + 1;
    let uniform = 1.0 / lines.lines.len() as f64;
    let norm = 1.0 / (cfg.kernel_sigma * SQRT_2PI);
    let values = (0..n)
        .map(|k| {
            let x = start + k as f64 * cfg.step;
            lines
                .lines
                .iter()
                .map(|&(e, i)| {
                    let w = if cfg.intensity_weighted { i } else { uniform };
                    let z = (x - e) / cfg.kernel_sigma;
                    w * norm * (-0.5 * z * z).exp()
                })
                .sum()
        })
        .collect();
    Ok(BroadenedSpectrum {
        start,
        step: cfg.step,
        values,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitResult {
    pub peak: GaussianPeak,
    /// Sum of squared residuals on the grid.
    pub residual: f64,
    pub iterations: usize,
    /// False when the iteration cap was hit; `peak` is then the best iterate.
    pub converged: bool,
}

pub const MAX_FIT_ITERATIONS: usize = 200;
const REL_TOL: f64 = 1e-10;

/// Sum of squared differences between `peak` and the curve.
pub fn fit_residual(spec: &BroadenedSpectrum, peak: &GaussianPeak) -> f64 {
    spec.energies()
        .zip(&spec.values)
        .map(|(x, y)| (peak.evaluate(x) - y).powi(2))
        .sum()
}

/// Least-squares fit of `A / (sigma sqrt(2 pi)) exp(-(x - mu)^2 / (2 sigma^2))`.
/// Levenberg–Marquardt runs from the curve's moments and from every local
/// maximum; the lowest residual wins, which avoids settling on one shoulder
/// of a multi-line spectrum.
pub fn fit_single_gaussian(spec: &BroadenedSpectrum) -> Result<FitResult> {
    let mass: f64 = spec.values.iter().sum();
    if !(mass > 0.0) {
        return Err(Error::Data("spectrum has no positive mass to fit".into()));
    }
    let mu0 = spec.energies().zip(&spec.values).map(|(x, y)| x * y).sum::<f64>() / mass;
    let var0 = spec
        .energies()
        .zip(&spec.values)
        .map(|(x, y)| (x - mu0).powi(2) * y)
        .sum::<f64>()
        / mass;
    let mut starts = vec![Vector3::new(mu0, var0.sqrt().max(spec.step), mass * spec.step)];
    let v = &spec.values;
    for k in 1..v.len().saturating_sub(1) {
        if v[k] > v[k - 1] && v[k] >= v[k + 1] {
            let half = 0.5 * v[k];
            let left = (0..k).rev().find(|&i| v[i] < half).unwrap_or(0);
            let right = (k..v.len()).find(|&i| v[i] < half).unwrap_or(v.len() - 1);
            // half width at half maximum of a Gaussian is 1.1774 sigma
            let sigma = ((right - left) as f64 * spec.step / 2.0 / 1.1774).max(spec.step);
            starts.push(Vector3::new(spec.energy(k), sigma, v[k] * sigma * SQRT_2PI));
        }
    }
    let mut best: Option<FitResult> = None;
    for p0 in starts {
        let fit = levenberg_marquardt(spec, p0);
        if best.is_none_or(|b| fit.residual < b.residual) {
            best = Some(fit);
        }
    }
    Ok(best.expect("the moment start is always present"))
}

fn levenberg_marquardt(spec: &BroadenedSpectrum, mut p: Vector3<f64>) -> FitResult {
    let scale: f64 = spec.values.iter().map(|y| y * y).sum();
    let peak_of = |p: &Vector3<f64>| GaussianPeak {
        mu: p[0],
        sigma: p[1],
        amplitude: p[2],
    };
    let mut cost = fit_residual(spec, &peak_of(&p));
    let mut lambda = 1e-3;
    for it in 1..=MAX_FIT_ITERATIONS {
        let (mu, sigma, a) = (p[0], p[1], p[2]);
        let mut jtj = Matrix3::zeros();
        let mut jtr = Vector3::zeros();
        for (x, y) in spec.energies().zip(&spec.values) {
            let z = (x - mu) / sigma;
            let basis = (-0.5 * z * z).exp() / (sigma * SQRT_2PI);
            let g = a * basis;
            let j = Vector3::new(g * z / sigma, g * (z * z - 1.0) / sigma, basis);
            jtj += j * j.transpose();
            jtr += j * (g - y);
        }
        // Raise the damping until a step lowers the cost.
        let mut improved = None;
        while lambda < 1e16 {
            let mut lhs = jtj;
            for d in 0..3 {
                lhs[(d, d)] += lambda * jtj[(d, d)].max(1e-300);
            }
            if let Some(delta) = lhs.lu().solve(&-jtr) {
                let cand = p + delta;
                if cand[1] > 0.0 && cand[2] >= 0.0 {
                    let c = fit_residual(spec, &peak_of(&cand));
                    if c < cost {
                        improved = Some((cand, c));
                        lambda = (lambda / 10.0).max(1e-12);
                        break;
                    }
                }
            }
            lambda *= 10.0;
        }
        let done = |p: &Vector3<f64>, cost: f64| FitResult {
            peak: peak_of(p),
            residual: cost,
            iterations: it,
            converged: true,
        };
        // no descent direction left: the current point is a minimum
        let Some((cand, c)) = improved else {
            return done(&p, cost);
        };
        let change = (cost - c) / cost;
        p = cand;
        cost = c;
        if change < REL_TOL || cost <= 1e-30 * scale {
            return done(&p, cost);
        }
    }
    FitResult {
        peak: peak_of(&p),
        residual: cost,
        iterations: MAX_FIT_ITERATIONS,
        converged: false,
    }
}

/// Broadens `lines` with the default kernel and fits one Gaussian.
pub fn fit_lines(lines: &SpectrumLines) -> Result<FitResult> {
    fit_single_gaussian(&broaden(lines, &BroadenConfig::default())?)
}
