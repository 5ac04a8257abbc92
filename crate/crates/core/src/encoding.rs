//! Scalar-to-vector featurization: radial Bessel expansion of distances
//! and the split-channel layout used for bond and dihedral angles.

use crate::error::{Error, Result};

/// Below this argument the Bessel basis switches to its analytic limit.
const RBF_SMALL_X: f64 = 1e-10;

/// Which trigonometric functions feed the bond-angle half of an angle vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BondAngleEncoding {
    /// `cos(a) + 1` expanded over all `D/2` bond-angle channels.
    #[default]
    Cosine,
    /// `cos(a) + 1` and `sin(a) + 1`, a quarter of the channels each.
    CosineSine,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncoderConfig {
    /// Number of channels `D`; must be a positive multiple of 4.
    pub channels: usize,
    /// Bessel cutoff for bond distances, Å.
    pub cutoff_distance: f64,
    /// Bessel cutoff for shifted cosines and sines.
    pub cutoff_angle: f64,
    pub bond_angle_encoding: BondAngleEncoding,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            channels: 64,
            cutoff_distance: 6.0,
            cutoff_angle: 2.0,
            bond_angle_encoding: BondAngleEncoding::Cosine,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || !self.channels.is_multiple_of(4) {
            return Err(Error::Config(format!(
                "channel count must be a positive multiple of 4, got {}",
                self.channels
            )));
        }
        if !(self.cutoff_distance > 0.0) || !(self.cutoff_angle > 0.0) {
            return Err(Error::Config("RBF cutoffs must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector(pub Vec<f64>);

impl FeatureVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Radial Bessel basis: component `n` (1-based) is
/// `sqrt(2/c) * sin(n*pi*x/c) / x`, with the `x -> 0` limit
/// `sqrt(2/c) * n*pi/c`. Arguments above `c` are evaluated as-is.
pub fn rbf_expand(x: f64, cutoff: f64, len: usize) -> Vec<f64> {
    let mut out = vec![0.0; len];
    rbf_expand_into(x, cutoff, &mut out);
    out
}

pub fn rbf_expand_into(x: f64, cutoff: f64, out: &mut [f64]) {
    let norm = (2.0 / cutoff).sqrt();
    let w = std::f64::consts::PI / cutoff;
    if x.abs() < RBF_SMALL_X {
        for (n, o) in out.iter_mut().enumerate() {
            *o = norm * (n + 1) as f64 * w;
        }
    } else {
        for (n, o) in out.iter_mut().enumerate() {
            *o = norm * ((n + 1) as f64 * w * x).sin() / x;
        }
    }
}

pub fn encode_bond(distance: f64, cfg: &EncoderConfig) -> FeatureVector {
    FeatureVector(rbf_expand(distance, cfg.cutoff_distance, cfg.channels))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AngleKind {
    BondAngle,
    Dihedral,
}

impl AngleKind {
    pub fn name(self) -> &'static str {
        match self {
            AngleKind::BondAngle => "bond angle",
            AngleKind::Dihedral => "dihedral",
        }
    }
}

/// Bond angles occupy channels `[0, D/2)`; dihedrals put `cos + 1` in
/// `[D/2, 3D/4)` and `sin + 1` in `[3D/4, D)`. Unused channels are zero.
pub fn encode_angle(kind: AngleKind, degrees: f64, cfg: &EncoderConfig) -> Result<FeatureVector> {
    let mut out = vec![0.0; cfg.channels];
    encode_angle_into(kind, degrees, cfg, &mut out)?;
    Ok(FeatureVector(out))
}

pub fn encode_angle_into(
    kind: AngleKind,
    degrees: f64,
    cfg: &EncoderConfig,
    out: &mut [f64],
) -> Result<()> {
    let d = cfg.channels;
    let (half, quarter) = (d / 2, d / 4);
    let valid = match kind {
        AngleKind::BondAngle => (0.0..=180.0).contains(&degrees),
        AngleKind::Dihedral => (0.0..360.0).contains(&degrees),
    };
    if !valid {
        return Err(Error::AngleOutOfRange {
            kind: kind.name(),
            value: degrees,
        });
    }
    out.fill(0.0);
    let (sin, cos) = degrees.to_radians().sin_cos();
    let c = cfg.cutoff_angle;
    match kind {
        AngleKind::BondAngle => match cfg.bond_angle_encoding {
            BondAngleEncoding::Cosine => rbf_expand_into(cos + 1.0, c, &mut out[..half]),
            BondAngleEncoding::CosineSine => {
                rbf_expand_into(cos + 1.0, c, &mut out[..quarter]);
                rbf_expand_into(sin + 1.0, c, &mut out[quarter..half]);
            }
        },
        AngleKind::Dihedral => {
            rbf_expand_into(cos + 1.0, c, &mut out[half..half + quarter]);
            rbf_expand_into(sin + 1.0, c, &mut out[half + quarter..]);
        }
    }
    Ok(())
}
