//! Labeled structures: synthetic aqua-copper complexes with analytic
//! surrogate peak labels, the hydrogen-peroxide torsion set, splitting, and
//! on-disk datasets (XYZ files plus a `manifest.csv`).

use std::fs;
use std::path::Path;

use nalgebra::{Unit, UnitQuaternion, Vector4};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    bond_angle, dihedral_angle, parse_xyz, write_xyz, Atom, AtomicStructure, Element, Point,
};
use crate::graphs::{BondRules, GraphBundle, Representation, CU_O_CUTOFF, O_H_CUTOFF};
use crate::model::GaussianPeak;

/// Base Cu–O distance of generated complexes, Å.
pub const CU_O_DISTANCE: f64 = 2.0;
pub const WATER_OH: f64 = 0.97;
pub const WATER_HOH_DEG: f64 = 104.5;

const MAX_RETRIES: usize = 200;

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub id: String,
    pub structure: AtomicStructure,
    pub target: GaussianPeak,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub samples: usize,
    /// `(coordination number, probability)`; numbers must be 4, 5 or 6.
    pub coordination: Vec<(usize, f64)>,
    /// Standard deviation of Cu–O distances around 2.0 Å.
    pub radial_jitter: f64,
    /// Standard deviation of the direction perturbation of each Cu–O bond, degrees.
    pub angular_jitter: f64,
    /// Water rotations about their Cu–O axis are uniform in `±spread`, degrees.
    pub dihedral_spread: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            samples: 1000,
            coordination: vec![(4, 0.35), (5, 0.55), (6, 0.10)],
            radial_jitter: 0.08,
            angular_jitter: 7.0,
            dihedral_spread: 180.0,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.coordination.is_empty() {
            return Err(Error::Config("no coordination numbers given".into()));
        }
        let mut total = 0.0;
        for &(n, p) in &self.coordination {
            if !(4..=6).contains(&n) {
                return Err(Error::Config(format!("coordination {n} not in 4..=6")));
            }
            if !(p >= 0.0) {
                return Err(Error::Config(format!("negative probability for {n}")));
            }
            total += p;
        }
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "coordination probabilities sum to {total}, not 1"
            )));
        }
        let jitters = [self.radial_jitter, self.angular_jitter, self.dihedral_spread];
        if jitters.iter().any(|j| !(j.is_finite() && *j >= 0.0)) {
            return Err(Error::Config("jitter scales must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// SplitMix64 finalizer, used to derive independent per-record seeds.
pub fn mix_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(index.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Template {
    SquarePlanar,
    Sawhorse,
    SquarePyramid,
    TrigonalBipyramid,
    Octahedron,
}

impl Template {
    fn directions(self) -> Vec<Point> {
        let x = Point::x();
        let y = Point::y();
        let z = Point::z();
        match self {
            Template::SquarePlanar => vec![x, y, -x, -y],
            Template::Sawhorse => vec![x, y, z, -z],
            Template::SquarePyramid => vec![x, y, -x, -y, z],
            Template::TrigonalBipyramid => {
                let h = 3f64.sqrt() / 2.0;
                vec![
                    z,
                    -z,
                    x,
                    Point::new(-0.5, h, 0.0),
                    Point::new(-0.5, -h, 0.0),
                ]
            }
            Template::Octahedron => vec![x, y, z, -x, -y, -z],
        }
    }
}

fn normal3(rng: &mut impl Rng) -> Point {
    Point::new(
        rng.sample(StandardNormal),
        rng.sample(StandardNormal),
        rng.sample(StandardNormal),
    )
}

pub(crate) fn random_rotation(rng: &mut impl Rng) -> UnitQuaternion<f64> {
    let q = Vector4::new(
        rng.sample(StandardNormal),
        rng.sample(StandardNormal),
        rng.sample(StandardNormal),
        rng.sample(StandardNormal),
    );
    UnitQuaternion::from_quaternion(nalgebra::Quaternion::from(q))
}

/// Any unit vector perpendicular to `n`.
fn perpendicular(n: &Point) -> Point {
    let probe = if n.x.abs() < 0.9 { Point::x() } else { Point::y() };
    n.cross(&probe).normalize()
}

fn pick_coordination(cfg: &SyntheticConfig, rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for &(n, p) in &cfg.coordination {
        acc += p;
        if u < acc {
            return n;
        }
    }
    cfg.coordination.last().expect("validated non-empty").0
}

fn sample_complex(n: usize, cfg: &SyntheticConfig, rng: &mut impl Rng) -> Result<AtomicStructure> {
    let template = match n {
        4 if rng.random_bool(0.5) => Template::SquarePlanar,
        4 => Template::Sawhorse,
        5 if rng.random_bool(0.5) => Template::SquarePyramid,
        5 => Template::TrigonalBipyramid,
        _ => Template::Octahedron,
    };
    let rot = random_rotation(rng);
    let half = (WATER_HOH_DEG / 2.0).to_radians();
    let jitter = cfg.angular_jitter.to_radians();
    let mut atoms = vec![Atom::new(Element::Cu, Point::zeros())];
    for dir in template.directions() {
        let dir = (rot * dir + jitter * normal3(rng)).normalize();
        let d = CU_O_DISTANCE + cfg.radial_jitter * rng.sample::<f64, _>(StandardNormal);
        let o = dir * d;
        let phi = if cfg.dihedral_spread > 0.0 {
            rng.random_range(-cfg.dihedral_spread..=cfg.dihedral_spread)
        } else {
            0.0
        };
        let axis = Unit::new_normalize(dir);
        let t = UnitQuaternion::from_axis_angle(&axis, phi.to_radians()) * perpendicular(&dir);
        atoms.push(Atom::new(Element::O, o));
        for sign in [1.0, -1.0] {
            let h = o + WATER_OH * (half.cos() * dir + sign * half.sin() * t);
            atoms.push(Atom::new(Element::H, h));
        }
    }
    AtomicStructure::new(atoms, None)
}

/// Rejects samples whose jitter produced something other than `n` intact
/// waters around one copper.
fn acceptable(s: &AtomicStructure, n: usize) -> bool {
    if s.atoms().iter().skip(1).step_by(3).any(|a| {
        let d = a.position.norm();
        !(1.7..=2.6).contains(&d)
    }) {
        return false;
    }
    for i in 1..s.len() {
        for j in (i + 1)..s.len() {
            let (wi, wj) = ((i - 1) / 3, (j - 1) / 3);
            if wi == wj {
                continue;
            }
            let min = match (s.element(i), s.element(j)) {
                (Element::O, Element::O) => 2.3,
                (Element::H, Element::H) => 1.3,
                _ => 1.6,
            };
            if s.distance(i, j) < min {
                return false;
            }
        }
    }
    let Ok(bundle) = GraphBundle::build(s, Representation::AlignnD, &BondRules::default()) else {
        return false;
    };
    let bonds = bundle.graph().bonds();
    bonds.len() == 3 * n
        && bonds.iter().all(|b| {
            let (i, j) = b.atoms;
            // Cu–O bonds to every oxygen, each H to the oxygen of its own water
            (i == 0 && s.element(j) == Element::O) || (i > 0 && (i - 1) / 3 == (j - 1) / 3)
        })
}

/// Samples `cfg.samples` complexes and labels them with [`surrogate_targets`].
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<Vec<Record>> {
    cfg.validate()?;
    (0..cfg.samples)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, i as u64));
            let n = pick_coordination(cfg, &mut rng);
            for _ in 0..MAX_RETRIES {
                let s = sample_complex(n, cfg, &mut rng)?;
                if acceptable(&s, n) {
                    let id = format!("cu{n}-{i:06}");
                    let structure = AtomicStructure::new(s.atoms().to_vec(), Some(id.clone()))?;
                    let target = surrogate_targets(&structure)?;
                    return Ok(Record {
                        id,
                        structure,
                        target,
                    });
                }
            }
            Err(Error::Data(format!(
                "record {i}: no valid geometry after {MAX_RETRIES} attempts; reduce the jitter"
            )))
        })
        .collect()
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Analytic stand-in labels:
///
/// * `mu = 0.8 + 0.4 mean(sin^2 a) + 0.2 (mean d - 2.0)` over O–Cu–O angles `a`
///   and Cu–O distances `d`;
/// * `sigma = 0.15 + 0.05 stdev(cos a)` (population deviation);
/// * `A = 0.05 mean(sin^2 t) + 0.01 N_w` over O–Cu–O–H dihedrals `t`.
///
/// Dihedrals about a collinear O–Cu–O are undefined and left out of the mean.
pub fn surrogate_targets(s: &AtomicStructure) -> Result<GaussianPeak> {
    let coppers: Vec<usize> = (0..s.len()).filter(|&i| s.element(i) == Element::Cu).collect();
    let &[cu] = coppers.as_slice() else {
        return Err(Error::InvalidStructure(format!(
            "expected one Cu atom, found {}",
            coppers.len()
        )));
    };
    let oxygens: Vec<usize> = (0..s.len())
        .filter(|&i| s.element(i) == Element::O && s.distance(cu, i) < CU_O_CUTOFF)
        .collect();
    if oxygens.len() < 2 {
        return Err(Error::InvalidStructure(
            "need at least two coordinating oxygens for O–Cu–O angles".into(),
        ));
    }
    let p = |i: usize| s.position(i);

    let mut cosines = Vec::new();
    let mut sin2 = Vec::new();
    for (a, &i) in oxygens.iter().enumerate() {
        for &j in &oxygens[a + 1..] {
            let ang = bond_angle(&p(i), &p(cu), &p(j))?.to_radians();
            cosines.push(ang.cos());
            sin2.push(ang.sin().powi(2));
        }
    }
    let d_mean = mean(&oxygens.iter().map(|&o| s.distance(cu, o)).collect::<Vec<_>>());
    let c_mean = mean(&cosines);
    let c_std = (cosines.iter().map(|c| (c - c_mean).powi(2)).sum::<f64>() / cosines.len() as f64)
        .sqrt();

    let mut dihedral_sin2 = Vec::new();
    for h in (0..s.len()).filter(|&i| s.element(i) == Element::H) {
        let nearest = (0..s.len())
            .filter(|&o| s.element(o) == Element::O)
            .min_by(|&a, &b| s.distance(h, a).total_cmp(&s.distance(h, b)));
        let Some(o) = nearest.filter(|&o| s.distance(h, o) <= O_H_CUTOFF) else {
            continue;
        };
        if !oxygens.contains(&o) {
            continue;
        }
        for &k in oxygens.iter().filter(|&&k| k != o) {
            match dihedral_angle(&p(k), &p(cu), &p(o), &p(h)) {
                Ok(t) => dihedral_sin2.push(t.to_radians().sin().powi(2)),
                Err(Error::DegenerateDihedral) => {}
                Err(e) => return Err(e),
            }
        }
    }
    if dihedral_sin2.is_empty() {
        return Err(Error::InvalidStructure(
            "no defined O–Cu–O–H dihedral angles".into(),
        ));
    }

    GaussianPeak::new(
        0.8 + 0.4 * mean(&sin2) + 0.2 * (d_mean - CU_O_DISTANCE),
        0.15 + 0.05 * c_std,
        0.05 * mean(&dihedral_sin2) + 0.01 * oxygens.len() as f64,
    )
}

/// H–O–O–H chain with O–O 1.45 Å, O–H 0.97 Å, both H–O–O angles 100° and
/// torsion `tau` (degrees).
pub fn peroxide(tau: f64) -> Result<AtomicStructure> {
    let (oo, oh) = (1.45, WATER_OH);
    let a = 100f64.to_radians();
    let t = tau.to_radians();
    let (c, s) = (a.cos(), a.sin());
    let atoms = vec![
        Atom::new(Element::H, Point::new(oh * c, oh * s, 0.0)),
        Atom::new(Element::O, Point::zeros()),
        Atom::new(Element::O, Point::new(oo, 0.0, 0.0)),
        Atom::new(
            Element::H,
            Point::new(oo - oh * c, oh * s * t.cos(), oh * s * t.sin()),
        ),
    ];
    AtomicStructure::new(atoms, None)
}

/// Torsion-only task: `tau` uniform in `[0, 360)`, labels
/// `(cos tau + 2, 0.2, 0.05)`. Structures differing only in `tau` share all
/// distances and bond angles.
pub fn make_expressiveness_set(n: usize, seed: u64) -> Result<Vec<Record>> {
    if n < 2 {
        return Err(Error::Config("expressiveness set needs at least 2 records".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let tau: f64 = rng.random_range(0.0..360.0);
            let id = format!("hooh-{i:06}");
            let s = peroxide(tau)?;
            Ok(Record {
                structure: AtomicStructure::new(s.atoms().to_vec(), Some(id.clone()))?,
                id,
                target: GaussianPeak::new(tau.to_radians().cos() + 2.0, 0.2, 0.05)?,
            })
        })
        .collect()
}

/// Seeded shuffle, then the first `round(fraction * n)` records train.
pub fn split(records: Vec<Record>, fraction: f64, seed: u64) -> Result<(Vec<Record>, Vec<Record>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!("split fraction {fraction} not in (0, 1)")));
    }
    let n = records.len();
    let n_train = (fraction * n as f64).round() as usize;
    if n_train == 0 || n_train == n {
        return Err(Error::Data(format!(
            "splitting {n} records at {fraction} leaves one side empty"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut slots: Vec<Option<Record>> = records.into_iter().map(Some).collect();
    let mut take = |i: &usize| slots[*i].take().expect("permutation visits each index once");
    let train = order[..n_train].iter().map(&mut take).collect();
    let val = order[n_train..].iter().map(&mut take).collect();
    Ok((train, val))
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestRow {
    id: String,
    xyz_path: String,
    mu: f64,
    sigma: f64,
    #[serde(rename = "A")]
    amplitude: f64,
}

pub const MANIFEST: &str = "manifest.csv";

/// Writes `<dir>/<id>.xyz` per record and `<dir>/manifest.csv`.
pub fn write_dataset(dir: &Path, records: &[Record]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_path(dir.join(MANIFEST))?;
    for r in records {
        if r.id.is_empty() || r.id.contains(['/', '\\']) {
            return Err(Error::Data(format!("record id `{}` is not a file name", r.id)));
        }
        let xyz_path = format!("{}.xyz", r.id);
        fs::write(dir.join(&xyz_path), write_xyz(&r.structure))?;
        w.serialize(ManifestRow {
            id: r.id.clone(),
            xyz_path,
            mu: r.target.mu,
            sigma: r.target.sigma,
            amplitude: r.target.amplitude,
        })?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a dataset written by [`write_dataset`]; `xyz_path` entries are
/// resolved relative to `dir`.
pub fn read_dataset(dir: &Path) -> Result<Vec<Record>> {
    let mut rdr = csv::Reader::from_path(dir.join(MANIFEST))?;
    let mut out = Vec::new();
    for (k, row) in rdr.deserialize::<ManifestRow>().enumerate() {
        let row = row?;
        let text = fs::read_to_string(dir.join(&row.xyz_path))?;
        let structure = parse_xyz(&text)
            .map_err(|e| Error::Data(format!("{}: {e}", row.xyz_path)))?;
        let target = GaussianPeak::new(row.mu, row.sigma, row.amplitude)
            .map_err(|e| Error::Data(format!("manifest row {}: {e}", k + 1)))?;
        out.push(Record {
            id: row.id,
            structure,
            target,
        });
    }
    if out.is_empty() {
        return Err(Error::Empty(format!("{} lists no records", MANIFEST)));
    }
    Ok(out)
}
