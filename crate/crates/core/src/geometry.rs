//! Atomic structures, XYZ I/O and the distance/angle primitives every
//! graph representation is built from.
//!
//! Angles are always produced by two-argument arctangents of cross and
//! dot products, never by `acos`, so thermally distorted structures with
//! near-linear or near-eclipsed arrangements stay well conditioned.

use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use nalgebra::Vector3;

use crate::error::{Error, Result};

pub type Point = Vector3<f64>;

/// Smallest interatomic distance accepted by [`AtomicStructure::new`], in Å.
pub const MIN_PAIR_DISTANCE: f64 = 0.3;

/// Arms shorter than this (Å) make an angle undefined.
pub const MIN_ARM_LENGTH: f64 = 1e-8;

/// Relative cross-product magnitude below which a dihedral is degenerate.
const DIHEDRAL_PARALLEL_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Element {
    H,
    O,
    Cu,
}

impl Element {
    pub const ALL: [Element; 3] = [Element::H, Element::O, Element::Cu];

    pub fn symbol(self) -> &'static str {
        match self {
            Element::H => "H",
            Element::O => "O",
            Element::Cu => "Cu",
        }
    }

    pub fn atomic_number(self) -> u32 {
        match self {
            Element::H => 1,
            Element::O => 8,
            Element::Cu => 29,
        }
    }

    pub fn from_atomic_number(z: u32) -> Result<Self> {
        Element::ALL
            .into_iter()
            .find(|e| e.atomic_number() == z)
            .ok_or_else(|| Error::UnknownElement(format!("Z={z}")))
    }

    /// Row of the atom-type lookup table.
    pub fn index(self) -> usize {
        match self {
            Element::H => 0,
            Element::O => 1,
            Element::Cu => 2,
        }
    }
}

impl FromStr for Element {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "H" => Ok(Element::H),
            "O" => Ok(Element::O),
            "Cu" | "CU" | "cu" => Ok(Element::Cu),
            _ => Err(Error::UnknownElement(s.to_string())),
        }
    }
}

impl fmt::Display for Element {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.symbol())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Atom {
    pub element: Element,
    pub position: Point,
}

impl Atom {
    pub fn new(element: Element, position: Point) -> Self {
        Self { element, position }
    }
}

/// Element symbols and Cartesian coordinates (Å) of one molecular cluster.
#[derive(Debug, Clone, PartialEq)]
pub struct AtomicStructure {
    atoms: Vec<Atom>,
    label: Option<String>,
}

impl AtomicStructure {
    /// Validates the structure: at least two atoms, finite coordinates and no
    /// pair of atoms closer than [`MIN_PAIR_DISTANCE`].
    pub fn new(atoms: Vec<Atom>, label: Option<String>) -> Result<Self> {
        if atoms.len() < 2 {
            return Err(Error::InvalidStructure(format!(
                "need at least 2 atoms, got {}",
                atoms.len()
            )));
        }
        for (i, a) in atoms.iter().enumerate() {
            if !a.position.iter().all(|c| c.is_finite()) {
                return Err(Error::InvalidStructure(format!(
                    "atom {i} has a non-finite coordinate"
                )));
            }
        }
        for i in 0..atoms.len() {
            for j in i + 1..atoms.len() {
                let d = (atoms[i].position - atoms[j].position).norm();
                if d <= MIN_PAIR_DISTANCE {
                    return Err(Error::InvalidStructure(format!(
                        "atoms {i} and {j} are only {d:.4} A apart"
                    )));
                }
            }
        }
        Ok(Self { atoms, label })
    }

    pub fn atoms(&self) -> &[Atom] {
        &self.atoms
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn label(&self) -> Option<&str> {
        self.label.as_deref()
    }

    pub fn element(&self, i: usize) -> Element {
        self.atoms[i].element
    }

    pub fn position(&self, i: usize) -> Point {
        self.atoms[i].position
    }

    pub fn distance(&self, i: usize, j: usize) -> f64 {
        (self.atoms[i].position - self.atoms[j].position).norm()
    }

    pub fn count(&self, element: Element) -> usize {
        self.atoms.iter().filter(|a| a.element == element).count()
    }

    /// Applies `f` to every position and revalidates.
    pub fn map_positions(&self, f: impl Fn(&Point) -> Point) -> Result<Self> {
        let atoms = self
            .atoms
            .iter()
            .map(|a| Atom::new(a.element, f(&a.position)))
            .collect();
        Self::new(atoms, self.label.clone())
    }

    /// Reorders atoms so that new atom `k` is old atom `order[k]`.
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        if order.len() != self.atoms.len() {
            return Err(Error::InvalidStructure("permutation length mismatch".into()));
        }
        let mut seen = vec![false; order.len()];
        for &o in order {
            if o >= seen.len() || seen[o] {
                return Err(Error::InvalidStructure("not a permutation".into()));
            }
            seen[o] = true;
        }
        let atoms = order.iter().map(|&o| self.atoms[o]).collect();
        Ok(Self {
            atoms,
            label: self.label.clone(),
        })
    }
}

/// Parses the standard XYZ layout: atom count, comment line, then one
/// `symbol x y z` line per atom. The comment becomes the label.
pub fn parse_xyz(text: &str) -> Result<AtomicStructure> {
    let mut lines = text.lines().enumerate();
    let (_, count_line) = lines.next().ok_or(Error::Xyz {
        line: 1,
        message: "empty file".into(),
    })?;
    let count: usize = count_line.trim().parse().map_err(|_| Error::Xyz {
        line: 1,
        message: format!("expected an atom count, found `{}`", count_line.trim()),
    })?;
    let label = match lines.next() {
        Some((_, l)) if !l.trim().is_empty() => Some(l.trim().to_string()),
        Some(_) => None,
        None => {
            return Err(Error::Xyz {
                line: 2,
                message: "missing comment line".into(),
            })
        }
    };

    let mut atoms = Vec::with_capacity(count);
    for (idx, line) in lines {
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        if atoms.len() == count {
            return Err(Error::Xyz {
                line: lineno,
                message: format!("file declares {count} atoms but lists more"),
            });
        }
        let mut fields = line.split_whitespace();
        let symbol = fields.next().unwrap_or_default();
        let element: Element = symbol.parse()?;
        let mut xyz = [0.0; 3];
        for c in xyz.iter_mut() {
            let field = fields.next().ok_or_else(|| Error::Xyz {
                line: lineno,
                message: "expected `symbol x y z`".into(),
            })?;
            *c = field.parse().map_err(|_| Error::Xyz {
                line: lineno,
                message: format!("non-numeric coordinate `{field}`"),
            })?;
        }
        atoms.push(Atom::new(element, Point::from(xyz)));
    }
    if atoms.len() != count {
        return Err(Error::Xyz {
            line: 1,
            message: format!("file declares {count} atoms but lists {}", atoms.len()),
        });
    }
    AtomicStructure::new(atoms, label)
}

pub fn write_xyz(s: &AtomicStructure) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{}", s.len());
    let _ = writeln!(out, "{}", s.label().unwrap_or(""));
    for a in s.atoms() {
        let p = a.position;
        let _ = writeln!(
            out,
            "{:<2} {:>22} {:>22} {:>22}",
            a.element.symbol(),
            p.x,
            p.y,
            p.z
        );
    }
    out
}

/// Angle a–center–b in degrees, in [0, 180].
pub fn bond_angle(a: &Point, center: &Point, b: &Point) -> Result<f64> {
    let u = a - center;
    let v = b - center;
    if u.norm() <= MIN_ARM_LENGTH || v.norm() <= MIN_ARM_LENGTH {
        return Err(Error::DegenerateAngle);
    }
    Ok(u.cross(&v).norm().atan2(u.dot(&v)).to_degrees())
}

/// Torsion of plane (k, i, j) against plane (i, j, l) about the axis i→j,
/// in degrees within [0, 360).
///
/// The angle grows when `l` is rotated clockwise as seen looking from `i`
/// toward `j` (equivalently: the sense in which the front bond k–i must be
/// turned clockwise to eclipse the rear bond j–l).
pub fn dihedral_angle(k: &Point, i: &Point, j: &Point, l: &Point) -> Result<f64> {
    let b1 = i - k;
    let b2 = j - i;
    let b3 = l - j;
    let (n1_len, n2_len) = (b1.norm(), b3.norm());
    let axis_len = b2.norm();
    if n1_len <= MIN_ARM_LENGTH || n2_len <= MIN_ARM_LENGTH || axis_len <= MIN_ARM_LENGTH {
        return Err(Error::DegenerateDihedral);
    }
    let n1 = b1.cross(&b2);
    let n2 = b2.cross(&b3);
    if n1.norm() <= DIHEDRAL_PARALLEL_TOL * n1_len * axis_len
        || n2.norm() <= DIHEDRAL_PARALLEL_TOL * n2_len * axis_len
    {
        return Err(Error::DegenerateDihedral);
    }
    let y = axis_len * b1.dot(&n2);
    let x = n1.dot(&n2);
    let mut deg = y.atan2(x).to_degrees();
    if deg < 0.0 {
        deg += 360.0;
    }
    // -0.0 and values that round up to exactly 360 both belong at 0.
    if deg >= 360.0 || deg == 0.0 {
        deg = 0.0;
    }
    Ok(deg)
}
