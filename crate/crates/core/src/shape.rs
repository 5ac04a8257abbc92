//! Continuous shape measures against ideal polyhedra.
//!
//! `S = 100 min sum |q_i - s R p_pi(i)|^2 / sum |q_i - q_mean|^2` over vertex
//! permutations `pi`, proper rotations `R` and scale `s`, with both point
//! sets centered. For a fixed permutation the optimal rotation comes from
//! the SVD of the cross-covariance and the optimal scale is closed form,
//! which leaves `S = 100 (1 - t^2 / (|q|^2 |p|^2))` with `t` the maximal
//! rotated overlap.

use nalgebra::{Matrix3, SVD};

use crate::error::{Error, Result};
use crate::geometry::{AtomicStructure, Element, Point};
use crate::graphs::CU_O_CUTOFF;

const BUILTIN: &str = include_str!("../data/reference_shapes.txt");

/// Largest vertex count accepted; the search enumerates all `N!` labelings.
pub const MAX_VERTICES: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceShape {
    name: String,
    vertices: Vec<Point>,
}

impl ReferenceShape {
    /// Centers `vertices` and scales them to unit RMS radius.
    pub fn new(name: impl Into<String>, vertices: Vec<Point>) -> Result<Self> {
        let name = name.into();
        if vertices.len() < 2 || vertices.len() > MAX_VERTICES {
            return Err(Error::Shape(format!(
                "shape `{name}` has {} vertices; supported range is 2..={MAX_VERTICES}",
                vertices.len()
            )));
        }
        let centered = center(&vertices);
        let ss: f64 = centered.iter().map(|p| p.norm_squared()).sum();
        if !(ss > 1e-20) {
            return Err(Error::Shape(format!("shape `{name}` has coincident vertices")));
        }
        let r = (ss / centered.len() as f64).sqrt();
        Ok(Self {
            name,
            vertices: centered.into_iter().map(|p| p / r).collect(),
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn vertices(&self) -> &[Point] {
        &self.vertices
    }

    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    /// Four- and five-vertex library shipped with the crate.
    pub fn builtin() -> Vec<ReferenceShape> {
        parse_reference_shapes(BUILTIN).expect("bundled reference shapes parse")
    }
}

/// Reads `shape <name>` blocks of `x y z` vertex lines; `#` starts a comment.
pub fn parse_reference_shapes(text: &str) -> Result<Vec<ReferenceShape>> {
    let mut shapes = Vec::new();
    let mut current: Option<(String, Vec<Point>)> = None;
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix("shape ") {
            if let Some((n, v)) = current.take() {
                shapes.push(ReferenceShape::new(n, v)?);
            }
            current = Some((name.trim().to_string(), Vec::new()));
            continue;
        }
        let Some((_, verts)) = current.as_mut() else {
            return Err(Error::Shape(format!("line {}: vertex before any `shape` line", idx + 1)));
        };
        let xyz: Vec<f64> = line
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Shape(format!("line {}: expected three numbers", idx + 1)))?;
        let [x, y, z] = xyz[..] else {
            return Err(Error::Shape(format!("line {}: expected three numbers", idx + 1)));
        };
        verts.push(Point::new(x, y, z));
    }
    if let Some((n, v)) = current {
        shapes.push(ReferenceShape::new(n, v)?);
    }
    if shapes.is_empty() {
        return Err(Error::Shape("no shapes defined".into()));
    }
    Ok(shapes)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CsmResult {
    pub shape: String,
    /// Shape measure in `[0, 100]`.
    pub s: f64,
    /// Input point `i` is matched to reference vertex `permutation[i]`.
    pub permutation: Vec<usize>,
    /// Proper rotation taking the reference onto the centered input.
    pub rotation: Matrix3<f64>,
}

fn center(points: &[Point]) -> Vec<Point> {
    let c = points.iter().sum::<Point>() / points.len() as f64;
    points.iter().map(|p| p - c).collect()
}

/// Largest `trace(R^T M)` over proper rotations, with the maximizing `R`.
fn best_rotation(m: &Matrix3<f64>) -> (f64, Matrix3<f64>) {
    let svd = SVD::new(*m, true, true);
    let u = svd.u.expect("requested U");
    let v_t = svd.v_t.expect("requested V^T");
    let d = if (u * v_t).determinant() < 0.0 { -1.0 } else { 1.0 };
    let s = svd.singular_values;
    // singular values are sorted in decreasing order
    let trace = s[0] + s[1] + d * s[2];
    let fix = Matrix3::from_diagonal(&nalgebra::Vector3::new(1.0, 1.0, d));
    (trace, u * fix * v_t)
}

fn for_each_permutation(n: usize, f: &mut impl FnMut(&[usize])) {
    fn rec(k: usize, perm: &mut Vec<usize>, f: &mut impl FnMut(&[usize])) {
        if k == perm.len() {
            f(perm);
            return;
        }
        for i in k..perm.len() {
            perm.swap(k, i);
            rec(k + 1, perm, f);
            perm.swap(k, i);
        }
    }
    let mut perm: Vec<usize> = (0..n).collect();
    rec(0, &mut perm, f);
}

pub fn csm(points: &[Point], reference: &ReferenceShape) -> Result<CsmResult> {
    if points.len() != reference.len() {
        return Err(Error::Shape(format!(
            "{} points cannot be compared with `{}` ({} vertices)",
            points.len(),
            reference.name,
            reference.len()
        )));
    }
    let q = center(points);
    let qq: f64 = q.iter().map(|p| p.norm_squared()).sum();
    let scale: f64 = points.iter().map(|p| p.norm_squared()).sum::<f64>().max(1.0);
    if !(qq > 1e-20 * scale) {
        return Err(Error::Shape("points are coincident".into()));
    }
    let p = &reference.vertices;
    let pp: f64 = p.iter().map(|v| v.norm_squared()).sum();

    let mut best: Option<(f64, Vec<usize>, Matrix3<f64>)> = None;
    for_each_permutation(q.len(), &mut |perm| {
        let m: Matrix3<f64> = q
            .iter()
            .zip(perm)
            .map(|(qi, &j)| qi * p[j].transpose())
            .sum();
        let (t, r) = best_rotation(&m);
        if best.as_ref().is_none_or(|(bt, _, _)| t > *bt) {
            best = Some((t, perm.to_vec(), r));
        }
    });
    let (t, permutation, rotation) = best.expect("at least one permutation");
    let t = t.max(0.0);
    let s = (100.0 * (1.0 - t * t / (qq * pp))).clamp(0.0, 100.0);
    Ok(CsmResult {
        shape: reference.name.clone(),
        s,
        permutation,
        rotation,
    })
}

/// Measures against every library shape with a matching vertex count.
pub fn csm_all(points: &[Point], library: &[ReferenceShape]) -> Result<Vec<CsmResult>> {
    let results: Vec<CsmResult> = library
        .iter()
        .filter(|r| r.len() == points.len())
        .map(|r| csm(points, r))
        .collect::<Result<_>>()?;
    if results.is_empty() {
        return Err(Error::Shape(format!(
            "no reference shape has {} vertices",
            points.len()
        )));
    }
    Ok(results)
}

/// Lowest-`S` shape; ties go to the earlier library entry.
pub fn closest_shape(points: &[Point], library: &[ReferenceShape]) -> Result<CsmResult> {
    let mut results = csm_all(points, library)?.into_iter();
    let first = results.next().expect("csm_all returns at least one");
    Ok(results.fold(first, |best, r| if r.s < best.s { r } else { best }))
}

/// Positions of the oxygens within the Cu–O cutoff of the single copper
/// atom; hydrogens are ignored.
pub fn oxygen_shell(s: &AtomicStructure) -> Result<Vec<Point>> {
    let cu: Vec<usize> = (0..s.len()).filter(|&i| s.element(i) == Element::Cu).collect();
    let &[cu] = cu.as_slice() else {
        return Err(Error::InvalidStructure(format!(
            "expected one Cu atom, found {}",
            cu.len()
        )));
    };
    Ok((0..s.len())
        .filter(|&i| s.element(i) == Element::O && s.distance(cu, i) < CU_O_CUTOFF)
        .map(|i| s.position(i))
        .collect())
}
