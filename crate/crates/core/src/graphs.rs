//! The four graph representations: the nearest-neighbour bond graph
//! (`Gmin`), the complete pairwise graph (`Gmax`), and `Gmin` augmented
//! with a line graph carrying bond angles (`Alignn`) or bond and dihedral
//! angles (`AlignnD`).
//!
//! Line-graph nodes are the bonds of the parent graph: node `b` of a
//! [`LineGraph`] is `graph.bonds()[b]`.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::geometry::{bond_angle, dihedral_angle, AtomicStructure, Element};

/// Cu–O coordination cutoff in Å (first minimum of the Cu–O RDF).
pub const CU_O_CUTOFF: f64 = 2.92;
/// Covalent O–H cutoff in Å.
pub const O_H_CUTOFF: f64 = 1.2;
/// O–O single-bond cutoff in Å, used for peroxide-like chains.
pub const O_O_CUTOFF: f64 = 1.6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Representation {
    Gmin,
    Gmax,
    Alignn,
    AlignnD,
}

impl Representation {
    pub const ALL: [Representation; 4] = [
        Representation::Gmin,
        Representation::Alignn,
        Representation::AlignnD,
        Representation::Gmax,
    ];

    pub fn has_line_graph(self) -> bool {
        matches!(self, Representation::Alignn | Representation::AlignnD)
    }

    pub fn has_dihedrals(self) -> bool {
        self == Representation::AlignnD
    }

    pub fn tag(self) -> &'static str {
        match self {
            Representation::Gmin => "gmin",
            Representation::Gmax => "gmax",
            Representation::Alignn => "alignn",
            Representation::AlignnD => "alignn-d",
        }
    }
}

impl FromStr for Representation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gmin" => Ok(Representation::Gmin),
            "gmax" => Ok(Representation::Gmax),
            "alignn" => Ok(Representation::Alignn),
            "alignn-d" => Ok(Representation::AlignnD),
            _ => Err(Error::Config(format!(
                "unknown representation `{s}` (expected gmin, gmax, alignn or alignn-d)"
            ))),
        }
    }
}

impl fmt::Display for Representation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

/// Distance rules used to decide which atom pairs are bonded in `Gmin`.
#[derive(Debug, Clone, PartialEq)]
pub struct BondRules {
    /// Heavy-atom pairs bonded when closer than the cutoff (Å).
    pub pair_cutoffs: Vec<(Element, Element, f64)>,
    /// Each H bonds to its nearest O, provided it lies within this distance.
    pub hydrogen_cutoff: f64,
}

impl Default for BondRules {
    fn default() -> Self {
        Self {
            pair_cutoffs: vec![
                (Element::Cu, Element::O, CU_O_CUTOFF),
                (Element::O, Element::O, O_O_CUTOFF),
            ],
            hydrogen_cutoff: O_H_CUTOFF,
        }
    }
}

impl BondRules {
    fn cutoff(&self, a: Element, b: Element) -> Option<f64> {
        self.pair_cutoffs
            .iter()
            .find(|(x, y, _)| (*x == a && *y == b) || (*x == b && *y == a))
            .map(|&(_, _, c)| c)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bond {
    /// Endpoint atom indices, smaller first.
    pub atoms: (usize, usize),
    /// Bond length in Å.
    pub distance: f64,
}

impl Bond {
    pub fn other(&self, atom: usize) -> usize {
        if self.atoms.0 == atom {
            self.atoms.1
        } else {
            self.atoms.0
        }
    }

    pub fn contains(&self, atom: usize) -> bool {
        self.atoms.0 == atom || self.atoms.1 == atom
    }
}

/// Undirected atomic graph; node `k` is atom `k` of the source structure.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    elements: Vec<Element>,
    bonds: Vec<Bond>,
}

impl Graph {
    /// Builds a graph from explicit atom pairs, measuring each distance.
    pub fn from_pairs(s: &AtomicStructure, pairs: &[(usize, usize)]) -> Result<Self> {
        let n = s.len();
        let mut bonds = Vec::with_capacity(pairs.len());
        let mut seen = std::collections::HashSet::new();
        for &(a, b) in pairs {
            if a >= n || b >= n {
                return Err(Error::Graph(format!("bond ({a},{b}) out of range")));
            }
            if a == b {
                return Err(Error::Graph(format!("self-loop on atom {a}")));
            }
            let key = (a.min(b), a.max(b));
            if !seen.insert(key) {
                return Err(Error::Graph(format!("duplicate bond {key:?}")));
            }
            bonds.push(Bond {
                atoms: key,
                distance: s.distance(key.0, key.1),
            });
        }
        Ok(Self {
            elements: s.atoms().iter().map(|a| a.element).collect(),
            bonds,
        })
    }

    pub fn node_count(&self) -> usize {
        self.elements.len()
    }

    pub fn elements(&self) -> &[Element] {
        &self.elements
    }

    pub fn bonds(&self) -> &[Bond] {
        &self.bonds
    }

    /// Per atom, the `(neighbour, bond index)` pairs in ascending neighbour order.
    pub fn adjacency(&self) -> Vec<Vec<(usize, usize)>> {
        let mut adj = vec![Vec::new(); self.node_count()];
        for (b, bond) in self.bonds.iter().enumerate() {
            adj[bond.atoms.0].push((bond.atoms.1, b));
            adj[bond.atoms.1].push((bond.atoms.0, b));
        }
        for list in &mut adj {
            list.sort_unstable();
        }
        adj
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.node_count()];
        for b in &self.bonds {
            deg[b.atoms.0] += 1;
            deg[b.atoms.1] += 1;
        }
        deg
    }
}

/// Bonds Cu–O within 2.92 Å and each H to its nearest O within 1.2 Å, plus
/// any other heavy-atom pairs allowed by `rules`.
///
/// When the structure contains copper it is treated as an aqua complex:
/// exactly one Cu is allowed and every O must be coordinated to it.
pub fn build_min_graph(s: &AtomicStructure, rules: &BondRules) -> Result<Graph> {
    let n = s.len();
    let mut pairs = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            let (ei, ej) = (s.element(i), s.element(j));
            if ei == Element::H || ej == Element::H {
                continue;
            }
            if let Some(cut) = rules.cutoff(ei, ej) {
                if s.distance(i, j) <= cut {
                    pairs.push((i, j));
                }
            }
        }
    }
    for h in (0..n).filter(|&i| s.element(i) == Element::H) {
        let nearest = (0..n)
            .filter(|&o| s.element(o) == Element::O)
            .map(|o| (s.distance(h, o), o))
            .min_by(|a, b| a.0.total_cmp(&b.0));
        match nearest {
            Some((d, o)) if d <= rules.hydrogen_cutoff => pairs.push((h.min(o), h.max(o))),
            _ => {
                return Err(Error::Graph(format!(
                    "hydrogen {h} has no oxygen within {} A",
                    rules.hydrogen_cutoff
                )))
            }
        }
    }
    pairs.sort_unstable();

    let copper: Vec<usize> = (0..n).filter(|&i| s.element(i) == Element::Cu).collect();
    if !copper.is_empty() {
        if copper.len() != 1 {
            return Err(Error::Graph(format!(
                "complex mode expects exactly one Cu, found {}",
                copper.len()
            )));
        }
        let cu = copper[0];
        for o in (0..n).filter(|&i| s.element(i) == Element::O) {
            let key = (cu.min(o), cu.max(o));
            if pairs.binary_search(&key).is_err() {
                return Err(Error::Graph(format!(
                    "oxygen {o} is not coordinated to Cu (distance {:.3} A)",
                    s.distance(cu, o)
                )));
            }
        }
    }
    Graph::from_pairs(s, &pairs)
}

/// Complete graph over all atoms.
pub fn build_max_graph(s: &AtomicStructure) -> Result<Graph> {
    let n = s.len();
    let pairs: Vec<(usize, usize)> = (0..n)
        .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
        .collect();
    Graph::from_pairs(s, &pairs)
}

/// Line-graph edge between two bonds sharing atom `center`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AngleEdge {
    pub bonds: (usize, usize),
    pub center: usize,
    /// Bond angle in degrees, [0, 180].
    pub angle: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Orientation {
    /// Angle measured as `dihedral_angle(k, i, j, l)`.
    Forward,
    /// The same torsion read along the reversed axis, `360 - forward`.
    Reverse,
}

/// Line-graph edge between bonds k–i and j–l, which are joined by bond i–j.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DihedralEdge {
    pub bonds: (usize, usize),
    /// `[k, i, j, l]` for forward edges, `[l, j, i, k]` for reverse ones.
    pub atoms: [usize; 4],
    /// Torsion in degrees, [0, 360).
    pub angle: f64,
    pub orientation: Orientation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LineGraph {
    node_count: usize,
    angle_edges: Vec<AngleEdge>,
    dihedral_edges: Vec<DihedralEdge>,
}

impl LineGraph {
    /// Equals the number of bonds in the parent graph.
    pub fn node_count(&self) -> usize {
        self.node_count
    }

    pub fn angle_edges(&self) -> &[AngleEdge] {
        &self.angle_edges
    }

    /// Every geometric dihedral appears twice, once per orientation; forward
    /// and reverse copies are adjacent.
    pub fn dihedral_edges(&self) -> &[DihedralEdge] {
        &self.dihedral_edges
    }

    /// Geometric dihedrals, each counted once.
    pub fn dihedral_count(&self) -> usize {
        self.dihedral_edges.len() / 2
    }
}

pub fn build_line_graph(
    g: &Graph,
    with_dihedrals: bool,
    s: &AtomicStructure,
) -> Result<LineGraph> {
    if g.node_count() != s.len() {
        return Err(Error::Graph("graph was not built from this structure".into()));
    }
    let adj = g.adjacency();
    let mut angle_edges = Vec::new();
    for (center, nbrs) in adj.iter().enumerate() {
        for a in 0..nbrs.len() {
            for b in a + 1..nbrs.len() {
                let (na, ba) = nbrs[a];
                let (nb, bb) = nbrs[b];
                let angle = bond_angle(&s.position(na), &s.position(center), &s.position(nb))?;
                angle_edges.push(AngleEdge {
                    bonds: (ba, bb),
                    center,
                    angle,
                });
            }
        }
    }

    let mut dihedral_edges = Vec::new();
    if with_dihedrals {
        for bond in g.bonds() {
            let (i, j) = bond.atoms;
            for &(k, b_ki) in &adj[i] {
                if k == j {
                    continue;
                }
                for &(l, b_jl) in &adj[j] {
                    // k == l closes a three-ring; no torsion is defined there.
                    if l == i || l == k {
                        continue;
                    }
                    let forward = dihedral_angle(
                        &s.position(k),
                        &s.position(i),
                        &s.position(j),
                        &s.position(l),
                    )?;
                    let reverse = if forward == 0.0 { 0.0 } else { 360.0 - forward };
                    dihedral_edges.push(DihedralEdge {
                        bonds: (b_ki, b_jl),
                        atoms: [k, i, j, l],
                        angle: forward,
                        orientation: Orientation::Forward,
                    });
                    dihedral_edges.push(DihedralEdge {
                        bonds: (b_jl, b_ki),
                        atoms: [l, j, i, k],
                        angle: reverse,
                        orientation: Orientation::Reverse,
                    });
                }
            }
        }
    }
    Ok(LineGraph {
        node_count: g.bonds().len(),
        angle_edges,
        dihedral_edges,
    })
}

/// A structure encoded in one of the four representations.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphBundle {
    representation: Representation,
    graph: Graph,
    line_graph: Option<LineGraph>,
}

impl GraphBundle {
    pub fn build(
        s: &AtomicStructure,
        representation: Representation,
        rules: &BondRules,
    ) -> Result<Self> {
        let graph = match representation {
            Representation::Gmax => build_max_graph(s)?,
            _ => build_min_graph(s, rules)?,
        };
        let line_graph = if representation.has_line_graph() {
            Some(build_line_graph(&graph, representation.has_dihedrals(), s)?)
        } else {
            None
        };
        Ok(Self {
            representation,
            graph,
            line_graph,
        })
    }

    pub fn representation(&self) -> Representation {
        self.representation
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn line_graph(&self) -> Option<&LineGraph> {
        self.line_graph.as_ref()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EdgeCounts {
    pub bonds: usize,
    pub angles: usize,
    pub dihedrals: usize,
    pub total: usize,
}

impl fmt::Display for EdgeCounts {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "bonds={} angles={} dihedrals={} total={}",
            self.bonds, self.angles, self.dihedrals, self.total
        )
    }
}

pub fn edge_counts(bundle: &GraphBundle) -> EdgeCounts {
    let bonds = bundle.graph.bonds().len();
    let (angles, dihedrals) = bundle
        .line_graph
        .as_ref()
        .map(|lg| (lg.angle_edges().len(), lg.dihedral_count()))
        .unwrap_or((0, 0));
    EdgeCounts {
        bonds,
        angles,
        dihedrals,
        total: bonds + angles + dihedrals,
    }
}
