//! Edge-gated graph convolution stack, Gaussian-parameter head and the
//! interpretable per-component head.
//!
//! Undirected edges carry one shared embedding but send messages in both
//! directions. For directed edge `i <- j` the gate is
//! `sigmoid(e_ij) / (sum_{j'} sigmoid(e_ij') + eps)` over all edges arriving
//! at `i`. Node features update as
//! `h_i + SiLU(LN(W_s h_i + sum_j gate_ij * W_d h_j))`; each directed edge
//! proposes `SiLU(LN(W_g [h_i, h_j, e_ij]))` and the shared embedding moves
//! by the mean of its two proposals.
//!
//! With a line graph present, each interaction layer first convolves the
//! line graph (nodes are bonds, edges are angles) and then the atomic graph
//! (nodes are atoms, edges are the freshly updated bonds).

use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encoding::{
    encode_angle_into, rbf_expand_into, AngleKind, BondAngleEncoding, EncoderConfig,
    FeatureVector,
};
use crate::error::{Error, Result};
use crate::geometry::Element;
use crate::graphs::{GraphBundle, Representation};
use crate::nn::{
    load_into, read_checkpoint, write_checkpoint, Array, ParamId, ParamStore, Tape, Var,
};

/// Width of the hidden layer of the Gaussian head.
pub const HEAD_HIDDEN: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum HeadKind {
    /// Sum-pool atoms, then linear(64) -> SiLU -> linear(3) -> peak activation.
    #[default]
    Gaussian,
    /// Every final embedding -> linear(1) -> softplus, summed per graph.
    Interpretable,
}

impl HeadKind {
    pub fn tag(self) -> &'static str {
        match self {
            HeadKind::Gaussian => "gaussian",
            HeadKind::Interpretable => "interpretable",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(HeadKind::Gaussian),
            "interpretable" => Ok(HeadKind::Interpretable),
            _ => Err(Error::Config(format!("unknown head `{s}`"))),
        }
    }

    /// Number of target columns the head is trained against.
    pub fn output_width(self) -> usize {
        match self {
            HeadKind::Gaussian => 3,
            HeadKind::Interpretable => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub layers: usize,
    pub channels: usize,
    pub cutoff_distance: f64,
    pub cutoff_angle: f64,
    pub gate_epsilon: f64,
    pub representation: Representation,
    pub head: HeadKind,
    pub bond_angle_encoding: BondAngleEncoding,
    /// Interpretable head only: separate scalar maps for atoms, bonds,
    /// bond angles and dihedrals instead of one shared map.
    pub per_kind_scalar_maps: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 6,
            channels: 64,
            cutoff_distance: 6.0,
            cutoff_angle: 2.0,
            gate_epsilon: 1e-9,
            representation: Representation::AlignnD,
            head: HeadKind::Gaussian,
            bond_angle_encoding: BondAngleEncoding::Cosine,
            per_kind_scalar_maps: false,
        }
    }
}

impl ModelConfig {
    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            channels: self.channels,
            cutoff_distance: self.cutoff_distance,
            cutoff_angle: self.cutoff_angle,
            bond_angle_encoding: self.bond_angle_encoding,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::Config("at least one interaction layer is required".into()));
        }
        if !(self.gate_epsilon >= 0.0) {
            return Err(Error::Config("gate epsilon must be non-negative".into()));
        }
        self.encoder().validate()
    }

    fn metadata(&self) -> Vec<(String, String)> {
        let enc = match self.bond_angle_encoding {
            BondAngleEncoding::Cosine => "cos",
            BondAngleEncoding::CosineSine => "cos-sin",
        };
        [
            ("layers", self.layers.to_string()),
            ("channels", self.channels.to_string()),
            ("cutoff_distance", format!("{:e}", self.cutoff_distance)),
            ("cutoff_angle", format!("{:e}", self.cutoff_angle)),
            ("gate_epsilon", format!("{:e}", self.gate_epsilon)),
            ("representation", self.representation.tag().to_string()),
            ("head", self.head.tag().to_string()),
            ("bond_angle_encoding", enc.to_string()),
            ("per_kind_scalar_maps", self.per_kind_scalar_maps.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    fn from_metadata(file: &crate::nn::CheckpointFile) -> Result<Self> {
        let get = |k: &str| {
            file.meta(k).ok_or_else(|| Error::Checkpoint {
                line: 0,
                message: format!("missing metadata `{k}`"),
            })
        };
        let num = |k: &str| -> Result<f64> {
            get(k)?.parse().map_err(|_| Error::Checkpoint {
                line: 0,
                message: format!("bad value for `{k}`"),
            })
        };
        let int = |k: &str| -> Result<usize> {
            get(k)?.parse().map_err(|_| Error::Checkpoint {
                line: 0,
                message: format!("bad value for `{k}`"),
            })
        };
        Ok(Self {
            layers: int("layers")?,
            channels: int("channels")?,
            cutoff_distance: num("cutoff_distance")?,
            cutoff_angle: num("cutoff_angle")?,
            gate_epsilon: num("gate_epsilon")?,
            representation: get("representation")?.parse()?,
            head: HeadKind::parse(get("head")?)?,
            bond_angle_encoding: match get("bond_angle_encoding")? {
                "cos" => BondAngleEncoding::Cosine,
                "cos-sin" => BondAngleEncoding::CosineSine,
                other => return Err(Error::Config(format!("unknown angle encoding `{other}`"))),
            },
            per_kind_scalar_maps: get("per_kind_scalar_maps")? == "true",
        })
    }
}

/// Parameters of one edge-gated convolution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvParams {
    pub w_src: ParamId,
    pub w_dst: ParamId,
    /// `[D, 3D]`, acting on `[h_i, h_j, e_ij]`.
    pub w_gate: ParamId,
    pub node_gamma: ParamId,
    pub node_beta: ParamId,
    pub edge_gamma: ParamId,
    pub edge_beta: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
pub enum HeadParams {
    Gaussian {
        hidden_w: ParamId,
        hidden_b: ParamId,
        out_w: ParamId,
        out_b: ParamId,
    },
    /// One `(weight, bias)` map, or four in the order atom, bond, bond
    /// angle, dihedral.
    Interpretable { maps: Vec<(ParamId, ParamId)> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    config: ModelConfig,
    params: ParamStore,
    atom_table: ParamId,
    atom_convs: Vec<ConvParams>,
    line_convs: Vec<ConvParams>,
    head: HeadParams,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianPeak {
    pub mu: f64,
    pub sigma: f64,
    pub amplitude: f64,
}

impl GaussianPeak {
    pub fn new(mu: f64, sigma: f64, amplitude: f64) -> Result<Self> {
        let p = Self {
            mu,
            sigma,
            amplitude,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mu.is_finite() && self.sigma.is_finite() && self.amplitude.is_finite()) {
            return Err(Error::Data("Gaussian parameters must be finite".into()));
        }
        if self.sigma <= 0.0 || self.amplitude < 0.0 {
            return Err(Error::Data(format!(
                "need sigma > 0 and A >= 0, got sigma={} A={}",
                self.sigma, self.amplitude
            )));
        }
        Ok(())
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.mu, self.sigma, self.amplitude]
    }

    /// Unnormalized Gaussian `A / (sigma sqrt(2 pi)) exp(-(x - mu)^2 / (2 sigma^2))`.
    pub fn evaluate(&self, x: f64) -> f64 {
        let z = (x - self.mu) / self.sigma;
        self.amplitude / (self.sigma * (2.0 * std::f64::consts::PI).sqrt()) * (-0.5 * z * z).exp()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ComponentKind {
    Atom,
    Bond,
    BondAngle,
    Dihedral,
}

impl ComponentKind {
    pub fn tag(self) -> &'static str {
        match self {
            ComponentKind::Atom => "atom",
            ComponentKind::Bond => "bond",
            ComponentKind::BondAngle => "bond_angle",
            ComponentKind::Dihedral => "dihedral",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Contribution {
    pub kind: ComponentKind,
    /// Atom indices: `[i]`, `[i, j]`, `[a, center, b]` or `[k, i, j, l]`.
    pub atoms: Vec<usize>,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContributionReport {
    pub components: Vec<Contribution>,
    pub total: f64,
}

impl ContributionReport {
    pub fn sum_of(&self, kind: ComponentKind) -> f64 {
        self.components
            .iter()
            .filter(|c| c.kind == kind)
            .map(|c| c.value)
            .sum()
    }
}

/// Looks up the embedding row of an atom type.
pub fn embed_atom_type(z: Element, table: &Array) -> Result<FeatureVector> {
    if table.rows() != Element::ALL.len() {
        return Err(Error::Shape(format!(
            "atom table needs {} rows, has {}",
            Element::ALL.len(),
            table.rows()
        )));
    }
    Ok(FeatureVector(table.row(z.index()).to_vec()))
}

/// Scalar inputs of one bundle expanded into feature rows.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedGraph {
    representation: Representation,
    channels: usize,
    atom_types: Vec<usize>,
    bonds: Vec<(usize, usize)>,
    bond_features: Vec<f64>,
    /// Line-graph edges as bond-index pairs: bond angles first, then the
    /// dihedral edges with forward and reverse copies adjacent.
    line_edges: Vec<(usize, usize)>,
    line_kinds: Vec<AngleKind>,
    line_features: Vec<f64>,
    line_atoms: Vec<Vec<usize>>,
}

impl EncodedGraph {
    pub fn new(bundle: &GraphBundle, cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.channels;
        let g = bundle.graph();
        let atom_types = g.elements().iter().map(|e| e.index()).collect();
        let bonds: Vec<(usize, usize)> = g.bonds().iter().map(|b| b.atoms).collect();
        let mut bond_features = vec![0.0; bonds.len() * d];
        for (row, b) in bond_features.chunks_exact_mut(d).zip(g.bonds()) {
            rbf_expand_into(b.distance, cfg.cutoff_distance, row);
        }
        let mut line_edges = Vec::new();
        let mut line_kinds = Vec::new();
        let mut line_atoms = Vec::new();
        let mut angles = Vec::new();
        if let Some(lg) = bundle.line_graph() {
            for a in lg.angle_edges() {
                let (b0, b1) = (g.bonds()[a.bonds.0], g.bonds()[a.bonds.1]);
                line_edges.push(a.bonds);
                line_kinds.push(AngleKind::BondAngle);
                line_atoms.push(vec![b0.other(a.center), a.center, b1.other(a.center)]);
                angles.push(a.angle);
            }
            for dih in lg.dihedral_edges() {
                line_edges.push(dih.bonds);
                line_kinds.push(AngleKind::Dihedral);
                line_atoms.push(dih.atoms.to_vec());
                angles.push(dih.angle);
            }
        }
        let mut line_features = vec![0.0; line_edges.len() * d];
        for ((row, &kind), &angle) in line_features
            .chunks_exact_mut(d)
            .zip(&line_kinds)
            .zip(&angles)
        {
            encode_angle_into(kind, angle, cfg, row)?;
        }
        Ok(Self {
            representation: bundle.representation(),
            channels: d,
            atom_types,
            bonds,
            bond_features,
            line_edges,
            line_kinds,
            line_features,
            line_atoms,
        })
    }

    pub fn representation(&self) -> Representation {
        self.representation
    }

    pub fn atom_count(&self) -> usize {
        self.atom_types.len()
    }

    pub fn bond_count(&self) -> usize {
        self.bonds.len()
    }

    pub fn line_edge_count(&self) -> usize {
        self.line_edges.len()
    }
}

/// Directed message-passing layout of an undirected graph. Undirected edge
/// `u = (a, b)` becomes directed edges `2u` (a receives from b) and `2u + 1`.
#[derive(Debug, Clone)]
pub struct Topology {
    pub nodes: usize,
    pub edges: usize,
    pub recv: Rc<[usize]>,
    pub src: Rc<[usize]>,
    pub und: Rc<[usize]>,
}

impl Topology {
    pub fn new(nodes: usize, edges: &[(usize, usize)]) -> Self {
        let mut recv = Vec::with_capacity(edges.len() * 2);
        let mut src = Vec::with_capacity(edges.len() * 2);
        let mut und = Vec::with_capacity(edges.len() * 2);
        for (u, &(a, b)) in edges.iter().enumerate() {
            recv.extend([a, b]);
            src.extend([b, a]);
            und.extend([u, u]);
        }
        Self {
            nodes,
            edges: edges.len(),
            recv: recv.into(),
            src: src.into(),
            und: und.into(),
        }
    }
}

/// Several encoded graphs merged into one disconnected graph.
#[derive(Debug, Clone)]
pub struct Batch {
    graphs: usize,
    channels: usize,
    representation: Representation,
    atom_types: Rc<[usize]>,
    atom_graph: Rc<[usize]>,
    bond_graph: Rc<[usize]>,
    line_graph_ids: Rc<[usize]>,
    line_kinds: Vec<AngleKind>,
    bond_features: Array,
    line_features: Array,
    atom_topo: Topology,
    line_topo: Topology,
}

impl Batch {
    pub fn new(graphs: &[&EncodedGraph]) -> Result<Self> {
        let first = graphs
            .first()
            .ok_or_else(|| Error::Empty("batch with no graphs".into()))?;
        let (d, rep) = (first.channels, first.representation);
        let mut atom_types = Vec::new();
        let mut atom_graph = Vec::new();
        let mut bond_graph = Vec::new();
        let mut line_graph_ids = Vec::new();
        let mut line_kinds = Vec::new();
        let mut bonds = Vec::new();
        let mut line_edges = Vec::new();
        let mut bond_features = Vec::new();
        let mut line_features = Vec::new();
        for (gi, g) in graphs.iter().enumerate() {
            if g.channels != d || g.representation != rep {
                return Err(Error::Shape(
                    "batch mixes channel counts or representations".into(),
                ));
            }
            let (a0, b0) = (atom_types.len(), bonds.len());
            atom_types.extend_from_slice(&g.atom_types);
            atom_graph.extend(std::iter::repeat_n(gi, g.atom_types.len()));
            bonds.extend(g.bonds.iter().map(|&(i, j)| (i + a0, j + a0)));
            bond_graph.extend(std::iter::repeat_n(gi, g.bonds.len()));
            line_edges.extend(g.line_edges.iter().map(|&(i, j)| (i + b0, j + b0)));
            line_graph_ids.extend(std::iter::repeat_n(gi, g.line_edges.len()));
            line_kinds.extend_from_slice(&g.line_kinds);
            bond_features.extend_from_slice(&g.bond_features);
            line_features.extend_from_slice(&g.line_features);
        }
        let atom_topo = Topology::new(atom_types.len(), &bonds);
        let line_topo = Topology::new(bonds.len(), &line_edges);
        Ok(Self {
            graphs: graphs.len(),
            channels: d,
            representation: rep,
            atom_types: atom_types.into(),
            atom_graph: atom_graph.into(),
            bond_graph: bond_graph.into(),
            line_graph_ids: line_graph_ids.into(),
            line_kinds,
            bond_features: Array::from_vec(&[bonds.len(), d], bond_features)?,
            line_features: Array::from_vec(&[line_edges.len(), d], line_features)?,
            atom_topo,
            line_topo,
        })
    }

    pub fn graph_count(&self) -> usize {
        self.graphs
    }

    pub fn representation(&self) -> Representation {
        self.representation
    }
}

/// Tape handles of the final atom, bond and line-graph-edge embeddings.
#[derive(Debug, Clone, Copy)]
pub struct Embeddings {
    pub atoms: Var,
    pub bonds: Var,
    pub line: Option<Var>,
}

struct ConvVars {
    w_src: Var,
    w_dst: Var,
    w_gate: Var,
    node_gamma: Var,
    node_beta: Var,
    edge_gamma: Var,
    edge_beta: Var,
}

impl ConvVars {
    fn load(tape: &mut Tape, p: &ConvParams) -> Self {
        Self {
            w_src: tape.param(p.w_src),
            w_dst: tape.param(p.w_dst),
            w_gate: tape.param(p.w_gate),
            node_gamma: tape.param(p.node_gamma),
            node_beta: tape.param(p.node_beta),
            edge_gamma: tape.param(p.edge_gamma),
            edge_beta: tape.param(p.edge_beta),
        }
    }
}

/// One edge-gated convolution over `topo`: node features `h` `[N, D]`,
/// undirected edge features `e` `[E, D]`. Returns the updated `(h, e)`.
pub fn edge_gated_conv(
    tape: &mut Tape,
    params: &ConvParams,
    h: Var,
    e: Var,
    topo: &Topology,
    gate_epsilon: f64,
) -> Result<(Var, Var)> {
    let p = ConvVars::load(tape, params);
    conv_with(tape, &p, h, e, topo, gate_epsilon)
}

fn conv_with(
    tape: &mut Tape,
    p: &ConvVars,
    h: Var,
    e: Var,
    topo: &Topology,
    eps: f64,
) -> Result<(Var, Var)> {
    let d = tape.value(h).cols();
    if tape.value(h).rows() != topo.nodes || tape.value(e).rows() != topo.edges {
        return Err(Error::Shape(format!(
            "convolution over {} nodes / {} edges given {:?} and {:?}",
            topo.nodes,
            topo.edges,
            tape.value(h).shape(),
            tape.value(e).shape()
        )));
    }

    let s = tape.sigmoid(e);
    let s_dir = tape.gather(s, topo.und.clone())?;
    let denom = tape.scatter_add(s_dir, topo.recv.clone(), topo.nodes)?;
    let denom = tape.add_scalar(denom, eps);
    let denom_dir = tape.gather(denom, topo.recv.clone())?;
    let gate = tape.div(s_dir, denom_dir)?;

    let wd_h = tape.linear(h, p.w_dst)?;
    let from_src = tape.gather(wd_h, topo.src.clone())?;
    let msg = tape.mul(gate, from_src)?;
    let agg = tape.scatter_add(msg, topo.recv.clone(), topo.nodes)?;
    let ws_h = tape.linear(h, p.w_src)?;
    let pre = tape.add(ws_h, agg)?;
    let normed = tape.layer_norm(pre, p.node_gamma, p.node_beta)?;
    let act = tape.silu(normed);
    let h_new = tape.add(h, act)?;

    let gi = tape.linear_block(h, p.w_gate, 0, d)?;
    let gj = tape.linear_block(h, p.w_gate, d, d)?;
    let ge = tape.linear_block(e, p.w_gate, 2 * d, d)?;
    let gi = tape.gather(gi, topo.recv.clone())?;
    let gj = tape.gather(gj, topo.src.clone())?;
    let ge = tape.gather(ge, topo.und.clone())?;
    let m = tape.add(gi, gj)?;
    let m = tape.add(m, ge)?;
    let m = tape.layer_norm(m, p.edge_gamma, p.edge_beta)?;
    let u = tape.silu(m);
    let u = tape.scatter_add(u, topo.und.clone(), topo.edges)?;
    let u = tape.scale(u, 0.5);
    let e_new = tape.add(e, u)?;
    Ok((h_new, e_new))
}

impl ModelState {
    /// Fresh weights: matrices and biases uniform in `±sqrt(1/fan_in)`, the
    /// atom table uniform in `±1`, layer-norm `gamma = 1`, `beta = 0`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.channels;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let atom_table = params.add_uniform("atom_embedding", &[Element::ALL.len(), d], 1.0, &mut rng)?;

        let mut conv = |params: &mut ParamStore, prefix: String| -> Result<ConvParams> {
            let b1 = (1.0 / d as f64).sqrt();
            let b3 = (1.0 / (3 * d) as f64).sqrt();
            Ok(ConvParams {
                w_src: params.add_uniform(format!("{prefix}.w_src"), &[d, d], b1, &mut rng)?,
                w_dst: params.add_uniform(format!("{prefix}.w_dst"), &[d, d], b1, &mut rng)?,
                w_gate: params.add_uniform(format!("{prefix}.w_gate"), &[d, 3 * d], b3, &mut rng)?,
                node_gamma: params.add(format!("{prefix}.node_norm.gamma"), Array::filled(&[d], 1.0))?,
                node_beta: params.add(format!("{prefix}.node_norm.beta"), Array::zeros(&[d]))?,
                edge_gamma: params.add(format!("{prefix}.edge_norm.gamma"), Array::filled(&[d], 1.0))?,
                edge_beta: params.add(format!("{prefix}.edge_norm.beta"), Array::zeros(&[d]))?,
            })
        };
        let mut atom_convs = Vec::with_capacity(config.layers);
        let mut line_convs = Vec::new();
        for l in 0..config.layers {
            if config.representation.has_line_graph() {
                line_convs.push(conv(&mut params, format!("bond_angle.{l}"))?);
            }
            atom_convs.push(conv(&mut params, format!("atom_bond.{l}"))?);
        }

        let bd = (1.0 / d as f64).sqrt();
        let head = match config.head {
            HeadKind::Gaussian => {
                let bh = (1.0 / HEAD_HIDDEN as f64).sqrt();
                HeadParams::Gaussian {
                    hidden_w: params.add_uniform("head.hidden.weight", &[HEAD_HIDDEN, d], bd, &mut rng)?,
                    hidden_b: params.add_uniform("head.hidden.bias", &[HEAD_HIDDEN], bd, &mut rng)?,
                    out_w: params.add_uniform("head.output.weight", &[3, HEAD_HIDDEN], bh, &mut rng)?,
                    out_b: params.add_uniform("head.output.bias", &[3], bh, &mut rng)?,
                }
            }
            HeadKind::Interpretable => {
                let names: &[&str] = if config.per_kind_scalar_maps {
                    &["atom", "bond", "bond_angle", "dihedral"]
                } else {
                    &["shared"]
                };
                let maps = names
                    .iter()
                    .map(|n| {
                        Ok((
                            params.add_uniform(format!("head.scalar.{n}.weight"), &[1, d], bd, &mut rng)?,
                            params.add_uniform(format!("head.scalar.{n}.bias"), &[1], bd, &mut rng)?,
                        ))
                    })
                    .collect::<Result<Vec<_>>>()?;
                HeadParams::Interpretable { maps }
            }
        };
        Ok(Self {
            config,
            params,
            atom_table,
            atom_convs,
            line_convs,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn atom_table(&self) -> ParamId {
        self.atom_table
    }

    pub fn atom_convs(&self) -> &[ConvParams] {
        &self.atom_convs
    }

    pub fn line_convs(&self) -> &[ConvParams] {
        &self.line_convs
    }

    pub fn head(&self) -> &HeadParams {
        &self.head
    }

    pub fn encode(&self, bundle: &GraphBundle) -> Result<EncodedGraph> {
        self.check_representation(bundle.representation())?;
        EncodedGraph::new(bundle, &self.config.encoder())
    }

    fn check_representation(&self, found: Representation) -> Result<()> {
        if found != self.config.representation {
            return Err(Error::RepresentationMismatch {
                expected: self.config.representation.tag().into(),
                found: found.tag().into(),
            });
        }
        Ok(())
    }

    /// Runs the `L` interaction layers and returns the final embeddings.
    pub fn interactions(&self, tape: &mut Tape, batch: &Batch) -> Result<Embeddings> {
        self.check_representation(batch.representation)?;
        if batch.channels != self.config.channels {
            return Err(Error::Shape(format!(
                "batch encoded with {} channels, model has {}",
                batch.channels, self.config.channels
            )));
        }
        let eps = self.config.gate_epsilon;
        let table = tape.param(self.atom_table);
        let mut h = tape.gather(table, batch.atom_types.clone())?;
        let mut b = tape.input(batch.bond_features.clone());
        let mut line = if self.config.representation.has_line_graph() {
            Some(tape.input(batch.line_features.clone()))
        } else {
            None
        };
        for l in 0..self.config.layers {
            if let Some(a) = line {
                let p = ConvVars::load(tape, &self.line_convs[l]);
                let (nb, na) = conv_with(tape, &p, b, a, &batch.line_topo, eps)?;
                b = nb;
                line = Some(na);
            }
            let p = ConvVars::load(tape, &self.atom_convs[l]);
            let (nh, nb) = conv_with(tape, &p, h, b, &batch.atom_topo, eps)?;
            h = nh;
            b = nb;
        }
        Ok(Embeddings {
            atoms: h,
            bonds: b,
            line,
        })
    }

    /// Batched forward pass: `[B, 3]` peaks for the Gaussian head, `[B, 1]`
    /// totals for the interpretable head.
    pub fn forward_batch(&self, tape: &mut Tape, batch: &Batch) -> Result<Var> {
        let emb = self.interactions(tape, batch)?;
        match &self.head {
            HeadParams::Gaussian {
                hidden_w,
                hidden_b,
                out_w,
                out_b,
            } => {
                let pooled = tape.scatter_add(emb.atoms, batch.atom_graph.clone(), batch.graphs)?;
                let (w1, b1) = (tape.param(*hidden_w), tape.param(*hidden_b));
                let hidden = tape.linear(pooled, w1)?;
                let hidden = tape.add_bias(hidden, b1)?;
                let hidden = tape.silu(hidden);
                let (w2, b2) = (tape.param(*out_w), tape.param(*out_b));
                let raw = tape.linear(hidden, w2)?;
                let raw = tape.add_bias(raw, b2)?;
                tape.peak_head(raw)
            }
            HeadParams::Interpretable { .. } => {
                let parts = self.component_scalars(tape, batch, &emb)?;
                let mut total: Option<Var> = None;
                for (scalars, ids) in parts {
                    let per_graph = tape.scatter_add(scalars, ids, batch.graphs)?;
                    total = Some(match total {
                        Some(t) => tape.add(t, per_graph)?,
                        None => per_graph,
                    });
                }
                Ok(total.expect("atoms always contribute"))
            }
        }
    }

    /// Softplus scalars for atoms, bonds and line-graph edges, each paired
    /// with the graph index of every row.
    fn component_scalars(
        &self,
        tape: &mut Tape,
        batch: &Batch,
        emb: &Embeddings,
    ) -> Result<Vec<(Var, Rc<[usize]>)>> {
        let HeadParams::Interpretable { maps } = &self.head else {
            return Err(Error::Config("model does not have an interpretable head".into()));
        };
        let vars: Vec<(Var, Var)> = maps
            .iter()
            .map(|&(w, b)| (tape.param(w), tape.param(b)))
            .collect();
        let scalar = |tape: &mut Tape, x: Var, (w, b): (Var, Var)| -> Result<Var> {
            let y = tape.linear(x, w)?;
            let y = tape.add_bias(y, b)?;
            Ok(tape.softplus(y))
        };
        let pick = |k: usize| if vars.len() == 1 { vars[0] } else { vars[k] };
        let mut parts = vec![
            (scalar(tape, emb.atoms, pick(0))?, batch.atom_graph.clone()),
            (scalar(tape, emb.bonds, pick(1))?, batch.bond_graph.clone()),
        ];
        if let Some(line) = emb.line {
            if vars.len() == 1 {
                parts.push((scalar(tape, line, pick(2))?, batch.line_graph_ids.clone()));
            } else {
                for (kind, slot) in [(AngleKind::BondAngle, 2), (AngleKind::Dihedral, 3)] {
                    let rows: Vec<usize> = (0..batch.line_kinds.len())
                        .filter(|&r| batch.line_kinds[r] == kind)
                        .collect();
                    if rows.is_empty() {
                        continue;
                    }
                    let ids: Rc<[usize]> =
                        rows.iter().map(|&r| batch.line_graph_ids[r]).collect();
                    let sub = tape.gather(line, rows.into())?;
                    parts.push((scalar(tape, sub, pick(slot))?, ids));
                }
            }
        }
        Ok(parts)
    }

    /// Predicted peak for one structure.
    pub fn forward(&self, bundle: &GraphBundle) -> Result<GaussianPeak> {
        if self.config.head != HeadKind::Gaussian {
            return Err(Error::Config(
                "forward needs the Gaussian head; use forward_interpretable".into(),
            ));
        }
        let enc = self.encode(bundle)?;
        let out = self.predict_encoded(&[&enc])?;
        let r = out.row(0);
        Ok(GaussianPeak {
            mu: r[0],
            sigma: r[1],
            amplitude: r[2],
        })
    }

    /// Raw head output for already-encoded graphs, one row per graph.
    pub fn predict_encoded(&self, graphs: &[&EncodedGraph]) -> Result<Array> {
        let batch = Batch::new(graphs)?;
        let mut tape = Tape::new(&self.params);
        let out = self.forward_batch(&mut tape, &batch)?;
        Ok(tape.value(out).clone())
    }

    /// Per-component decomposition of the interpretable head's output. Both
    /// orientations of a dihedral are reported together as one component.
    pub fn forward_interpretable(&self, bundle: &GraphBundle) -> Result<ContributionReport> {
        let enc = self.encode(bundle)?;
        let batch = Batch::new(&[&enc])?;
        let mut tape = Tape::new(&self.params);
        let emb = self.interactions(&mut tape, &batch)?;
        let parts = self.component_scalars(&mut tape, &batch, &emb)?;
        let mut total_var: Option<Var> = None;
        for (scalars, ids) in &parts {
            let per_graph = tape.scatter_add(*scalars, ids.clone(), 1)?;
            total_var = Some(match total_var {
                Some(t) => tape.add(t, per_graph)?,
                None => per_graph,
            });
        }
        let total = tape.value(total_var.expect("atoms always contribute")).item();

        let mut components = Vec::new();
        let atoms = tape.value(parts[0].0);
        for i in 0..enc.atom_count() {
            components.push(Contribution {
                kind: ComponentKind::Atom,
                atoms: vec![i],
                value: atoms.data()[i],
            });
        }
        let bonds = tape.value(parts[1].0);
        for (k, &(i, j)) in enc.bonds.iter().enumerate() {
            components.push(Contribution {
                kind: ComponentKind::Bond,
                atoms: vec![i, j],
                value: bonds.data()[k],
            });
        }
        // Line scalars arrive either as one block or as angle/dihedral blocks.
        let line_values: Vec<f64> = parts[2..]
            .iter()
            .flat_map(|(v, _)| tape.value(*v).data().to_vec())
            .collect();
        let mut r = 0;
        while r < line_values.len() {
            match enc.line_kinds[r] {
                AngleKind::BondAngle => {
                    components.push(Contribution {
                        kind: ComponentKind::BondAngle,
                        atoms: enc.line_atoms[r].clone(),
                        value: line_values[r],
                    });
                    r += 1;
                }
                AngleKind::Dihedral => {
                    components.push(Contribution {
                        kind: ComponentKind::Dihedral,
                        atoms: enc.line_atoms[r].clone(),
                        value: line_values[r] + line_values[r + 1],
                    });
                    r += 2;
                }
            }
        }
        Ok(ContributionReport { components, total })
    }

    pub fn to_checkpoint(&self) -> String {
        write_checkpoint(&self.params, &self.config.metadata())
    }

    pub fn from_checkpoint(text: &str) -> Result<Self> {
        let file = read_checkpoint(text)?;
        let config = ModelConfig::from_metadata(&file)?;
        let mut state = Self::init(config, 0)?;
        load_into(&mut state.params, &file)?;
        Ok(state)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Atom, AtomicStructure, Point};
    use crate::graphs::BondRules;

    fn peroxide(tau_deg: f64) -> AtomicStructure {
        let t = tau_deg.to_radians();
        let a = 100f64.to_radians();
        let atoms = vec![
            Atom::new(Element::H, Point::new(0.97 * a.cos(), 0.97 * a.sin(), 0.0)),
            Atom::new(Element::O, Point::zeros()),
            Atom::new(Element::O, Point::new(1.45, 0.0, 0.0)),
            Atom::new(
                Element::H,
                Point::new(
                    1.45 - 0.97 * a.cos(),
                    0.97 * a.sin() * t.cos(),
                    0.97 * a.sin() * t.sin(),
                ),
            ),
        ];
        AtomicStructure::new(atoms, None).unwrap()
    }

    fn small(rep: Representation, head: HeadKind) -> ModelState {
        ModelState::init(
            ModelConfig {
                layers: 2,
                channels: 8,
                representation: rep,
                head,
                ..ModelConfig::default()
            },
            7,
        )
        .unwrap()
    }

    #[test]
    fn output_has_three_positive_width_entries() {
        let m = small(Representation::AlignnD, HeadKind::Gaussian);
        let b = GraphBundle::build(&peroxide(60.0), Representation::AlignnD, &BondRules::default()).unwrap();
        let p = m.forward(&b).unwrap();
        assert!(p.sigma > 0.0 && p.amplitude >= 0.0);
        let enc = m.encode(&b).unwrap();
        assert_eq!(m.predict_encoded(&[&enc]).unwrap().shape(), &[1, 3]);
    }

    #[test]
    fn representation_mismatch_is_rejected() {
        let m = small(Representation::Alignn, HeadKind::Gaussian);
        let b = GraphBundle::build(&peroxide(60.0), Representation::AlignnD, &BondRules::default()).unwrap();
        assert!(matches!(m.forward(&b), Err(Error::RepresentationMismatch { .. })));
    }

    #[test]
    fn seeds_control_initialization() {
        let cfg = ModelConfig {
            layers: 1,
            channels: 8,
            ..ModelConfig::default()
        };
        let a = ModelState::init(cfg, 1).unwrap();
        let b = ModelState::init(cfg, 1).unwrap();
        let c = ModelState::init(cfg, 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn gates_split_evenly_over_identical_edges() {
        // star: node 0 receives from nodes 1..=3 through identical edges
        let mut store = ParamStore::new();
        let d = 4;
        let mk = |s: &mut ParamStore, n: &str, shape: &[usize], v: f64| {
            s.add(n, Array::filled(shape, v)).unwrap()
        };
        let p = ConvParams {
            w_src: mk(&mut store, "ws", &[d, d], 0.0),
            w_dst: mk(&mut store, "wd", &[d, d], 0.0),
            w_gate: mk(&mut store, "wg", &[d, 3 * d], 0.0),
            node_gamma: mk(&mut store, "ng", &[d], 1.0),
            node_beta: mk(&mut store, "nb", &[d], 0.0),
            edge_gamma: mk(&mut store, "eg", &[d], 1.0),
            edge_beta: mk(&mut store, "eb", &[d], 0.0),
        };
        let topo = Topology::new(4, &[(0, 1), (0, 2), (0, 3)]);
        let mut tape = Tape::new(&store);
        let e = tape.input(Array::filled(&[3, d], 0.3));
        let s = tape.sigmoid(e);
        let s_dir = tape.gather(s, topo.und.clone()).unwrap();
        let denom = tape.scatter_add(s_dir, topo.recv.clone(), 4).unwrap();
        let denom = tape.add_scalar(denom, 1e-9);
        let back = tape.gather(denom, topo.recv.clone()).unwrap();
        let gate = tape.div(s_dir, back).unwrap();
        for r in [0, 2, 4] {
            for &g in tape.value(gate).row(r) {
                assert!((g - 1.0 / 3.0).abs() < 1e-8);
            }
        }
        // zero weights and zero beta: the residual passes features through
        let h = tape.input(Array::filled(&[4, d], 0.7));
        let (h2, e2) = edge_gated_conv(&mut tape, &p, h, e, &topo, 1e-9).unwrap();
        assert_eq!(tape.value(h2), tape.value(h));
        assert_eq!(tape.value(e2), tape.value(e));
    }

    #[test]
    fn checkpoint_round_trip_preserves_predictions() {
        let m = small(Representation::AlignnD, HeadKind::Gaussian);
        let b = GraphBundle::build(&peroxide(33.0), Representation::AlignnD, &BondRules::default()).unwrap();
        let text = m.to_checkpoint();
        let back = ModelState::from_checkpoint(&text).unwrap();
        assert_eq!(back.config(), m.config());
        assert_eq!(back.forward(&b).unwrap(), m.forward(&b).unwrap());
    }

    #[test]
    fn interpretable_report_sums_to_total() {
        for per_kind in [false, true] {
            let m = ModelState::init(
                ModelConfig {
                    layers: 2,
                    channels: 8,
                    head: HeadKind::Interpretable,
                    per_kind_scalar_maps: per_kind,
                    ..ModelConfig::default()
                },
                3,
            )
            .unwrap();
            let b = GraphBundle::build(&peroxide(71.0), Representation::AlignnD, &BondRules::default()).unwrap();
            let r = m.forward_interpretable(&b).unwrap();
            // 4 atoms, 3 bonds, 2 angles, 1 dihedral
            assert_eq!(r.components.len(), 10);
            let s: f64 = r.components.iter().map(|c| c.value).sum();
            assert!((s - r.total).abs() <= 1e-10);
            assert!(r.components.iter().all(|c| c.value > 0.0));
            let enc = m.encode(&b).unwrap();
            let batched = m.predict_encoded(&[&enc]).unwrap();
            assert!((batched.item() - r.total).abs() < 1e-12);
        }
    }

    #[test]
    fn atom_lookup() {
        let m = small(Representation::Gmin, HeadKind::Gaussian);
        let table = &m.params().get(m.atom_table()).value;
        let h1 = embed_atom_type(Element::H, table).unwrap();
        let h2 = embed_atom_type(Element::H, table).unwrap();
        let cu = embed_atom_type(Element::Cu, table).unwrap();
        assert_eq!(h1, h2);
        assert_ne!(h1, cu);
    }
}
