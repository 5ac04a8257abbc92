//! `alignnd`: graph encodings, synthetic data, training, prediction,
//! interpretation, peak fitting and shape measures from the command line.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 numerical failure (diverged training, unconverged fit).

mod config;

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use alignnd::data::{
    generate_synthetic, make_expressiveness_set, read_dataset, split, write_dataset,
    SyntheticConfig,
};
use alignnd::geometry::{parse_xyz, AtomicStructure};
use alignnd::graphs::{edge_counts, BondRules, GraphBundle, Representation};
use alignnd::model::{HeadKind, ModelState};
use alignnd::shape::{csm_all, oxygen_shell, parse_reference_shapes, ReferenceShape};
use alignnd::spectra::{broaden, fit_single_gaussian, BroadenConfig, SpectrumLines};
use alignnd::training::train_with;
use alignnd::Error;

use config::{parse_angle_encoding, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "alignnd", version, about = "Line-graph encodings and spectral peak models for aqua-copper complexes")]
struct Cli {
    /// Seed for every random choice [default: 0].
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for training [default: 1].
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build a graph representation and print its edge counts.
    Encode {
        #[arg(long, default_value = "alignn-d")]
        rep: Representation,
        /// Also write every edge as `kind,i,j,value` to this CSV file.
        #[arg(long)]
        csv: Option<PathBuf>,
        xyz: PathBuf,
    },
    /// Write a synthetic dataset directory (XYZ files plus manifest.csv).
    GenData(GenDataArgs),
    /// Train a model on a dataset directory.
    Train(Box<TrainArgs>),
    /// Predict `mu,sigma,A` for one structure.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        xyz: PathBuf,
    },
    /// Per-component contributions from an interpretable model.
    Interpret {
        #[arg(long)]
        checkpoint: PathBuf,
        xyz: PathBuf,
    },
    /// Broaden line spectra and fit one Gaussian per spectrum.
    FitPeaks {
        /// CSV with columns `E,I`, optionally preceded by `id`.
        csv: PathBuf,
        #[arg(long, default_value_t = 0.2)]
        kernel_sigma: f64,
        #[arg(long, default_value_t = 0.005)]
        step: f64,
        /// Plain kernel density estimate instead of intensity-weighted kernels.
        #[arg(long)]
        unweighted: bool,
    },
    /// Continuous shape measures of the Cu-coordinating oxygen shell.
    Csm {
        xyz: PathBuf,
        /// Reference shapes in the vertex-list format instead of the built-in library.
        #[arg(long)]
        shapes: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1000)]
    samples: usize,
    #[arg(long, default_value_t = 0.35)]
    p4: f64,
    #[arg(long, default_value_t = 0.55)]
    p5: f64,
    #[arg(long, default_value_t = 0.10)]
    p6: f64,
    /// Cu–O distance standard deviation, Å.
    #[arg(long, default_value_t = 0.08)]
    radial_jitter: f64,
    /// Bond direction perturbation, degrees.
    #[arg(long, default_value_t = 7.0)]
    angular_jitter: f64,
    /// Water rotation range about the Cu–O axis, ± degrees.
    #[arg(long, default_value_t = 180.0)]
    dihedral_spread: f64,
    /// Generate the H–O–O–H torsion set instead of copper complexes.
    #[arg(long)]
    peroxide: bool,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Dataset directory containing manifest.csv.
    #[arg(long)]
    data: PathBuf,
    /// Where to write the best-validation checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Per-epoch `epoch,train_loss,val_loss,lr` CSV.
    #[arg(long)]
    history: Option<PathBuf>,
    /// `key = value` file; flags given on the command line take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    rep: Option<Representation>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    channels: Option<usize>,
    #[arg(long)]
    cutoff_distance: Option<f64>,
    #[arg(long)]
    cutoff_angle: Option<f64>,
    #[arg(long)]
    gate_epsilon: Option<f64>,
    /// `gaussian` or `interpretable`.
    #[arg(long)]
    head: Option<String>,
    /// `cos` or `cos-sin`.
    #[arg(long)]
    bond_angle_encoding: Option<String>,
    #[arg(long)]
    per_kind_scalar_maps: bool,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr_init: Option<f64>,
    #[arg(long)]
    lr_max: Option<f64>,
    #[arg(long)]
    beta1: Option<f64>,
    #[arg(long)]
    beta2: Option<f64>,
    #[arg(long)]
    warmup_fraction: Option<f64>,
    #[arg(long)]
    stop_at_val_loss: Option<f64>,
    #[arg(long)]
    train_fraction: Option<f64>,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 1,
        Error::Diverged { .. } | Error::NoConvergence { .. } => 3,
        _ => 2,
    }
}

fn read_structure(path: &Path) -> alignnd::Result<AtomicStructure> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    parse_xyz(&text)
}

fn load_model(path: &Path) -> alignnd::Result<ModelState> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    ModelState::from_checkpoint(&text)
}

fn encode(rep: Representation, csv: Option<&Path>, xyz: &Path) -> alignnd::Result<String> {
    let s = read_structure(xyz)?;
    let bundle = GraphBundle::build(&s, rep, &BondRules::default())?;
    if let Some(path) = csv {
        let mut out = String::from("kind,i,j,value\n");
        for b in bundle.graph().bonds() {
            let _ = writeln!(out, "bond,{},{},{}", b.atoms.0, b.atoms.1, b.distance);
        }
        if let Some(lg) = bundle.line_graph() {
            for a in lg.angle_edges() {
                let _ = writeln!(out, "angle,{},{},{}", a.bonds.0, a.bonds.1, a.angle);
            }
            for d in lg.dihedral_edges() {
                let _ = writeln!(out, "dihedral,{},{},{}", d.bonds.0, d.bonds.1, d.angle);
            }
        }
        fs::write(path, out)?;
    }
    Ok(format!("{}\n", edge_counts(&bundle)))
}

fn gen_data(args: &GenDataArgs, seed: u64) -> alignnd::Result<String> {
    let records = if args.peroxide {
        make_expressiveness_set(args.samples, seed)?
    } else {
        generate_synthetic(&SyntheticConfig {
            samples: args.samples,
            coordination: vec![(4, args.p4), (5, args.p5), (6, args.p6)],
            radial_jitter: args.radial_jitter,
            angular_jitter: args.angular_jitter,
            dihedral_spread: args.dihedral_spread,
            seed,
        })?
    };
    write_dataset(&args.out, &records)?;
    eprintln!("wrote {} records to {}", records.len(), args.out.display());
    Ok(String::new())
}

fn run_config(args: &TrainArgs, cli: &Cli) -> alignnd::Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &args.config {
        cfg.apply_file(path)?;
    }
    let m = &mut cfg.model;
    if let Some(v) = args.rep {
        m.representation = v;
    }
    if let Some(v) = args.layers {
        m.layers = v;
    }
    if let Some(v) = args.channels {
        m.channels = v;
    }
    if let Some(v) = args.cutoff_distance {
        m.cutoff_distance = v;
    }
    if let Some(v) = args.cutoff_angle {
        m.cutoff_angle = v;
    }
    if let Some(v) = args.gate_epsilon {
        m.gate_epsilon = v;
    }
    if let Some(v) = &args.head {
        m.head = HeadKind::parse(v)?;
    }
    if let Some(v) = &args.bond_angle_encoding {
        m.bond_angle_encoding = parse_angle_encoding(v)?;
    }
    if args.per_kind_scalar_maps {
        m.per_kind_scalar_maps = true;
    }
    let t = &mut cfg.train;
    if let Some(v) = args.batch {
        t.batch_size = v;
    }
    if let Some(v) = args.epochs {
        t.epochs = v;
    }
    if let Some(v) = args.lr_init {
        t.lr_init = v;
    }
    if let Some(v) = args.lr_max {
        t.lr_max = v;
    }
    if let Some(v) = args.beta1 {
        t.beta1 = v;
    }
    if let Some(v) = args.beta2 {
        t.beta2 = v;
    }
    if let Some(v) = args.warmup_fraction {
        t.warmup_fraction = v;
    }
    if args.stop_at_val_loss.is_some() {
        t.stop_at_val_loss = args.stop_at_val_loss;
    }
    if let Some(v) = args.train_fraction {
        cfg.train_fraction = v;
    }
    if let Some(v) = cli.seed {
        cfg.train.seed = v;
    }
    if let Some(v) = cli.threads {
        cfg.train.threads = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train(args: &TrainArgs, cli: &Cli) -> alignnd::Result<String> {
    let cfg = run_config(args, cli)?;
    let records = read_dataset(&args.data)?;
    let (tr, va) = split(records, cfg.train_fraction, cfg.train.seed)?;
    eprintln!(
        "training {} on {} records, validating on {}",
        cfg.model.representation,
        tr.len(),
        va.len()
    );
    let outcome = train_with(&tr, &va, &cfg.model, &cfg.train, &mut |e| {
        eprintln!(
            "epoch {:>4}  train {:.4e}  val {:.4e}  lr {:.3e}",
            e.epoch, e.train_loss, e.val_loss, e.lr
        );
    })?;
    fs::write(&args.checkpoint, outcome.best.to_checkpoint())?;
    if let Some(path) = &args.history {
        fs::write(path, outcome.history.to_csv())?;
    }
    if let Some(best) = outcome.history.best() {
        eprintln!("best validation loss {:.4e} at epoch {}", best.val_loss, best.epoch);
    }
    Ok(String::new())
}

fn bundle_for(model: &ModelState, xyz: &Path) -> alignnd::Result<GraphBundle> {
    let s = read_structure(xyz)?;
    GraphBundle::build(&s, model.config().representation, &BondRules::default())
}

fn predict(checkpoint: &Path, xyz: &Path) -> alignnd::Result<String> {
    let model = load_model(checkpoint)?;
    let p = model.forward(&bundle_for(&model, xyz)?)?;
    Ok(format!("mu,sigma,A\n{},{},{}\n", p.mu, p.sigma, p.amplitude))
}

fn interpret(checkpoint: &Path, xyz: &Path) -> alignnd::Result<String> {
    let model = load_model(checkpoint)?;
    let report = model.forward_interpretable(&bundle_for(&model, xyz)?)?;
    let mut out = String::from("kind,indices,value,total\n");
    for c in &report.components {
        let idx: Vec<String> = c.atoms.iter().map(|i| i.to_string()).collect();
        let _ = writeln!(out, "{},{},{},{}", c.kind.tag(), idx.join("-"), c.value, report.total);
    }
    Ok(out)
}

type LineGroups = Vec<(String, Vec<(f64, f64)>)>;

/// Groups `(id, E, I)` rows by id in order of first appearance. Without an
/// `id` column every row belongs to the file stem.
fn read_lines_csv(path: &Path) -> alignnd::Result<LineGroups> {
    let mut rdr = csv::Reader::from_path(path)?;
    let headers = rdr.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h.trim() == name);
    let (e_col, i_col) = match (col("E"), col("I")) {
        (Some(e), Some(i)) => (e, i),
        _ => return Err(Error::Data(format!("{}: need `E` and `I` columns", path.display()))),
    };
    let id_col = col("id");
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, Vec<(f64, f64)>> = HashMap::new();
    for (n, row) in rdr.records().enumerate() {
        let row = row?;
        let num = |c: usize| -> alignnd::Result<f64> {
            row.get(c)
                .and_then(|v| v.trim().parse().ok())
                .ok_or_else(|| Error::Data(format!("row {}: non-numeric value", n + 2)))
        };
        let id = id_col
            .and_then(|c| row.get(c))
            .map(|s| s.trim().to_string())
            .unwrap_or_else(|| stem.clone());
        if !groups.contains_key(&id) {
            order.push(id.clone());
        }
        groups.entry(id).or_default().push((num(e_col)?, num(i_col)?));
    }
    if order.is_empty() {
        return Err(Error::Empty(format!("{} has no rows", path.display())));
    }
    Ok(order
        .into_iter()
        .map(|id| {
            let lines = groups.remove(&id).expect("grouped above");
            (id, lines)
        })
        .collect())
}

fn fit_peaks(path: &Path, cfg: &BroadenConfig) -> alignnd::Result<String> {
    let mut out = String::from("id,mu,sigma,A\n");
    for (id, lines) in read_lines_csv(path)? {
        let spec = broaden(&SpectrumLines::new(lines)?, cfg)?;
        let fit = fit_single_gaussian(&spec)?;
        if !fit.converged {
            return Err(Error::NoConvergence {
                iterations: fit.iterations,
                residual: fit.residual,
            });
        }
        let p = fit.peak;
        let _ = writeln!(out, "{id},{},{},{}", p.mu, p.sigma, p.amplitude);
    }
    Ok(out)
}

fn shape_measures(xyz: &Path, shapes: Option<&Path>) -> alignnd::Result<String> {
    let library = match shapes {
        Some(p) => parse_reference_shapes(&fs::read_to_string(p)?)?,
        None => ReferenceShape::builtin(),
    };
    let shell = oxygen_shell(&read_structure(xyz)?)?;
    if shell.len() == 6 {
        return Err(Error::Data(
            "sixfold complexes are outside the reference library".into(),
        ));
    }
    let results = csm_all(&shell, &library)?;
    let winner = results
        .iter()
        .enumerate()
        .fold(0, |best, (k, r)| if r.s < results[best].s { k } else { best });
    let mut out = String::from("shape,S,closest\n");
    for (k, r) in results.iter().enumerate() {
        let _ = writeln!(out, "{},{},{}", r.shape, r.s, k == winner);
    }
    eprintln!("closest shape: {} (S = {:.4})", results[winner].shape, results[winner].s);
    Ok(out)
}

fn run(cli: &Cli) -> alignnd::Result<String> {
    match &cli.command {
        Command::Encode { rep, csv, xyz } => encode(*rep, csv.as_deref(), xyz),
        Command::GenData(args) => gen_data(args, cli.seed.unwrap_or(0)),
        Command::Train(args) => train(args, cli),
        Command::Predict { checkpoint, xyz } => predict(checkpoint, xyz),
        Command::Interpret { checkpoint, xyz } => interpret(checkpoint, xyz),
        Command::FitPeaks {
            csv,
            kernel_sigma,
            step,
            unweighted,
        } => fit_peaks(
            csv,
            &BroadenConfig {
                kernel_sigma: *kernel_sigma,
                step: *step,
                intensity_weighted: !unweighted,
                ..BroadenConfig::default()
            },
        ),
        Command::Csm { xyz, shapes } => shape_measures(xyz, shapes.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(&cli) {
        Ok(out) => {
            print!("{out}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
