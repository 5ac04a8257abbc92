//! End-to-end runs of the `alignnd` binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const PEROXIDE: &str = "4
hydrogen peroxide
H -0.300000 0.930000 0.000000
O 0.000000 0.000000 0.000000
O 1.450000 0.000000 0.000000
H 1.750000 0.000000 0.930000
";

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_alignnd")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Writes a dataset of `samples` complexes with the given coordination
/// probabilities and returns the first structure file.
fn gen_data(dir: &Path, samples: usize, probs: [&str; 3]) -> std::path::PathBuf {
    let n = samples.to_string();
    let o = run(&[
        "gen-data", "--out", p(dir), "--samples", &n, "--p4", probs[0], "--p5", probs[1], "--p6", probs[2], "--seed", "3",
    ]);
    stdout(&o);
    let manifest = fs::read_to_string(dir.join("manifest.csv")).unwrap();
    assert_eq!(manifest.lines().count(), samples + 1);
    let first = manifest.lines().nth(1).unwrap().split(',').nth(1).unwrap().to_string();
    dir.join(first)
}

#[test]
fn encode_prints_counts_and_writes_edges() {
    let dir = tempfile::tempdir().unwrap();
    let xyz = dir.path().join("h2o2.xyz");
    fs::write(&xyz, PEROXIDE).unwrap();
    let csv = dir.path().join("edges.csv");
    let out = stdout(&run(&["encode", "--rep", "alignn-d", "--csv", p(&csv), p(&xyz)]));
    assert!(out.starts_with("bonds=3 angles=2 dihedrals=1"), "{out}");

    let edges = fs::read_to_string(&csv).unwrap();
    let mut lines = edges.lines();
    assert_eq!(lines.next(), Some("kind,i,j,value"));
    let kinds: Vec<&str> = lines.map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(kinds.iter().filter(|k| **k == "bond").count(), 3);
    assert_eq!(kinds.iter().filter(|k| **k == "angle").count(), 2);
    // both orientations of the torsion
    assert_eq!(kinds.iter().filter(|k| **k == "dihedral").count(), 2);

    let out = stdout(&run(&["encode", "--rep", "alignn", p(&xyz)]));
    assert!(out.starts_with("bonds=3 angles=2 dihedrals=0"), "{out}");
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(run(&["encode", "--bogus"]).status.code(), Some(1));
    assert_eq!(run(&[]).status.code(), Some(1));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn missing_input_is_a_data_error() {
    assert_eq!(run(&["encode", "/nonexistent/file.xyz"]).status.code(), Some(2));
}

#[test]
fn train_predict_and_interpret() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let xyz = gen_data(&data, 24, ["0.35", "0.55", "0.10"]);
    let config = dir.path().join("run.conf");
    fs::write(&config, "channels = 4\nlayers = 1\nepochs = 5\nbatch_size = 8\n").unwrap();
    let ckpt = dir.path().join("model.ckpt");
    let history = dir.path().join("history.csv");
    let o = run(&[
        "train", "--data", p(&data), "--checkpoint", p(&ckpt), "--history", p(&history), "--config", p(&config),
        "--epochs", "2", "--seed", "1",
    ]);
    stdout(&o);
    // the flag overrides the file
    let hist = fs::read_to_string(&history).unwrap();
    assert_eq!(hist.lines().count(), 3, "{hist}");
    assert!(hist.starts_with("epoch,train_loss,val_loss,lr"));

    let pred = stdout(&run(&["predict", "--checkpoint", p(&ckpt), p(&xyz)]));
    let mut lines = pred.lines();
    assert_eq!(lines.next(), Some("mu,sigma,A"));
    let vals: Vec<f64> = lines.next().unwrap().split(',').map(|v| v.parse().unwrap()).collect();
    assert_eq!(vals.len(), 3);
    assert!(vals.iter().all(|v| v.is_finite()) && vals[1] > 0.0 && vals[2] >= 0.0);

    // a Gaussian checkpoint has no decomposition
    assert_eq!(run(&["interpret", "--checkpoint", p(&ckpt), p(&xyz)]).status.code(), Some(1));

    let parts = dir.path().join("parts.ckpt");
    stdout(&run(&[
        "train", "--data", p(&data), "--checkpoint", p(&parts), "--config", p(&config), "--epochs", "1", "--head",
        "interpretable",
    ]));
    assert_eq!(run(&["predict", "--checkpoint", p(&parts), p(&xyz)]).status.code(), Some(1));
    let report = stdout(&run(&["interpret", "--checkpoint", p(&parts), p(&xyz)]));
    let rows: Vec<Vec<&str>> = report.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert!(!rows.is_empty());
    let total: f64 = rows[0][3].parse().unwrap();
    let sum: f64 = rows.iter().map(|r| r[2].parse::<f64>().unwrap()).sum();
    assert!((sum - total).abs() <= 1e-9 * total.max(1.0));
    for kind in ["atom", "bond"] {
        assert!(rows.iter().any(|r| r[0] == kind), "{kind}");
    }
}

#[test]
fn invalid_config_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    gen_data(&data, 6, ["1", "0", "0"]);
    let config = dir.path().join("bad.conf");
    fs::write(&config, "no_such_key = 3\n").unwrap();
    let ckpt = dir.path().join("m.ckpt");
    let o = run(&["train", "--data", p(&data), "--checkpoint", p(&ckpt), "--config", p(&config)]);
    assert_eq!(o.status.code(), Some(1));
    let o = run(&["train", "--data", p(&data), "--checkpoint", p(&ckpt), "--head", "nonsense"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn fit_peaks_recovers_single_lines() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("lines.csv");
    fs::write(&csv, "id,E,I\na,1.5,0.04\nb,2.0,0.01\nb,2.0,0.01\n").unwrap();
    let out = stdout(&run(&["fit-peaks", p(&csv)]));
    let rows: Vec<Vec<String>> = out.lines().skip(1).map(|l| l.split(',').map(String::from).collect()).collect();
    assert_eq!(out.lines().next(), Some("id,mu,sigma,A"));
    assert_eq!(rows.len(), 2);
    for (row, (id, mu, a)) in rows.iter().zip([("a", 1.5, 0.04), ("b", 2.0, 0.02)]) {
        let v: Vec<f64> = row[1..].iter().map(|x| x.parse().unwrap()).collect();
        assert_eq!(row[0], id);
        assert!((v[0] - mu).abs() < 1e-3, "{row:?}");
        assert!((v[1] - 0.2).abs() < 1e-2, "{row:?}");
        assert!((v[2] - a).abs() < 1e-2 * a, "{row:?}");
    }
}

#[test]
fn shape_measures_of_a_fourfold_complex() {
    let dir = tempfile::tempdir().unwrap();
    let xyz = gen_data(&dir.path().join("four"), 2, ["1", "0", "0"]);
    let out = stdout(&run(&["csm", p(&xyz)]));
    let rows: Vec<Vec<&str>> = out.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert!(!rows.is_empty());
    assert_eq!(rows.iter().filter(|r| r[2] == "true").count(), 1);
    for r in &rows {
        let s: f64 = r[1].parse().unwrap();
        assert!((0.0..=100.0).contains(&s));
    }

    let six = gen_data(&dir.path().join("six"), 2, ["0", "0", "1"]);
    assert_eq!(run(&["csm", p(&six)]).status.code(), Some(2));
}
