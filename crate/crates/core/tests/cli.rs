use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rydberggpt::checkpoint;
use rydberggpt::dataset::Dataset;
use rydberggpt::model::{init_params, ModelConfig};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_rydberggpt"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn gen(dir: &Path, name: &str, extra: &[&str]) -> PathBuf {
    let out = dir.join(name);
    let mut args = vec![
        "gen-data",
        "--L",
        "2",
        "--delta",
        "1.1",
        "--rb",
        "1.15",
        "--beta",
        "16",
        "--out",
        p(&out),
    ];
    args.extend_from_slice(extra);
    let o = run(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    out
}

#[test]
fn gen_data_shape_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let a = gen(dir.path(), "a.txt", &["--samples", "1000", "--seed", "7"]);
    let b = gen(dir.path(), "b.txt", &["--samples", "1000", "--seed", "7"]);
    let text = std::fs::read_to_string(&a).unwrap();
    assert_eq!(text, std::fs::read_to_string(&b).unwrap());
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 1001);
    assert!(lines[1..]
        .iter()
        .all(|l| l.len() == 4 && l.chars().all(|c| c == '0' || c == '1')));
    let d = Dataset::read(&a).unwrap();
    assert_eq!(d.header.generator.kind, "ed_ground");
    assert_eq!(d.header.generator.seed, 7);
}

#[test]
fn gen_data_header_round_trips_at_scale() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("l3.txt");
    let o = run(&[
        "gen-data",
        "--L",
        "3",
        "--delta",
        "1.1",
        "--rb",
        "1.15",
        "--beta",
        "16",
        "--samples",
        "100000",
        "--seed",
        "3",
        "--out",
        p(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(&out).unwrap();
    let first = text.lines().next().unwrap();
    let v: serde_json::Value = serde_json::from_str(first).unwrap();
    assert_eq!(v["L"], 3);
    assert_eq!(v["num_samples"], 100000);
    assert_eq!(v["delta_over_omega"], 1.1);
    assert_eq!(v["rb_over_a"], 1.15);
    assert_eq!(v["beta_omega"], 16.0);
    assert_eq!(v["order"], "snake");
    assert_eq!(v["generator"]["seed"], 3);
    assert_eq!(serde_json::to_string(&v).unwrap().len(), first.len());
    let d = Dataset::read(&out).unwrap();
    assert_eq!(d.to_text().unwrap(), text);
}

#[test]
fn gen_data_limits_and_seed_reporting() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x.txt");
    let o = run(&[
        "gen-data",
        "--L",
        "5",
        "--delta",
        "1.1",
        "--samples",
        "10",
        "--seed",
        "1",
        "--out",
        p(&out),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("resource limit"), "{}", stderr(&o));
    let o = run(&[
        "gen-data",
        "--L",
        "4",
        "--delta",
        "1.1",
        "--beta",
        "1",
        "--thermal",
        "--samples",
        "10",
        "--seed",
        "1",
        "--out",
        p(&out),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("N <= 12"), "{}", stderr(&o));
    let o = run(&[
        "gen-data",
        "--L",
        "2",
        "--delta",
        "-0.5",
        "--samples",
        "10",
        "--out",
        p(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stderr(&o).starts_with("seed: "), "{}", stderr(&o));
    let o = run(&["gen-data", "--L", "2"]);
    assert_eq!(o.status.code(), Some(2));
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let path = dir.join("train.json");
    std::fs::write(&path, body).unwrap();
    path
}

#[test]
fn train_resume_and_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path(), "data.txt", &["--samples", "64", "--seed", "1"]);
    let cfg = write_config(
        dir.path(),
        r#"{"datasets": ["data.txt"], "batch_size": 16, "epochs": 1, "seed": 3, "output_dir": "run"}"#,
    );
    let o = run(&["train", "--config", p(&cfg)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let run_dir = dir.path().join("run");
    let csv = std::fs::read_to_string(run_dir.join("metrics.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows[0], "epoch,step,loss_per_token,lr,seconds");
    assert_eq!(rows.len(), 2);
    assert!(rows[1].starts_with("1,4,"), "{}", rows[1]);
    let ck = run_dir.join("epoch_0001.ckpt");
    assert_eq!(checkpoint::read(&ck).unwrap().meta.step, 4);

    let cfg = write_config(
        dir.path(),
        r#"{"datasets": ["data.txt"], "batch_size": 16, "epochs": 1, "seed": 3, "output_dir": "run",
            "resume": "run/epoch_0001.ckpt"}"#,
    );
    let o = run(&["train", "--config", p(&cfg)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(run_dir.join("metrics.csv")).unwrap();
    assert!(csv.lines().nth(2).unwrap().starts_with("2,8,"), "{csv}");
    assert_eq!(checkpoint::read(&run_dir.join("epoch_0002.ckpt")).unwrap().meta.step, 8);

    let cfg = write_config(dir.path(), r#"{"datasets": ["missing.txt"], "epochs": 1}"#);
    let o = run(&["train", "--config", p(&cfg)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("missing.txt"), "{}", stderr(&o));

    let cfg = write_config(dir.path(), "{\n  \"epochs\": 1,\n  \"datasets\": [\"data.txt\"\n}");
    let o = run(&["train", "--config", p(&cfg)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 4, column 1"), "{}", stderr(&o));
}

fn random_checkpoint(dir: &Path) -> PathBuf {
    let path = dir.join("init.ckpt");
    checkpoint::write(&init_params(&ModelConfig::default(), 5).unwrap(), &path).unwrap();
    path
}

#[test]
fn sample_estimate_enumerate() {
    let dir = tempfile::tempdir().unwrap();
    let ck = random_checkpoint(dir.path());
    let out = dir.path().join("s.txt");
    let base = ["--L", "2", "--delta", "1.1", "--samples", "300", "--seed", "4"];
    let mut args = vec!["sample", "--checkpoint", p(&ck), "--out", p(&out)];
    args.extend_from_slice(&base);
    assert!(run(&args).status.success());
    let cached = std::fs::read(&out).unwrap();
    args.push("--uncached");
    assert!(run(&args).status.success());
    assert_eq!(std::fs::read(&out).unwrap(), cached);
    let d = Dataset::read(&out).unwrap();
    assert_eq!(d.header.generator.kind, "model");
    assert_eq!(d.records.len(), 300);

    let o = run(&[
        "estimate",
        "--observable",
        "sx",
        "--data",
        p(&out),
        "--checkpoint",
        p(&ck),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["observable"], "sx");
    assert_eq!(v["n_samples"], 300);
    assert!(v["std_error"].as_f64().unwrap() > 0.0);
    let o = run(&["estimate", "--observable", "energy", "--data", p(&out)]);
    assert_eq!(o.status.code(), Some(2));

    let o = run(&["enumerate", "--init-seed", "9", "--L", "3", "--delta", "1.1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["configurations"], 512);
    assert!((v["total_mass"].as_f64().unwrap() - 1.0).abs() < 1e-6);
    let o = run(&["enumerate", "--init-seed", "9", "--L", "4", "--delta", "1.1"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn estimate_on_checkerboards() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cb.txt");
    let header = r#"{"format_version":1,"L":2,"omega":1.0,"delta_over_omega":3.0,"rb_over_a":1.15,"beta_omega":16.0,"num_samples":4,"order":"snake","generator":{"kind":"manual","seed":0}}"#;
    std::fs::write(&path, format!("{header}\n1010\n0101\n1010\n0101\n")).unwrap();
    let o = run(&["estimate", "--observable", "stag", "--data", p(&path)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(
        stdout(&o).trim(),
        r#"{"observable":"stag","mean":0.5,"std_error":0.0,"n_samples":4}"#
    );
}

#[test]
fn oracle_energy_estimate_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "g.txt", &["--samples", "500", "--seed", "2"]);
    let o = run(&["estimate", "--observable", "energy", "--data", p(&data), "--oracle"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert!(v["std_error"].as_f64().unwrap() < 1e-9);
}

#[test]
fn checkpoint_mismatch_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let ck = random_checkpoint(dir.path());
    let bytes = std::fs::read(&ck).unwrap();
    let nl = bytes.iter().position(|&b| b == b'\n').unwrap();
    let header = String::from_utf8(bytes[..nl].to_vec())
        .unwrap()
        .replace("\"graph_layers\":2", "\"graph_layers\":3");
    let mut forged = header.into_bytes();
    forged.extend_from_slice(&bytes[nl..]);
    let bad = dir.path().join("bad.ckpt");
    std::fs::write(&bad, forged).unwrap();
    let out = dir.path().join("s.txt");
    let o = run(&[
        "sample",
        "--checkpoint",
        p(&bad),
        "--L",
        "2",
        "--delta",
        "1",
        "--samples",
        "3",
        "--seed",
        "1",
        "--out",
        p(&out),
    ]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("gnn.layer2.weight (missing)"), "{}", stderr(&o));
}

#[test]
fn gradcheck_table_and_failure_code() {
    let o = run(&["gradcheck", "--seed", "1", "--max-per-block", "2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.lines().next().unwrap().starts_with("block"));
    assert!(text.contains("head.weight"));
    assert!(text.lines().last().unwrap().starts_with("PASS"));
    let o = run(&["gradcheck", "--seed", "1", "--max-per-block", "1", "--tol", "0"]);
    assert_eq!(o.status.code(), Some(4));
    assert!(stdout(&o).lines().last().unwrap().starts_with("FAIL"));
}

#[test]
fn sweep_csv_columns() {
    let dir = tempfile::tempdir().unwrap();
    let ck = random_checkpoint(dir.path());
    let o = run(&[
        "sweep",
        "--checkpoint",
        p(&ck),
        "--L",
        "2",
        "--delta-range",
        "-0.364:3.173:3",
        "--samples",
        "200",
        "--seed",
        "1",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(
        lines[0],
        "delta_over_omega,energy,energy_err,sx,sx_err,stag,stag_err,exact_energy,exact_sx,exact_stag"
    );
    assert_eq!(lines.len(), 4);
    assert!(lines[1].starts_with("-0.364,"));
    assert!(lines[3].starts_with("3.173,"));
    let out = dir.path().join("t.csv");
    let o = run(&[
        "sweep",
        "--checkpoint",
        p(&ck),
        "--L",
        "2",
        "--delta",
        "1.1",
        "--temperature-range",
        "0.5:2:2",
        "--samples",
        "100",
        "--seed",
        "1",
        "--out",
        p(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(&out).unwrap();
    assert!(csv.starts_with("T_over_omega,"));
    assert_eq!(csv.lines().count(), 3);
}
