use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stochinterp"))
        .args(args)
        .env_remove("STOCHINTERP_OUT")
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn write_config(dir: &Path, body: &str) -> String {
    let path = dir.join("config.json");
    fs::write(&path, body).unwrap();
    path.to_str().unwrap().to_string()
}

const SMALL_SWEEP: &str = r#"{
    "experiment": "schedule-comparison",
    "cases": [{"name": "ring", "problem": {"type": "benchmark", "d": 2, "components": 4}}],
    "schedules": ["exp_decay", "uniform"],
    "n_steps": [10, 20],
    "seeds": [0, 1],
    "n_samples": 400
}"#;

#[test]
fn schedule_dump_prints_closed_form_grid() {
    let out = cli(&["schedule-dump", "--kind", "exp", "--h", "0.5", "--t0", "0.125", "--tn", "0.875"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("k,t_k,h_k"));
    let rows: Vec<Vec<String>> = lines.map(|l| l.split(',').map(str::to_string).collect()).collect();
    let ts: Vec<f64> = rows.iter().map(|r| r[1].parse().unwrap()).collect();
    assert_eq!(ts, vec![0.125, 0.25, 0.5, 0.75, 0.875]);
    let hs: Vec<f64> = rows.iter().take(4).map(|r| r[2].parse().unwrap()).collect();
    assert_eq!(hs, vec![0.125, 0.25, 0.25, 0.125]);
    assert_eq!(rows[4][2], "");
}

#[test]
fn schedule_dump_requires_parameters() {
    let out = cli(&["schedule-dump", "--kind", "uniform"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("--n"));
}

fn evaluate(p: &Path, q: &Path) -> f64 {
    let out = cli(&["evaluate", "--p", p.to_str().unwrap(), "--q", q.to_str().unwrap(), "--k", "5"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let report: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    report["kl"].as_f64().unwrap()
}

fn spiral(path: &Path, n: &str, seed: &str) {
    let out = cli(&["dataset", "--name", "spiral", "--n", n, "--seed", seed, "--out", path.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
}

#[test]
fn evaluate_same_law_files_is_near_zero() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    spiral(&a, "20000", "4");
    spiral(&b, "20000", "5");
    let kl = evaluate(&a, &b);
    assert!((-0.05..=0.05).contains(&kl), "kl = {kl}");
}

#[test]
fn evaluate_duplicate_file_counts_self_matches() {
    // Every p-point finds itself in q at distance zero, shifting s_i to the
    // (k-1)-th neighbour: the estimate sits near -1/(k-1).
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    spiral(&a, "5000", "4");
    spiral(&b, "5000", "4");
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let kl = evaluate(&a, &b);
    assert!((-0.3..=-0.2).contains(&kl), "kl = {kl}");
}

#[test]
fn sample_with_missing_checkpoint_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), SMALL_SWEEP);
    let missing = dir.path().join("no-such-net.json");
    let out = cli(&[
        "sample",
        "--config",
        &config,
        "--checkpoint",
        missing.to_str().unwrap(),
        "--out",
        dir.path().join("s.csv").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr(&out);
    assert!(err.contains("no-such-net.json"), "{err}");
    assert!(!dir.path().join("s.csv").exists());
}

#[test]
fn sample_with_analytic_drift_writes_batch() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), SMALL_SWEEP);
    let path = dir.path().join("s.csv");
    let out = cli(&["sample", "--config", &config, "--n", "200", "--out", path.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().count(), 201);
    assert!(dir.path().join("s.csv.meta.json").exists());
}

#[test]
fn malformed_config_reports_key_path() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(
        dir.path(),
        r#"{"experiment": "schedule-comparison", "seeds": [0],
            "cases": [{"name": "a", "problem": {"type": "benchmark", "d": -3}}]}"#,
    );
    let out = cli(&["run", "--config", &config, "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr(&out);
    assert!(err.contains("cases[0].problem"), "{err}");
}

#[test]
fn run_writes_reports_and_flags_override_config() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), SMALL_SWEEP);
    let out_dir = dir.path().join("out");
    let out = cli(&["run", "--config", &config, "--out", out_dir.to_str().unwrap(), "--seeds", "5"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let csv = fs::read_to_string(out_dir.join("results.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next(),
        Some("experiment,case,dim,schedule,n_steps,seed,drift,t,kl,floored,flagged,error")
    );
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().all(|r| r.contains(",5,analytic,")));
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out_dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["runs"].as_array().unwrap().len(), 4);
    assert_eq!(manifest["config_sha256"].as_str().unwrap().len(), 64);
}

#[test]
fn run_uses_environment_output_dir() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), SMALL_SWEEP);
    let env_out = dir.path().join("from-env");
    let out = Command::new(env!("CARGO_BIN_EXE_stochinterp"))
        .args(["run", "--config", &config, "--seeds", "0", "--n-steps", "10"])
        .env("STOCHINTERP_OUT", &env_out)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(env_out.join("results.csv").exists());
}

#[test]
fn run_exits_nonzero_when_every_run_fails() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(
        dir.path(),
        r#"{"experiment": "schedule-comparison", "seeds": [0], "n_steps": [10], "n_samples": 100,
            "cases": [{"name": "blocks", "problem": {"type": "datasets",
                "source": {"name": "blocks_a"}, "target": {"name": "blocks_target"}, "pairs": 50}}]}"#,
    );
    let out_dir = dir.path().join("out");
    let out = cli(&["run", "--config", &config, "--out", out_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let csv = fs::read_to_string(out_dir.join("results.csv")).unwrap();
    assert!(csv.lines().skip(1).all(|l| l.contains("config: ")));
}

#[test]
fn train_then_sample_with_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(
        dir.path(),
        r#"{"experiment": "train-and-sample", "seeds": [0], "n_steps": [20], "n_samples": 300,
            "schedules": ["uniform"],
            "train": {"hidden": [16, 16], "steps": 50, "batch_size": 64},
            "cases": [{"name": "g", "problem": {"type": "benchmark", "d": 1, "components": 2}}]}"#,
    );
    let ckpt = dir.path().join("net.json");
    let out = cli(&["train", "--config", &config, "--steps", "30", "--out", ckpt.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    let summary: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(summary["steps"], 30);
    assert!(summary["final_loss"].as_f64().unwrap().is_finite());
    assert!(dir.path().join("net.bin").exists());
    let samples = dir.path().join("s.csv");
    let out = cli(&[
        "sample",
        "--config",
        &config,
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--out",
        samples.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(fs::read_to_string(&samples).unwrap().lines().count(), 301);
}
