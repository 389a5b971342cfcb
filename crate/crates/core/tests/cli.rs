use std::fs;
use std::path::Path;

use emucal::cli::{dispatch, EXIT_OK, EXIT_USAGE, MANIFEST_FILE};

fn run(args: &[&str]) -> i32 {
    let mut argv = vec!["emucal"];
    argv.extend_from_slice(args);
    dispatch(argv)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Small bundle plus a short SGP training run.
fn trained(root: &Path) -> (String, String) {
    let data = root.join("data");
    let train = root.join("train");
    assert_eq!(run(&["gen-data", "--seed", "3", "--sets", "40", "--nuclides", "5", "--out", s(&data)]), EXIT_OK);
    assert_eq!(
        run(&["train", "--seed", "3", "--data", s(&data), "--inducing", "8", "--epochs", "15", "--out", s(&train)]),
        EXIT_OK
    );
    let ckpt = emucal::cli::preferred_checkpoint(&train);
    (s(&data).to_string(), s(&ckpt).to_string())
}

#[test]
fn gen_data_is_deterministic_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let out = |name: &str, seed: &str| {
        let p = dir.path().join(name);
        assert_eq!(run(&["gen-data", "--seed", seed, "--sets", "20", "--nuclides", "4", "--out", s(&p)]), EXIT_OK);
        fs::read_to_string(p.join(emucal::dataset::OUTPUTS_FILE)).unwrap()
    };
    let a = out("a", "1");
    assert_eq!(a, out("b", "1"));
    assert_ne!(a, out("c", "2"));
    assert_eq!(a.lines().count(), 21);
}

#[test]
fn train_writes_checkpoints_metrics_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    trained(dir.path());
    let train = dir.path().join("train");
    for f in [
        emucal::training::FINAL_CHECKPOINT_FILE,
        emucal::training::TRACE_FILE,
        emucal::training::METRICS_FILE,
        MANIFEST_FILE,
    ] {
        assert!(train.join(f).exists(), "{f} missing");
    }
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(train.join(MANIFEST_FILE)).unwrap()).unwrap();
    assert_eq!(manifest["status"], "ok");
    assert_eq!(manifest["config"]["train"]["seed"], 3);
    assert_eq!(manifest["config"]["train"]["epochs"], 15);
}

#[test]
fn calibrate_writes_one_row_per_draw() {
    let dir = tempfile::tempdir().unwrap();
    let (data, ckpt) = trained(dir.path());
    let out = dir.path().join("cal");
    let code = run(&[
        "calibrate", "--data", &data, "--checkpoint", &ckpt, "--warmup", "50", "--samples", "500", "--out", s(&out),
    ]);
    assert_eq!(code, EXIT_OK);
    let samples = fs::read_to_string(out.join(emucal::inference::SAMPLES_FILE)).unwrap();
    let lines: Vec<&str> = samples.lines().collect();
    assert_eq!(lines.len(), 501);
    assert!(lines.iter().all(|l| l.split(',').count() == 12));
    let diag: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join(emucal::inference::DIAGNOSTICS_FILE)).unwrap()).unwrap();
    assert_eq!(diag["hpd90"].as_array().unwrap().len(), 12);
}

#[test]
fn mle_and_evaluate_write_their_records() {
    let dir = tempfile::tempdir().unwrap();
    let (data, ckpt) = trained(dir.path());
    let mle = dir.path().join("mle");
    assert_eq!(run(&["mle", "--data", &data, "--checkpoint", &ckpt, "--steps", "5", "--out", s(&mle)]), EXIT_OK);
    let rec: serde_json::Value = serde_json::from_str(&fs::read_to_string(mle.join(emucal::inference::MLE_FILE)).unwrap()).unwrap();
    assert_eq!(rec["rounds"].as_array().unwrap().len(), 10);
    let ev = dir.path().join("ev");
    assert_eq!(run(&["evaluate", "--data", &data, "--checkpoint", &ckpt, "--out", s(&ev)]), EXIT_OK);
    assert!(ev.join(emucal::cli::EVALUATION_FILE).exists());
}

#[test]
fn sweep_and_report_collect_every_job() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let sweep = dir.path().join("sweep");
    assert_eq!(run(&["gen-data", "--sets", "30", "--nuclides", "4", "--out", s(&data)]), EXIT_OK);
    let code = run(&[
        "sweep", "--data", s(&data), "--families", "sgp,svgp", "--inducing", "4,8", "--epochs", "3", "--batch-size", "16",
        "--workers", "2",
        "--out", s(&sweep),
    ]);
    assert_eq!(code, EXIT_OK);
    assert_eq!(run(&["report", "--sweep", s(&sweep)]), EXIT_OK);
    let csv = fs::read_to_string(sweep.join(emucal::cli::REPORT_FILE)).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "m,family,rmse_mev,time_mean_s,time_std_s,gate_status");
    assert_eq!(lines.len(), 5);
    assert!(lines[1].starts_with("4,sgp,"));
}

#[test]
fn usage_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(&["train", "--family", "gpt"]), EXIT_USAGE);
    assert_eq!(run(&["no-such-command"]), EXIT_USAGE);
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"seed": 1, "epochz": 3}"#).unwrap();
    assert_eq!(run(&["config", "--config", s(&bad)]), EXIT_USAGE);
    let missing = dir.path().join("nothing");
    assert_eq!(run(&["train", "--data", s(&missing), "--out", s(&dir.path().join("o"))]), EXIT_USAGE);
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.json");
    fs::write(&cfg, r#"{"seed": 4, "synth": {"n_sets": 12, "n_nuclides": 3}}"#).unwrap();
    let data = dir.path().join("data");
    assert_eq!(run(&["gen-data", "--config", s(&cfg), "--sets", "15", "--out", s(&data)]), EXIT_OK);
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(data.join(MANIFEST_FILE)).unwrap()).unwrap();
    assert_eq!(manifest["config"]["synth"]["n_sets"], 15);
    assert_eq!(manifest["config"]["synth"]["n_nuclides"], 3);
    assert_eq!(manifest["config"]["synth"]["seed"], 4);
}
