use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: [&str; 7] = [
    "scene.height=16",
    "scene.width=32",
    "scene.sprite_count=2",
    "scene.sprite_height=3, 6",
    "scene.sprite_width=3, 8",
    "scene.length=4",
    "model.height=16",
];

fn flowdepth(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flowdepth"))
        .args(args)
        .env_remove("FLOWDEPTH_DATA")
        .output()
        .expect("binary runs")
}

fn small_args(extra: &[&str]) -> Vec<String> {
    let mut v: Vec<String> = Vec::new();
    for s in SMALL.iter().chain(["model.width=32"].iter()).chain(extra) {
        v.push("--set".into());
        v.push(s.to_string());
    }
    v
}

fn run(cmd: &str, args: &[String]) -> BTreeMap<String, String> {
    let mut full = vec![cmd];
    full.extend(args.iter().map(String::as_str));
    let out = flowdepth(&full);
    assert!(out.status.success(), "{cmd} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout)
        .unwrap()
        .lines()
        .filter_map(|l| l.split_once(' '))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}

fn gen(dir: &Path, extra: &[&str]) {
    let mut args = vec!["--out".to_string(), dir.display().to_string(), "--sequences".into(), "2".into()];
    args.extend(small_args(extra));
    let report = run("gen", &args);
    assert_eq!(report["sequences"], "2");
    assert_eq!(report["frames"], "4");
}

fn num(report: &BTreeMap<String, String>, key: &str) -> f64 {
    report[key].parse().unwrap()
}

#[test]
fn ground_truth_predictions_score_perfectly() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    gen(&data, &[]);
    let d = data.display().to_string();
    let report = run("eval", &["--data".into(), d.clone(), "--pred".into(), d]);
    assert_eq!(report["frames"], "8");
    assert_eq!(num(&report, "abs_rel"), 0.0);
    assert_eq!(num(&report, "rmse"), 0.0);
    assert_eq!(num(&report, "delta1"), 1.0);
}

#[test]
fn static_camera_has_zero_temporal_difference() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    gen(&data, &["scene.camera_speed=0"]);
    let d = data.display().to_string();
    let report = run("tdt", &["--data".into(), d.clone(), "--pred".into(), d]);
    assert!(report.keys().all(|k| k.starts_with("tdt")), "{report:?}");
    assert_eq!(num(&report, "tdt"), 0.0);
    assert_eq!(num(&report, "tdt_lt1"), 1.0);
    assert_eq!(report["tdt_frames"], "6");
}

#[test]
fn seeded_training_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    gen(&data, &[]);
    let mut reports = Vec::new();
    let mut checkpoints = Vec::new();
    for run_id in 0..2 {
        let ck = dir.path().join(format!("model{run_id}.ck"));
        let mut args = vec![
            "--data".to_string(),
            data.display().to_string(),
            "--out".into(),
            ck.display().to_string(),
            "--steps".into(),
            "3".into(),
            "--log-every".into(),
            "0".into(),
            "--seed".into(),
            "5".into(),
        ];
        args.extend(small_args(&["train.window=3"]));
        reports.push(run("train", &args));
        checkpoints.push(std::fs::read(&ck).unwrap());
    }
    assert_eq!(reports[0], reports[1]);
    assert_eq!(checkpoints[0], checkpoints[1]);
    assert_eq!(reports[0]["steps"], "3");
    assert_eq!(reports[0]["memory"], "flow-guided");

    let ck = dir.path().join("model0.ck").display().to_string();
    let evals: Vec<_> = (0..2)
        .map(|_| run("eval", &["--data".into(), data.display().to_string(), "--checkpoint".into(), ck.clone()]))
        .collect();
    assert_eq!(evals[0], evals[1]);
    assert!(num(&evals[0], "abs_rel").is_finite());

    let out = dir.path().join("demo");
    let seq = data.join("seq_0000");
    let report = run(
        "demo",
        &["--checkpoint".into(), ck, "--sequence".into(), seq.display().to_string(), "--out".into(), out.display().to_string()],
    );
    assert_eq!(report["frames"], "4");
    for t in 0..4 {
        assert!(out.join(format!("depth_{t:03}.pfm")).is_file());
        assert!(out.join(format!("depth_{t:03}.ppm")).is_file());
    }
}

#[test]
fn data_directory_falls_back_to_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    gen(&data, &[]);
    let out = Command::new(env!("CARGO_BIN_EXE_flowdepth"))
        .args(["eval", "--pred", &data.display().to_string()])
        .env("FLOWDEPTH_DATA", &data)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn gradient_checks_pass() {
    let out = flowdepth(&["gradcheck", "--samples", "4"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.lines().any(|l| l == "failed 0"));
}

#[test]
fn bad_invocations_fail() {
    assert!(!flowdepth(&["gen", "--bogus"]).status.success());
    assert!(!flowdepth(&["eval", "--data", "/nonexistent", "--pred", "/nonexistent"]).status.success());
    let dir = tempfile::tempdir().unwrap();
    let missing = flowdepth(&["eval", "--data", &dir.path().display().to_string(), "--pred", "x"]);
    assert!(!missing.status.success());
    assert!(String::from_utf8_lossy(&missing.stderr).starts_with("error:"));
    let both = flowdepth(&["eval", "--data", "x", "--pred", "x", "--checkpoint", "y"]);
    assert!(!both.status.success());
    let bad_key = flowdepth(&["gen", "--out", "x", "--set", "model.nope=1"]);
    assert!(!bad_key.status.success());
    assert!(String::from_utf8_lossy(&bad_key.stderr).contains("model.nope"));
}
