use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn kpf(args: &[&str], out_dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kpf")).args(args).arg("--out-dir").arg(out_dir).output().expect("spawn kpf")
}

fn ok(out: Output) -> Output {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn path(dir: &Path, name: &str) -> String {
    dir.join(name).to_str().unwrap().to_string()
}

fn simulate(dir: &Path, seed: &str) {
    ok(kpf(&["simulate", "--seed", seed, "--scenes", "2"], dir));
}

#[test]
fn full_pipeline_writes_every_output() {
    let d = tempfile::tempdir().unwrap();
    let dir = d.path();
    simulate(dir, "3");
    ok(kpf(&["fuse", "--runs", &path(dir, "runs.jsonl")], dir));
    ok(kpf(&["group", "--parts", &path(dir, "fused.jsonl")], dir));
    ok(kpf(&["match", "--parts", &path(dir, "fused.jsonl"), "--truth", &path(dir, "truth.jsonl")], dir));
    ok(kpf(&["eval", "--parts", &path(dir, "fused.jsonl"), "--truth", &path(dir, "truth.jsonl")], dir));
    ok(kpf(&["report", &path(dir, "report.json"), &path(dir, "report.json")], dir));

    let matches = fs::read_to_string(dir.join("matches.csv")).unwrap();
    let header = matches.lines().next().unwrap();
    assert!(header.starts_with("scene,truth_id,pred_id,cost,corner,rotation,occupancy"));
    assert!(matches.lines().count() > 1);

    let map = fs::read_to_string(dir.join("map.csv")).unwrap();
    assert_eq!(map.lines().next().unwrap(), "metric,threshold,ap,precision,recall,tp,fp,fn");
    assert_eq!(map.lines().count(), 1 + 5 + 2 + 2 + 2);

    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["n_scenes"], 2);
    assert!(report["metadata"]["fscore_tol_fraction"].is_number());

    let agg = fs::read_to_string(dir.join("aggregate.csv")).unwrap();
    assert_eq!(agg.lines().filter(|l| l.starts_with("mean,")).count(), 11);
}

#[test]
fn every_pipeline_name_is_accepted() {
    let d = tempfile::tempdir().unwrap();
    simulate(d.path(), "1");
    for p in ["nms-only", "oversampled", "fused-box-iou", "kpf"] {
        ok(kpf(&["fuse", "--runs", &path(d.path(), "runs.jsonl"), "--pipeline", p], d.path()));
    }
    let out = kpf(&["fuse", "--runs", &path(d.path(), "runs.jsonl"), "--pipeline", "wbf"], d.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_input_is_an_io_error() {
    let d = tempfile::tempdir().unwrap();
    let out = kpf(&["fuse", "--runs", &path(d.path(), "nope.jsonl")], d.path());
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.jsonl"));
}

#[test]
fn invalid_config_is_a_validation_error() {
    let d = tempfile::tempdir().unwrap();
    let cfg = d.path().join("gen.toml");
    fs::write(&cfg, "n_instances = 9\n").unwrap();
    let out = kpf(&["simulate", "--config", cfg.to_str().unwrap()], d.path());
    assert_eq!(out.status.code(), Some(2));

    fs::write(&cfg, "no_such_field = 1\n").unwrap();
    let out = kpf(&["simulate", "--config", cfg.to_str().unwrap()], d.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn malformed_records_are_validation_errors() {
    let d = tempfile::tempdir().unwrap();
    let runs = d.path().join("runs.jsonl");
    fs::write(&runs, "{\"scene\": 0}\n").unwrap();
    let out = kpf(&["fuse", "--runs", runs.to_str().unwrap()], d.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains(":1:"));
}

#[test]
fn run_index_beyond_n_q_is_rejected() {
    let d = tempfile::tempdir().unwrap();
    simulate(d.path(), "2");
    let cfg = d.path().join("kpf.json");
    fs::write(&cfg, r#"{"n_q": 4}"#).unwrap();
    let out = kpf(&["fuse", "--config", cfg.to_str().unwrap(), "--runs", &path(d.path(), "runs.jsonl")], d.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn json_and_toml_configs_agree() {
    let d = tempfile::tempdir().unwrap();
    let (a, b) = (d.path().join("a"), d.path().join("b"));
    fs::write(d.path().join("g.toml"), "n_instances = 2\nfp_rate = 0.0\n").unwrap();
    fs::write(d.path().join("g.json"), r#"{"n_instances": 2, "fp_rate": 0.0}"#).unwrap();
    ok(kpf(&["simulate", "--config", &path(d.path(), "g.toml")], &a));
    ok(kpf(&["simulate", "--config", &path(d.path(), "g.json")], &b));
    assert_eq!(fs::read(a.join("runs.jsonl")).unwrap(), fs::read(b.join("runs.jsonl")).unwrap());
}

#[test]
fn seed_changes_the_scene() {
    let d = tempfile::tempdir().unwrap();
    let (a, b) = (d.path().join("a"), d.path().join("b"));
    ok(kpf(&["simulate", "--seed", "0"], &a));
    ok(kpf(&["simulate", "--seed", "1"], &b));
    assert_ne!(fs::read(a.join("truth.jsonl")).unwrap(), fs::read(b.join("truth.jsonl")).unwrap());
}

#[test]
fn bad_arguments_exit_with_two() {
    let d = tempfile::tempdir().unwrap();
    let out = kpf(&["simulate", "--scenes", "many"], d.path());
    assert_eq!(out.status.code(), Some(2));
}
