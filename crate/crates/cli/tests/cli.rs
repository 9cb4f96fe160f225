use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use hybrid_ps::orchestrator::{COMPARISON_CSV_HEADER, METRICS_CSV_HEADER};
use serde_json::Value;

const SMOKE: &str = r#"
[data]
samples = 2000
vocab = 500

[train]
batch_size = 16
eval_every = 10
checkpoint_every = 20
"#;

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hybrid-ps")).args(args).output().unwrap()
}

fn smoke_config(dir: &Path) -> String {
    let p = dir.join("smoke.toml");
    fs::write(&p, SMOKE).unwrap();
    p.to_str().unwrap().to_string()
}

/// Report without the fields that depend on wall clock or thread
/// scheduling (throughput, phase times, loader retry count).
fn untimed(path: &Path) -> Value {
    let mut v: Value = serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap();
    let m = v["metrics"].as_object_mut().unwrap();
    for k in ["samples_per_sec", "step_samples_per_sec", "phases"] {
        m.remove(k);
    }
    m["dispatch"].as_object_mut().unwrap().remove("backpressure_retries");
    v
}

#[test]
fn csv_headers_match_golden_files() {
    let golden = |name: &str| fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)).unwrap();
    assert_eq!(golden("metrics_header.csv").trim_end(), METRICS_CSV_HEADER);
    assert_eq!(golden("comparison_header.csv").trim_end(), COMPARISON_CSV_HEADER);
}

#[test]
fn train_writes_metrics_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke_config(dir.path());
    let out = dir.path().join("run");
    let o = bin(&["train", "--config", &cfg, "--out", out.to_str().unwrap(), "--set", "train.mode=sync"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(out.join("metrics.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some(METRICS_CSV_HEADER));
    let rows: Vec<&str> = lines.collect();
    assert!(!rows.is_empty());
    assert!(rows.iter().all(|r| r.split(',').count() == 6));
    let report = untimed(&out.join("report.json"));
    assert_eq!(report["config"]["train"]["mode"], "sync");
    assert_eq!(report["config"]["data"]["samples"], 2000);
}

#[test]
fn checkpoint_files_load_back() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke_config(dir.path());
    let ck = dir.path().join("ck");
    let o = bin(&[
        "train", "--config", &cfg, "--out", dir.path().join("run").to_str().unwrap(),
        "--checkpoint-dir", ck.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let files: Vec<_> = fs::read_dir(&ck).unwrap().map(|e| e.unwrap().path()).collect();
    // Default cluster: 2 nodes of 4 shards.
    assert_eq!(files.len(), 8);
    for f in files {
        assert_eq!(f.extension().unwrap(), "hps");
        hybrid_ps::ps::checkpoint::load_checkpoint(&mut fs::File::open(&f).unwrap()).unwrap();
    }
}

#[test]
fn identical_runs_give_identical_reports() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke_config(dir.path());
    let mut reports = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        let o = bin(&["train", "--config", &cfg, "--out", out.to_str().unwrap()]);
        assert!(o.status.success());
        reports.push(untimed(&out.join("report.json")));
    }
    assert_eq!(reports[0], reports[1]);
}

#[test]
fn config_errors_exit_2_with_a_line_number() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.toml");
    fs::write(&p, "[train]\nbatch_size = 8\nbatchsize = 9\n").unwrap();
    let o = bin(&["train", "--config", p.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("line 3"), "{err}");

    let o = bin(&["train", "--set", "train.mode=fast", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let o = bin(&["train", "--faults", "gpu@3", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn run_failures_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke_config(dir.path());
    let out = dir.path().join("x");
    let o = bin(&["train", "--config", &cfg, "--out", out.to_str().unwrap(), "--faults", "nn_worker@step=2"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("unrecoverable"));
}

#[test]
fn compare_writes_three_rows() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke_config(dir.path());
    let out = dir.path().join("cmp");
    let o = bin(&["compare", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(out.join("comparison.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], COMPARISON_CSV_HEADER);
    let modes: Vec<&str> = lines[1..4].iter().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(modes, ["sync", "hybrid_opt", "async"]);
    assert!(lines.iter().any(|l| l.starts_with("# gap_ordering,")));
    assert!(lines.iter().any(|l| l.starts_with("# throughput_ordering,")));
}

#[test]
fn compare_flags_partial_results() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke_config(dir.path());
    let out = dir.path().join("cmp");
    let o = bin(&["compare", "--config", &cfg, "--out", out.to_str().unwrap(), "--faults", "embedding_ps@step=3"]);
    assert_eq!(o.status.code(), Some(3));
    let csv = fs::read_to_string(out.join("comparison.csv")).unwrap();
    assert!(csv.contains("failed: "));
    assert!(csv.contains("# partial"));
}

#[test]
fn embedding_worker_drill_runs_from_the_flag() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke_config(dir.path());
    let out = dir.path().join("drill");
    let o = bin(&["train", "--config", &cfg, "--out", out.to_str().unwrap(), "--faults", "embedding_worker@step=12"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let r = untimed(&out.join("report.json"));
    let m = &r["metrics"];
    assert_eq!(m["faults"][0]["fault"], "embedding_worker:0@12");
    let (reg, trained, dropped) = (
        m["registered"].as_u64().unwrap(),
        m["trained"].as_u64().unwrap(),
        m["drops"]["buffer_dropped"].as_u64().unwrap(),
    );
    assert_eq!(reg, trained + dropped);
}

#[test]
fn benches_and_gen_data() {
    let o = bin(&["bench-lru", "--capacity", "256", "--ops", "20000"]);
    assert!(o.status.success());
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["grow_events_after_warmup"], 0);

    let o = bin(&["bench-codec", "--batches", "4", "--batch-size", "2048"]);
    assert!(o.status.success());
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(v["index_ratio"].as_f64().unwrap() > 1.0);

    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("ds.bin");
    let o = bin(&["gen-data", "--set", "data.samples=300", "--out", file.to_str().unwrap()]);
    assert!(o.status.success());
    let ds = hybrid_ps::data::load_dataset(fs::File::open(&file).unwrap()).unwrap();
    assert_eq!(ds.len(), 300);
}
