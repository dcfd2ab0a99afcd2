use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn rfold(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rfold")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gen_trace_default_config() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.jsonl");
    let b = dir.path().join("b.jsonl");
    for out in [&a, &b] {
        let o = rfold(&["gen-trace", "--seed", "1", "--out", path(out)]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let text = fs::read_to_string(&a).unwrap();
    assert_eq!(text.lines().count(), 500);
    assert_eq!(text, fs::read_to_string(&b).unwrap());
}

#[test]
fn gen_trace_reads_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("gen.toml");
    fs::write(&cfg, "job_count = 7\nseed = 3\n[inter_arrival]\nkind = \"constant\"\nvalue = 10.0\n").unwrap();
    let o = rfold(&["gen-trace", "--config", path(&cfg), "--jobs", "4"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let lines: Vec<String> = stdout(&o).lines().map(String::from).collect();
    assert_eq!(lines.len(), 4);
    assert!(lines[1].contains("\"arrival_s\":10.0"), "{}", lines[1]);
}

#[test]
fn invalid_probability_table_names_the_field() {
    let o = rfold(&["gen-trace", "--large-dims", "0.2,0.2,0.2"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("large_dims"), "{}", stderr(&o));
}

#[test]
fn run_single_job_trace() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("t.jsonl");
    fs::write(&trace, "{\"id\":\"a\",\"arrival_s\":0,\"duration_s\":5,\"shape\":[4,6,1]}\n").unwrap();
    let out = dir.path().join("out");
    let o = rfold(&["run", "--trace", path(&trace), "--policy", "rfold", "--cube-size", "4", "--cube-count", "64", "-o", path(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("jcr=1.0000"), "{}", stdout(&o));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["jcr"], 1.0);
    assert_eq!(report["config"]["policy"], "rfold");
    let csv = fs::read_to_string(out.join("jobs.csv")).unwrap();
    assert!(csv.starts_with("id,status,arrival_s,start_s,finish_s,mode,cubes_used,circuits_used"));
    assert_eq!(csv.lines().count(), 2);
}

#[test]
fn run_generated_trace_embeds_config() {
    let dir = tempfile::tempdir().unwrap();
    let o = rfold(&["run", "--policy", "folding", "--jobs", "10", "--seed", "4", "-o", path(dir.path())]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(report["seed"], 4);
    assert_eq!(report["config"]["workload"]["job_count"], 10);
}

#[test]
fn run_rejects_incompatible_policy() {
    let o = rfold(&["run", "--policy", "firstfit", "--cube-size", "4", "--jobs", "1"]);
    assert_eq!(o.status.code(), Some(1));
    let o = rfold(&["run", "--policy", "reconfig", "--static", "16x16x16", "--jobs", "1"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn run_empty_trace_is_flagged() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("empty.jsonl");
    fs::write(&trace, "").unwrap();
    let o = rfold(&["run", "--trace", path(&trace), "--policy", "reconfig", "-o", path(&dir.path().join("out"))]);
    assert!(o.status.success(), "{}", stderr(&o));
    let line = stdout(&o);
    assert!(line.contains("jobs=0") && line.contains("jcr=1.0000") && line.contains("empty_trace=true"), "{line}");
}

#[test]
fn oracle_examples() {
    let o = rfold(&["oracle", "--shape", "1,6,4", "--target", "4x2x3", "--wrap", "x"]);
    assert!(o.status.success());
    assert_eq!(stdout(&o).trim(), "true");
    let o = rfold(&["oracle", "--shape", "1x8x3", "--target", "1x4x6", "--wrap", "z", "--mode", "ring"]);
    assert_eq!(stdout(&o).trim(), "false");
    let o = rfold(&["oracle", "--shape", "5x5x5", "--target", "5x5x5"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("refused"), "{}", stderr(&o));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(rfold(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(rfold(&["run", "--policy", "best"]).status.code(), Some(1));
    assert_eq!(rfold(&["oracle", "--shape", "0x1", "--target", "1"]).status.code(), Some(1));
    assert!(rfold(&["--help"]).status.success());
}

fn small_sweep(dir: &Path) -> String {
    let cfg = dir.join("sweep.toml");
    fs::write(
        &cfg,
        r#"trials = 2
base_seed = 5

[gen]
job_count = 25

[[cells]]
policy = "folding"
spec = { cube_count = 1, cube_size = 16, static_extents = [16, 16, 16] }

[[cells]]
policy = "rfold"
spec = { cube_count = 64, cube_size = 4 }
"#,
    )
    .unwrap();
    cfg.to_str().unwrap().to_string()
}

#[test]
fn sweep_writes_deterministic_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_sweep(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = rfold(&["sweep", "--config", &cfg, "--out", path(out)]);
        assert!(o.status.success(), "{}", stderr(&o));
        assert!(stdout(&o).contains("RFold(4^3)"));
    }
    let jcr = fs::read_to_string(a.join("jcr.csv")).unwrap();
    assert!(jcr.starts_with("cell,policy,cube,metric,value\n"));
    assert_eq!(jcr.lines().count(), 1 + 2);
    assert_eq!(fs::read_to_string(a.join("jct.csv")).unwrap().lines().count(), 1 + 2 * 3);
    assert_eq!(fs::read_to_string(a.join("trials.csv")).unwrap().lines().count(), 1 + 2 * 2);
    assert_eq!(fs::read_to_string(a.join("utilization_cdf_rfold_64x4.csv")).unwrap().lines().count(), 1 + 101);
    for name in ["jcr.csv", "jct.csv", "utilization.csv", "trials.csv", "jct.svg", "utilization_cdf.svg", "utilization_cdf_folding_16x16x16.csv"] {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{name}");
    }
}

#[test]
fn sweep_rejects_bad_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[[cells]]\npolicy = \"firstfit\"\nspec = { cube_count = 64, cube_size = 4 }\n").unwrap();
    let o = rfold(&["sweep", "--config", path(&cfg), "--out", path(dir.path())]);
    assert_eq!(o.status.code(), Some(1));
}
