use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn gdi(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gdi")).args(args).env_remove("GDI_SEED").output().expect("binary runs")
}

fn tiny_config(dir: &Path, extra: &str) -> String {
    let path = dir.join("tiny.json");
    let body = format!(
        r#"{{"total_frames": 1000, "max_episode_steps": 30, "actors": 2, "batch_size": 4, "segment_length": 8{extra}}}"#
    );
    fs::write(&path, body).unwrap();
    path.to_str().unwrap().to_string()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn train_writes_log_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "");
    let out = dir.path().join("run");
    let o = gdi(&["train", "--config", &cfg, "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let log = fs::read_to_string(out.join("training_log.csv")).unwrap();
    let mut lines = log.lines();
    assert_eq!(
        lines.next().unwrap(),
        "frame,episode,actor_id,param_version,inv_tau1,inv_tau2,epsilon,return_raw,return_shaped,coverage"
    );
    assert!(lines.count() >= 1);
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["frames"], 1000);
    assert!(summary["coverage"].as_f64().unwrap() > 0.0);
}

#[test]
fn train_is_deterministic_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "");
    let run = |name: &str, seed: &str| {
        let out = dir.path().join(name);
        assert!(gdi(&["train", "--config", &cfg, "--seed", seed, "--out", s(&out)]).status.success());
        fs::read(out.join("training_log.csv")).unwrap()
    };
    assert_eq!(run("a", "4"), run("b", "4"));
    assert_ne!(run("c", "4"), run("d", "5"));
}

#[test]
fn seed_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "");
    let out_env = dir.path().join("env");
    let o = Command::new(env!("CARGO_BIN_EXE_gdi"))
        .args(["train", "--config", &cfg, "--out", s(&out_env)])
        .env("GDI_SEED", "11")
        .output()
        .unwrap();
    assert!(o.status.success());
    let out_flag = dir.path().join("flag");
    assert!(gdi(&["train", "--config", &cfg, "--seed", "11", "--out", s(&out_flag)]).status.success());
    assert_eq!(fs::read(out_env.join("training_log.csv")).unwrap(), fs::read(out_flag.join("training_log.csv")).unwrap());
}

#[test]
fn heterogeneous_run_records_two_loss_streams() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "");
    let out = dir.path().join("h3");
    assert!(gdi(&["train", "--config", &cfg, "--mode", "gdi_h3", "--out", s(&out)]).status.success());
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["heads"], 2);
    assert_eq!(summary["final_losses"].as_array().unwrap().len(), 2);
    let losses = fs::read_to_string(out.join("losses.csv")).unwrap();
    assert!(losses.lines().skip(1).any(|l| l.split(',').nth(3) == Some("1")));
}

#[test]
fn ablate_normalizes_by_i3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), r#", "seeds": [2]"#);
    let out = dir.path().join("ab");
    let o = gdi(&["ablate", "--config", &cfg, "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(out.join("ablation.csv")).unwrap();
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows.len(), 4);
    assert!(rows[1].starts_with("gdi_i3,"));
    let norm = rows[1].split(',').nth(4).unwrap();
    assert!(norm == "1" || norm == "NA", "{norm}");
}

#[test]
fn verify_theory_passes_and_catches_a_bad_coupling() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("theory");
    let o = gdi(&["verify-theory", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stdout));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("theory.json")).unwrap()).unwrap();
    assert!(report["max_marginal_residual"].as_f64().unwrap() < 1e-9);
    assert_eq!(report["passed"], true);

    let bad = gdi(&["verify-theory", "--inject-faulty-coupling", "--out", s(&dir.path().join("bad"))]);
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn metrics_on_bundled_table() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("m");
    assert!(gdi(&["metrics", "--bundled", "gdi-h3", "--out", s(&out)]).status.success());
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("metrics_summary.json")).unwrap()).unwrap();
    let rel = |k: &str, want: f64| (summary[k].as_f64().unwrap() - want).abs() / want;
    assert!(rel("mean_hns", 9620.33) < 0.005);
    assert!(rel("median_hns", 1146.39) < 0.005);
    let csv = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert!(csv.starts_with("game,hns,hwrns,saber\nAlien,703.00,"));
}

#[test]
fn metrics_rejects_malformed_tables() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.csv");
    fs::write(&bad, "game,random,human_avg,hwr,score\nA,0,10,100,1\nA,0,10,100,2\n").unwrap();
    let o = gdi(&["metrics", "--scores", s(&bad), "--out", s(&dir.path().join("m"))]);
    assert_eq!(o.status.code(), Some(1));
    let empty = dir.path().join("empty.csv");
    fs::write(&empty, "").unwrap();
    assert_eq!(gdi(&["metrics", "--scores", s(&empty), "--out", s(&dir.path().join("m"))]).status.code(), Some(1));
}

#[test]
fn report_merges_run_summaries() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "");
    let run = dir.path().join("r1");
    assert!(gdi(&["train", "--config", &cfg, "--out", s(&run)]).status.success());
    let out = dir.path().join("rep");
    assert!(gdi(&["report", "--run", s(&run), "--out", s(&out)]).status.success());
    let merged: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    let single: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("summary.json")).unwrap()).unwrap();
    assert_eq!(merged[0], single);
    assert_eq!(fs::read_to_string(out.join("report.csv")).unwrap().lines().count(), 2);

    assert_eq!(gdi(&["report", "--out", s(&out)]).status.code(), Some(1));
}

#[test]
fn bad_invocations_exit_with_validation_code() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(gdi(&["frobnicate"]).status.code(), Some(1));
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, r#"{"d_push": 0}"#).unwrap();
    assert_eq!(gdi(&["train", "--config", s(&cfg), "--out", s(&dir.path().join("o"))]).status.code(), Some(1));
    let missing = dir.path().join("missing.json");
    assert_eq!(gdi(&["train", "--config", s(&missing), "--out", s(&dir.path().join("o"))]).status.code(), Some(2));
}
