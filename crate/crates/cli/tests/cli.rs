use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_hetdistill"));
    c.env("HETDISTILL_THREADS", "1");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn tiny_config(dir: &Path) -> String {
    let p = dir.join("tiny.toml");
    std::fs::write(
        &p,
        "[data]\ncount = 12\nval_count = 4\n\n[train]\nteacher_epochs = 1\ndistill_epochs = 1\nppo_epochs = 1\n\
         ppo_iterations_per_epoch = 1\nppo_scenarios = 2\n\n[curriculum]\nstages = 1\nfisher_samples = 2\n\n\
         [ppo]\nenvs = 2\nrollout_len = 16\nminibatch = 8\n",
    )
    .unwrap();
    p.to_string_lossy().into_owned()
}

#[test]
fn unknown_profile_exits_2_and_lists_profiles() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("s.jsonl");
    let o = run(&["generate", "--profile", "rush-hour", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let e = stderr(&o);
    assert!(e.contains("lane-keep") && e.contains("dense-merge"), "{e}");
}

#[test]
fn bad_thread_count_exits_2() {
    let o = bin().env("HETDISTILL_THREADS", "zero").args(["profile", "--what", "module-latency"]).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn unknown_flag_exits_2() {
    assert_eq!(run(&["train", "--bogus"]).status.code(), Some(2));
}

#[test]
fn distill_without_teacher_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("run");
    let o = run(&["train", "--phase", "distill", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("teacher.ckpt"));
}

#[test]
fn malformed_data_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("bad.jsonl");
    std::fs::write(&data, "{\"id\": 1\n").unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("run");
    let o = run(&["train", "--phase", "teacher", "--config", &cfg, "--out", out.to_str().unwrap(), "--data", data.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("line 1"));
}

#[test]
fn generate_train_eval() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let data = dir.path().join("s.jsonl");
    let o = run(&["generate", "--seed", "4", "--count", "6", "--profile", "left-LC", "--out", data.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(std::fs::read_to_string(&data).unwrap().lines().count(), 6);

    let out = dir.path().join("run");
    let o = run(&["train", "--config", &cfg, "--out", out.to_str().unwrap(), "--set", "train.seed=3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(std::fs::read_to_string(out.join("config.toml")).unwrap().contains("seed = 3"));

    let report = dir.path().join("report");
    let model = out.join("student.ckpt");
    let o = run(&["eval", "--model", model.to_str().unwrap(), "--data", data.to_str().unwrap(), "--report", report.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(report.with_extension("json")).unwrap()).unwrap();
    assert_eq!(json["count"], 6);
    assert!(json["min_ade"].as_f64().unwrap().is_finite());
    assert!(std::fs::read_to_string(report.with_extension("csv")).unwrap().lines().count() >= 2);
}

#[test]
fn profile_scan_vs_attention_rows() {
    let o = run(&["profile", "--what", "scan-vs-attn", "--reps", "1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    assert_eq!(text.lines().count(), 5, "{text}");
}

#[test]
fn unknown_profile_target_exits_2() {
    assert_eq!(run(&["profile", "--what", "everything"]).status.code(), Some(2));
}

#[test]
fn generate_is_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let files: Vec<Vec<u8>> = (0..2)
        .map(|i| {
            let out = dir.path().join(format!("s{i}.jsonl"));
            let o = run(&["generate", "--seed", "7", "--count", "20", "--profile", "mixed", "--out", out.to_str().unwrap()]);
            assert!(o.status.success(), "{}", stderr(&o));
            std::fs::read(out).unwrap()
        })
        .collect();
    assert_eq!(files[0], files[1]);
}
