use hetdistill::checkpoint;
use hetdistill::config::RunConfig;
use hetdistill::params::ParamLabel;
use hetdistill::pipeline::{build_student, evaluate_model, load_model, Phase, Run, DISTILLED_CKPT, STUDENT_CKPT, TEACHER_CKPT};
use hetdistill::scene::{generate_synthetic, save_scenarios};
use hetdistill::train::prepare;
use hetdistill::CoreError;

fn tiny() -> RunConfig {
    RunConfig::from_toml(
        "",
        &[
            "data.count=16".into(),
            "data.val_count=6".into(),
            "train.teacher_epochs=1".into(),
            "train.distill_epochs=2".into(),
            "train.ppo_epochs=1".into(),
            "train.ppo_iterations_per_epoch=1".into(),
            "train.ppo_scenarios=2".into(),
            "curriculum.stages=2".into(),
            "curriculum.fisher_samples=2".into(),
            "ppo.envs=2".into(),
            "ppo.rollout_len=16".into(),
            "ppo.minibatch=8".into(),
        ],
    )
    .unwrap()
}

#[test]
fn phase_names() {
    for (s, p) in [("teacher", Phase::Teacher), ("distill", Phase::Distill), ("ppo", Phase::Ppo), ("all", Phase::All)] {
        assert_eq!(s.parse::<Phase>().unwrap(), p);
    }
    assert!(matches!("warmup".parse::<Phase>(), Err(CoreError::Config(_))));
}

#[test]
fn overrides_are_checked() {
    assert!(RunConfig::from_toml("", &["train.nope=1".into()]).is_err());
    assert!(RunConfig::from_toml("", &["curriculum.stages=0".into()]).is_err());
    let c = RunConfig::from_toml("", &["train.seed=9".into()]).unwrap();
    assert_eq!(c.train.seed, 9);
    let back = RunConfig::from_toml(&c.to_toml(), &[]).unwrap();
    assert_eq!(back.to_toml(), c.to_toml());
}

#[test]
fn later_phases_need_earlier_checkpoints() {
    let cfg = tiny();
    let dir = tempfile::tempdir().unwrap();
    let run = Run { cfg: &cfg, out: dir.path().to_path_buf(), data: None };
    assert!(matches!(run.execute(Phase::Distill), Err(CoreError::Config(_))));
    run.execute(Phase::Teacher).unwrap();
    assert!(matches!(run.execute(Phase::Ppo), Err(CoreError::Config(_))));
}

#[test]
fn full_pipeline_then_resume_and_evaluate() {
    let cfg = tiny();
    let dir = tempfile::tempdir().unwrap();
    let run = Run { cfg: &cfg, out: dir.path().to_path_buf(), data: None };
    let first = run.execute(Phase::All).unwrap();
    assert!(!first.teacher_skipped);
    for f in [TEACHER_CKPT, DISTILLED_CKPT, STUDENT_CKPT, "distill_log.csv", "curriculum.jsonl", "ppo_log.csv", "summary.json"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    assert_eq!(first.stages.len(), 2);
    assert!(first.compression_ratio > 1.0);

    let teacher_bytes = std::fs::read(dir.path().join(TEACHER_CKPT)).unwrap();
    let second = run.execute(Phase::All).unwrap();
    assert!(second.teacher_skipped);
    assert_eq!(teacher_bytes, std::fs::read(dir.path().join(TEACHER_CKPT)).unwrap());

    let (kind, loaded_cfg, _) = load_model(&dir.path().join(STUDENT_CKPT)).unwrap();
    assert_eq!(kind, "student");
    assert_eq!(loaded_cfg.to_toml(), cfg.to_toml());
    let set = generate_synthetic(77, 5, "mixed", &cfg.data).unwrap();
    let report = evaluate_model(&dir.path().join(STUDENT_CKPT), &prepare(&set, &cfg.data)).unwrap();
    assert_eq!(report.count, 5);
    assert!(report.min_ade.is_finite() && report.min_ade >= 0.0);
    assert!(report.params.contains_key("lora"));
}

#[test]
fn scenario_file_input() {
    let cfg = tiny();
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("s.jsonl");
    save_scenarios(&generate_synthetic(3, 12, "cut-in", &cfg.data).unwrap(), &data).unwrap();
    let run = Run { cfg: &cfg, out: dir.path().join("out"), data: Some(data) };
    let s = run.execute(Phase::Teacher).unwrap();
    assert_eq!(s.teacher_log.len(), 1);
}

#[test]
fn checkpoint_roundtrip_and_corruption() {
    let cfg = tiny();
    let store = build_student(&cfg).init(4);
    let bytes = checkpoint::encode("student", &store, serde_json::json!({ "k": 1 })).unwrap();
    let (header, back) = checkpoint::decode(&bytes).unwrap();
    assert_eq!(header.kind, "student");
    assert_eq!(back.count(|_| true), store.count(|_| true));
    assert_eq!(back.count(|l| l == ParamLabel::Lora), store.count(|l| l == ParamLabel::Lora));
    let mut rounded = store.clone();
    checkpoint::round_to_f32(&mut rounded);
    assert_eq!(back.digest(|_| true), rounded.digest(|_| true));

    assert!(checkpoint::decode(&bytes[..bytes.len() / 2]).is_err());
    let mut bad = bytes.clone();
    bad[0] ^= 0xFF;
    assert!(checkpoint::decode(&bad).is_err());
}
