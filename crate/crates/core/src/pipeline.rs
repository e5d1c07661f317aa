//! End-to-end runs: data, phases, checkpoints and log files in one output
//! directory.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Serialize;

use crate::checkpoint;
use crate::config::RunConfig;
use crate::error::{CoreError, Result};
use crate::io::write_atomic;
use crate::metrics::MetricsReport;
use crate::params::{ParamLabel, ParamStore};
use crate::rl::{collect_episodes, PpoLogRow, StudentPolicy};
use crate::scene::{generate_synthetic, load_scenarios, Sample, ScenarioSet};
use crate::sim::{near_collision_suite, summarize, RolloutSummary};
use crate::student::{is_student_param, Student};
use crate::teacher::Teacher;
use crate::train::{
    evaluate_with, prepare, run_curriculum, run_ppo_phase, student_forecast, teacher_forecast, teacher_targets, train_teacher,
    CurriculumData, DistillInputs, DistillLogRow, Distiller, StageEvent, TeacherLogRow,
};

pub const TEACHER_CKPT: &str = "teacher.ckpt";
pub const DISTILLED_CKPT: &str = "student_distilled.ckpt";
pub const STUDENT_CKPT: &str = "student.ckpt";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Teacher,
    Distill,
    Ppo,
    All,
}

impl FromStr for Phase {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "teacher" => Phase::Teacher,
            "distill" => Phase::Distill,
            "ppo" => Phase::Ppo,
            "all" => Phase::All,
            _ => return Err(CoreError::Config(format!("unknown phase `{s}` (expected teacher, distill, ppo or all)"))),
        })
    }
}

pub struct Datasets {
    pub train: ScenarioSet,
    pub val: ScenarioSet,
}

/// Loads `path` and holds out the last `val_count` scenarios, or generates
/// both splits from the data section of `cfg`.
pub fn datasets(cfg: &RunConfig, path: Option<&Path>) -> Result<Datasets> {
    let d = &cfg.data;
    match path {
        Some(p) => {
            let mut all = load_scenarios(p, d)?;
            let n = all.scenarios.len();
            let v = d.val_count.min(n / 2).max(1);
            if n < 2 {
                return Err(CoreError::Config(format!("{}: need at least 2 scenarios, found {n}", p.display())));
            }
            let val = all.scenarios.split_off(n - v);
            Ok(Datasets { train: all, val: ScenarioSet { scenarios: val, seed: None } })
        }
        None => Ok(Datasets {
            train: generate_synthetic(d.seed, d.count, &d.profile, d)?,
            val: generate_synthetic(d.seed.wrapping_add(0x5EED_0001), d.val_count, &d.profile, d)?,
        }),
    }
}

pub fn build_teacher(cfg: &RunConfig) -> Teacher {
    Teacher::new(cfg.teacher.clone(), &cfg.data)
}

pub fn build_student(cfg: &RunConfig) -> Student {
    Student::new(cfg.student.clone(), &cfg.data, cfg.teacher.graph.d_model)
}

fn meta(cfg: &RunConfig, extra: serde_json::Value) -> serde_json::Value {
    serde_json::json!({ "config": cfg.to_toml(), "info": extra })
}

/// Loads a checkpoint and the configuration stored with it.
pub fn load_model(path: &Path) -> Result<(String, RunConfig, ParamStore)> {
    let (h, store) = checkpoint::load(path)?;
    let text = h.meta.get("config").and_then(|v| v.as_str()).ok_or_else(|| CoreError::Checkpoint(format!("{}: no configuration stored", path.display())))?;
    Ok((h.kind, RunConfig::from_toml(text, &[])?, store))
}

fn csv<T>(header: &str, rows: &[T], f: impl Fn(&T) -> String) -> String {
    let mut s = String::from(header);
    s.push('\n');
    for r in rows {
        s += &f(r);
        s.push('\n');
    }
    s
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct RunSummary {
    pub teacher_skipped: bool,
    pub teacher_params: usize,
    pub student_params: usize,
    pub compression_ratio: f64,
    pub teacher_log: Vec<TeacherLogRow>,
    pub distill_log: Vec<DistillLogRow>,
    pub stages: Vec<StageEvent>,
    pub ppo_log: Vec<PpoLogRow>,
    pub ppo_before: Option<RolloutSummary>,
    pub ppo_after: Option<RolloutSummary>,
    pub teacher_metrics: Option<MetricsReport>,
    pub student_metrics: Option<MetricsReport>,
}

pub struct Run<'a> {
    pub cfg: &'a RunConfig,
    pub out: PathBuf,
    pub data: Option<PathBuf>,
}

impl Run<'_> {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn write(&self, name: &str, text: &str) -> Result<()> {
        write_atomic(&self.path(name), text.as_bytes())
    }

    fn require(&self, name: &str, phase: &str) -> Result<PathBuf> {
        let p = self.path(name);
        if !p.exists() {
            return Err(CoreError::Config(format!("phase `{phase}` needs {}; run the earlier phase first", p.display())));
        }
        Ok(p)
    }

    pub fn execute(&self, phase: Phase) -> Result<RunSummary> {
        std::fs::create_dir_all(&self.out)?;
        let cfg = self.cfg;
        self.write("config.toml", &cfg.to_toml())?;
        let sets = datasets(cfg, self.data.as_deref())?;
        let train = prepare(&sets.train, &cfg.data);
        let val = prepare(&sets.val, &cfg.data);
        let teacher = build_teacher(cfg);
        let student = build_student(cfg);
        let mut summary = RunSummary::default();

        let teacher_path = self.path(TEACHER_CKPT);
        if phase == Phase::Teacher || (phase == Phase::All && !teacher_path.exists()) {
            let mut store = teacher.init(cfg.train.seed);
            summary.teacher_log = train_teacher(&teacher, &mut store, &train, &val, &cfg.train)?;
            self.write("teacher_log.csv", &csv(TeacherLogRow::CSV_HEADER, &summary.teacher_log, |r| r.csv_row()))?;
            checkpoint::save(&teacher_path, "teacher", &store, meta(cfg, serde_json::json!({ "epochs": cfg.train.teacher_epochs })))?;
        } else if phase == Phase::All {
            log::info!("found {}; skipping teacher training", teacher_path.display());
            summary.teacher_skipped = true;
        }
        if phase == Phase::Teacher {
            let (_, _, store) = load_model(&teacher_path)?;
            summary.teacher_params = store.count(|_| true);
            summary.teacher_metrics = Some(evaluate_with(&val, cfg.data.dt, |s| teacher_forecast(&teacher, &store, s))?);
            self.finish(&summary)?;
            return Ok(summary);
        }

        let (_, _, teacher_store) = load_model(&self.require(TEACHER_CKPT, "distill")?)?;
        summary.teacher_params = teacher_store.count(|_| true);
        if matches!(phase, Phase::Distill | Phase::All) {
            let mut store = student.init(cfg.train.seed.wrapping_add(1));
            let targets = teacher_targets(&teacher, &teacher_store, &train)?;
            let inputs = DistillInputs { student: &student, samples: &train, targets: &targets, cfg };
            let schedule = cfg.train.distill_epochs.div_ceil(cfg.curriculum.stages).max(1) * cfg.curriculum.stages;
            let mut d = Distiller::new(inputs, &val, schedule);
            let data = CurriculumData { train: &sets.train.scenarios, val: &sets.val.scenarios, val_samples: &val };
            summary.stages = run_curriculum(&mut d, &mut store, &data)?;
            summary.distill_log = d.log;
            self.write("distill_log.csv", &csv(DistillLogRow::CSV_HEADER, &summary.distill_log, |r| r.csv_row()))?;
            let mut events = String::new();
            for e in &summary.stages {
                writeln!(events, "{}", serde_json::to_string(e)?).expect("string write");
            }
            self.write("curriculum.jsonl", &events)?;
            checkpoint::save(&self.path(DISTILLED_CKPT), "student", &store, meta(cfg, serde_json::json!({ "epochs": summary.distill_log.len() })))?;
        }
        if matches!(phase, Phase::Ppo | Phase::All) {
            let (_, _, mut store) = load_model(&self.require(DISTILLED_CKPT, "ppo")?)?;
            let iterations = cfg.train.ppo_epochs * cfg.train.ppo_iterations_per_epoch;
            let report = run_ppo_phase(&student, &mut store, cfg, iterations)?;
            self.write("ppo_log.csv", &csv(PpoLogRow::CSV_HEADER, &report.log, |r| r.csv_row()))?;
            summary.ppo_log = report.log;
            summary.ppo_before = Some(report.before);
            summary.ppo_after = Some(report.after);
            self.rollout_dump(&student, &store)?;
            checkpoint::save(&self.path(STUDENT_CKPT), "student", &store, meta(cfg, serde_json::json!({ "ppo_iterations": iterations })))?;
        }
        let final_path = if phase == Phase::Distill { self.path(DISTILLED_CKPT) } else { self.path(STUDENT_CKPT) };
        let (_, _, store) = load_model(&final_path)?;
        summary.student_params = store.count(is_student_param);
        summary.compression_ratio = summary.teacher_params as f64 / summary.student_params.max(1) as f64;
        summary.teacher_metrics = Some(evaluate_with(&val, cfg.data.dt, |s| teacher_forecast(&teacher, &teacher_store, s))?);
        summary.student_metrics = Some(evaluate_with(&val, cfg.data.dt, |s| student_forecast(&student, &store, s))?);
        self.finish(&summary)?;
        Ok(summary)
    }

    /// Deterministic episodes of the final policy on the refinement suite.
    fn rollout_dump(&self, student: &Student, store: &ParamStore) -> Result<()> {
        let cfg = self.cfg;
        let suite = near_collision_suite(cfg.train.seed ^ 0x5AFE, cfg.train.ppo_scenarios, &cfg.data)?;
        let policy = StudentPolicy { student, store, deterministic: true };
        let rollouts = collect_episodes(&policy, &suite, &cfg.sim, &cfg.data, 0, suite.len(), 0)?;
        let mut text = String::new();
        for (i, r) in rollouts.iter().enumerate() {
            let line = serde_json::json!({ "episode": i, "rollout": r });
            writeln!(text, "{line}").expect("string write");
        }
        self.write("rollouts.jsonl", &text)?;
        let s = summarize(&rollouts, cfg.data.dt)?;
        self.write("rollout_summary.csv", &format!("{}\n{}\n", RolloutSummary::CSV_HEADER, s.csv_row()))
    }

    fn finish(&self, summary: &RunSummary) -> Result<()> {
        self.write("summary.json", &serde_json::to_string_pretty(summary)?)
    }
}

/// Metrics of a saved teacher or student on `samples`.
pub fn evaluate_model(path: &Path, samples: &[Sample]) -> Result<MetricsReport> {
    let (kind, cfg, store) = load_model(path)?;
    let mut report = match kind.as_str() {
        "teacher" => {
            let t = build_teacher(&cfg);
            evaluate_with(samples, cfg.data.dt, |s| teacher_forecast(&t, &store, s))?
        }
        "student" => {
            let st = build_student(&cfg);
            evaluate_with(samples, cfg.data.dt, |s| student_forecast(&st, &store, s))?
        }
        other => return Err(CoreError::Checkpoint(format!("unknown model kind `{other}`"))),
    };
    let deploy = if kind == "teacher" { store.count(|_| true) } else { store.count(is_student_param) };
    report.params.insert("deployed".into(), deploy);
    report.params.insert("lora".into(), store.count(|l| l == ParamLabel::Lora));
    report.params.insert("total".into(), store.count(|_| true));
    Ok(report)
}

/// Writes `<stem>.json` and `<stem>.csv` next to `path`, each atomically.
pub fn write_report(path: &Path, report: &MetricsReport) -> Result<()> {
    let json = path.with_extension("json");
    let csv = path.with_extension("csv");
    write_atomic(&json, serde_json::to_string_pretty(report)?.as_bytes())?;
    write_atomic(&csv, report.csv().as_bytes())
}
