//! Run configuration: one TOML document with a section per component, plus
//! dotted-key overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::curriculum::CurriculumConfig;
use crate::distill::DistillConfig;
use crate::error::{CoreError, Result};
use crate::rl::PpoConfig;
use crate::scene::DataConfig;
use crate::sim::SimConfig;
use crate::student::StudentConfig;
use crate::teacher::TeacherConfig;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub lr_max: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub batch_size: usize,
    pub teacher_epochs: usize,
    pub distill_epochs: usize,
    pub ppo_epochs: usize,
    pub ppo_iterations_per_epoch: usize,
    /// Scenarios in the closed-loop refinement suite.
    pub ppo_scenarios: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            lr_max: 3e-4,
            lr_min: 1e-5,
            weight_decay: 1e-4,
            grad_clip: 1.0,
            batch_size: 16,
            teacher_epochs: 10,
            distill_epochs: 8,
            ppo_epochs: 5,
            ppo_iterations_per_epoch: 10,
            ppo_scenarios: 32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_max > 0.0) || !(self.lr_min > 0.0) || self.lr_min > self.lr_max {
            return Err(CoreError::Config("train: need 0 < lr_min <= lr_max".into()));
        }
        if !(self.grad_clip > 0.0) {
            return Err(CoreError::Config("train.grad_clip must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(CoreError::Config("train.batch_size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub teacher: TeacherConfig,
    pub student: StudentConfig,
    pub distill: DistillConfig,
    pub curriculum: CurriculumConfig,
    pub sim: SimConfig,
    pub ppo: PpoConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.teacher.validate()?;
        self.student.validate()?;
        self.distill.validate()?;
        self.curriculum.validate()?;
        self.sim.validate(&self.data)?;
        self.ppo.validate()?;
        self.train.validate()
    }

    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut value: toml::Table = toml::from_str(text).map_err(|e| CoreError::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: RunConfig = toml::Value::Table(value).try_into().map_err(|e: toml::de::Error| CoreError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| CoreError::Config(format!("{}: {e}", p.display())))?,
            None => String::new(),
        };
        Self::from_toml(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }
}

/// Applies `section.key=value`; the value is read as a TOML literal and
/// falls back to a bare string.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec.split_once('=').ok_or_else(|| CoreError::Config(format!("override `{spec}` is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CoreError::Config(format!("override `{spec}` has an empty key segment")));
    }
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| CoreError::Config(format!("override `{spec}`: `{p}` is not a section")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = RunConfig::default();
        let back = RunConfig::from_toml(&c.to_toml(), &[]).unwrap();
        assert_eq!(c, back);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_toml("[train]\nbogus = 1\n", &[]).is_err());
        assert!(RunConfig::from_toml("", &["nope.x=1".into()]).is_err());
    }

    #[test]
    fn overrides_apply() {
        let c = RunConfig::from_toml("[train]\nseed = 3\n", &["train.seed=9".into(), "data.profile=lane-keep".into()]).unwrap();
        assert_eq!(c.train.seed, 9);
        assert_eq!(c.data.profile, "lane-keep");
    }
}
