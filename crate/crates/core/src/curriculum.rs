//! Scenario complexity scoring, staged curriculum bounds and elastic weight
//! consolidation.

use std::collections::BTreeMap;

use autodiff::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{contract, CoreError, Result};
use crate::params::{Bound, ParamLabel, ParamStore};
use crate::scene::{wrap_angle, ObservationWindow, Sample, Scenario};
use crate::student::Student;

pub const WEIGHTS: [f64; 3] = [0.3, 0.4, 0.3];
pub const ENTROPY_BINS: usize = 8;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct CurriculumConfig {
    pub c0: f64,
    pub delta_c: f64,
    pub acc_threshold: f64,
    pub acc_margin: f64,
    pub stages: usize,
    /// Cap on the epochs of one stage, as a multiple of its nominal count.
    pub max_epoch_factor: usize,
    pub ewc: bool,
    pub ewc_lambda: f64,
    /// Scenarios drawn for each Fisher estimate.
    pub fisher_samples: usize,
}

impl Default for CurriculumConfig {
    fn default() -> Self {
        Self {
            c0: 0.6,
            delta_c: 0.1,
            acc_threshold: 0.85,
            acc_margin: 0.05,
            stages: 5,
            max_epoch_factor: 3,
            ewc: true,
            ewc_lambda: 400.0,
            fisher_samples: 32,
        }
    }
}

impl CurriculumConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stages == 0 || self.max_epoch_factor == 0 {
            return Err(CoreError::Config("curriculum.stages and curriculum.max_epoch_factor must be positive".into()));
        }
        if !(self.acc_margin > 0.0) || !(self.delta_c >= 0.0) || !(self.ewc_lambda >= 0.0) {
            return Err(CoreError::Config("curriculum: acc_margin must be positive, delta_c and ewc_lambda non-negative".into()));
        }
        Ok(())
    }
}

/// Unnormalized complexity components of one scenario.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComplexityFeatures {
    pub n_obj: f64,
    pub v_rel: f64,
    pub h_traj: f64,
}

impl ComplexityFeatures {
    pub fn as_array(&self) -> [f64; 3] {
        [self.n_obj, self.v_rel, self.h_traj]
    }
}

/// Normalized Shannon entropy of per-neighbour heading-change histograms.
/// Bins span the window's largest absolute heading change.
pub fn trajectory_entropy(window: &ObservationWindow) -> f64 {
    if window.scenes.len() < 2 {
        return 0.0;
    }
    let mut per_agent: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
    for w in window.scenes.windows(2) {
        for (id, s) in &w[1].neighbors {
            if let Some((_, p)) = w[0].neighbors.iter().find(|(i, _)| i == id) {
                per_agent.entry(*id).or_default().push(wrap_angle(s.theta - p.theta));
            }
        }
    }
    let max = per_agent.values().flatten().fold(0.0f64, |m, d| m.max(d.abs()));
    let hists: Vec<Vec<f64>> = per_agent.values().filter(|d| !d.is_empty()).cloned().collect();
    if hists.is_empty() {
        return 0.0;
    }
    hists.iter().map(|d| histogram_entropy(d, max)).sum::<f64>() / hists.len() as f64
}

/// Entropy of `values` over `ENTROPY_BINS` uniform bins on `[-max, max]`,
/// divided by `ln ENTROPY_BINS`.
pub fn histogram_entropy(values: &[f64], max: f64) -> f64 {
    if values.is_empty() || !(max > 0.0) {
        return 0.0;
    }
    let mut counts = [0usize; ENTROPY_BINS];
    let width = 2.0 * max / ENTROPY_BINS as f64;
    for v in values {
        let b = ((v + max) / width).floor().clamp(0.0, (ENTROPY_BINS - 1) as f64) as usize;
        counts[b] += 1;
    }
    let n = values.len() as f64;
    let h: f64 = counts.iter().filter(|&&c| c > 0).map(|&c| {
        let p = c as f64 / n;
        -p * p.ln()
    }).sum();
    h / (ENTROPY_BINS as f64).ln()
}

pub fn raw_features(s: &Scenario) -> ComplexityFeatures {
    let scenes = &s.window.scenes;
    let n_obj = scenes.iter().map(|sc| sc.neighbors.len() as f64).sum::<f64>() / scenes.len() as f64;
    let mut rel = Vec::new();
    for sc in scenes {
        let e = sc.ego.velocity();
        for (_, nb) in &sc.neighbors {
            let v = nb.velocity();
            rel.push((v[0] - e[0]).hypot(v[1] - e[1]));
        }
    }
    let v_rel = if rel.is_empty() { 0.0 } else { rel.iter().sum::<f64>() / rel.len() as f64 };
    ComplexityFeatures { n_obj, v_rel, h_traj: trajectory_entropy(&s.window) }
}

/// Per-component minimum and maximum over a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComplexityStats {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl ComplexityStats {
    pub fn fit(features: &[ComplexityFeatures]) -> Result<Self> {
        if features.is_empty() {
            return Err(contract("complexity statistics need at least one scenario"));
        }
        let mut min = [f64::INFINITY; 3];
        let mut max = [f64::NEG_INFINITY; 3];
        for f in features {
            for (k, v) in f.as_array().into_iter().enumerate() {
                min[k] = min[k].min(v);
                max[k] = max[k].max(v);
            }
        }
        Ok(Self { min, max })
    }

    pub fn normalize(&self, f: &ComplexityFeatures) -> [f64; 3] {
        let mut out = [0.0; 3];
        for (k, v) in f.as_array().into_iter().enumerate() {
            let r = self.max[k] - self.min[k];
            out[k] = if r > 0.0 { ((v - self.min[k]) / r).clamp(0.0, 1.0) } else { 0.0 };
        }
        out
    }
}

/// Weighted sum of normalized components.
pub fn complexity_from_normalized(n: [f64; 3]) -> f64 {
    n.iter().zip(WEIGHTS).map(|(v, w)| v * w).sum()
}

pub fn complexity(f: &ComplexityFeatures, stats: Option<&ComplexityStats>) -> Result<f64> {
    let stats = stats.ok_or_else(|| contract("complexity needs dataset normalization statistics"))?;
    Ok(complexity_from_normalized(stats.normalize(f)))
}

/// Complexity of every scenario under statistics fitted on the same set.
pub fn score_dataset(set: &[Scenario]) -> Result<(Vec<f64>, ComplexityStats)> {
    let feats: Vec<ComplexityFeatures> = set.par_iter().map(raw_features).collect();
    let stats = ComplexityStats::fit(&feats)?;
    let scores = feats.iter().map(|f| complexity(f, Some(&stats))).collect::<Result<_>>()?;
    Ok((scores, stats))
}

/// Bound increment for a stage that reached accuracy `acc`, never negative.
pub fn increment(acc: f64, cfg: &CurriculumConfig) -> f64 {
    cfg.delta_c * ((acc - cfg.acc_threshold) / cfg.acc_margin).min(1.0).max(0.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurriculumState {
    pub stage: usize,
    pub bound: f64,
    pub bounds: Vec<f64>,
}

impl CurriculumState {
    pub fn new(cfg: &CurriculumConfig) -> Self {
        Self { stage: 0, bound: cfg.c0, bounds: vec![cfg.c0] }
    }

    pub fn advance(&mut self, acc: f64, cfg: &CurriculumConfig) -> f64 {
        self.bound += increment(acc, cfg);
        self.stage += 1;
        self.bounds.push(self.bound);
        self.bound
    }
}

/// Diagonal Fisher information and the parameter snapshot it was taken at.
#[derive(Clone, Debug, Default)]
pub struct EwcState {
    pub fisher: BTreeMap<String, Tensor>,
    pub snapshot: BTreeMap<String, Tensor>,
    pub lambda: f64,
}

impl EwcState {
    pub fn new(lambda: f64) -> Self {
        Self { lambda, ..Default::default() }
    }

    pub fn is_empty(&self) -> bool {
        self.fisher.is_empty()
    }

    /// Adds a new Fisher estimate and moves the anchor to the current parameters.
    pub fn consolidate(&mut self, fisher: BTreeMap<String, Tensor>, store: &ParamStore) {
        for (name, f) in fisher {
            match self.fisher.get_mut(&name) {
                Some(acc) => acc.add_scaled(&f, 1.0),
                None => {
                    self.fisher.insert(name.clone(), f);
                }
            }
            self.snapshot.insert(name.clone(), store.tensor(&name).clone());
        }
    }
}

fn check_shapes(name: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(contract(format!("EWC snapshot of `{name}` has shape {:?}, parameter has {:?}", b.shape(), a.shape())));
    }
    Ok(())
}

/// `sum (lambda / 2) F (theta - theta*)^2` from plain values.
pub fn ewc_penalty_plain(store: &ParamStore, s: &EwcState) -> Result<f64> {
    let mut total = 0.0;
    for (name, f) in &s.fisher {
        let theta = store.get(name).ok_or_else(|| CoreError::Registry(format!("EWC parameter `{name}` not registered")))?;
        let star = &s.snapshot[name];
        check_shapes(name, &theta.value, star)?;
        check_shapes(name, &theta.value, f)?;
        for ((t, a), fi) in theta.value.data().iter().zip(star.data()).zip(f.data()) {
            total += 0.5 * s.lambda * fi * (t - a).powi(2);
        }
    }
    Ok(total)
}

/// Differentiable penalty over the bound parameters.
pub fn ewc_penalty(tape: &mut Tape, p: &Bound, s: &EwcState) -> Result<Var> {
    let mut total = tape.constant(Tensor::scalar(0.0));
    for (name, f) in &s.fisher {
        let theta = p.var(name);
        let star = &s.snapshot[name];
        check_shapes(name, tape.value(theta), star)?;
        let star = tape.constant(star.clone());
        let diff = tape.sub(theta, star)?;
        let sq = tape.mul(diff, diff)?;
        let fv = tape.constant(f.clone());
        let w = tape.mul(sq, fv)?;
        let w = tape.sum_all(w);
        total = tape.add(total, w)?;
    }
    Ok(tape.scale(total, 0.5 * s.lambda))
}

/// Parameters covered by the Fisher estimate.
pub fn is_consolidated(l: ParamLabel) -> bool {
    matches!(l, ParamLabel::Body | ParamLabel::Lora)
}

/// Log-likelihood of a label sampled from the student's own prediction:
/// a mode and Gaussian-perturbed ego trajectory, plus a maneuver class.
fn sampled_log_likelihood(tape: &mut Tape, p: &Bound, student: &Student, sample: &Sample, rng: &mut ChaCha8Rng) -> Result<Var> {
    let out = student.forward(tape, p, sample, false)?;
    let f = &out.forecast;
    let s = tape.shape(f.traj).to_vec();
    let (k, rows, tf) = (s[0], s[1], s[3]);
    let lp = tape.value(f.log_probs).data()[..k].to_vec();
    let mode = sample_categorical(&lp, rng);
    let flat = tape.reshape(f.traj, &[k * rows, 2 * tf])?;
    let mu = tape.gather(flat, &[mode * rows])?;
    let y: Vec<f64> = tape.value(mu).data().iter().map(|m| { let z: f64 = StandardNormal.sample(rng); m + z }).collect();
    let y = tape.constant(Tensor::new(vec![1, 2 * tf], y)?);
    let d = tape.sub(y, mu)?;
    let d = tape.mul(d, d)?;
    let d = tape.sum_all(d);
    let gauss = tape.scale(d, -0.5);
    let lpf = tape.reshape(f.log_probs, &[rows * k, 1])?;
    let pick = tape.gather(lpf, &[mode])?;
    let pick = tape.sum_all(pick);
    let man = tape.log_softmax(out.maneuver_logits, 1)?;
    let mv = tape.value(man).data().to_vec();
    let c = sample_categorical(&mv, rng);
    let man = tape.reshape(man, &[mv.len(), 1])?;
    let mc = tape.gather(man, &[c])?;
    let mc = tape.sum_all(mc);
    let ll = tape.add(gauss, pick)?;
    Ok(tape.add(ll, mc)?)
}

fn sample_categorical(log_probs: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, l) in log_probs.iter().enumerate() {
        acc += l.exp();
        if u < acc {
            return i;
        }
    }
    log_probs.len() - 1
}

/// Mean squared gradient of the sampled log-likelihood over `samples`.
pub fn fisher_diagonal(student: &Student, store: &ParamStore, samples: &[Sample], seed: u64) -> Result<BTreeMap<String, Tensor>> {
    if samples.is_empty() {
        return Err(contract("Fisher estimate needs at least one sample"));
    }
    let per: Vec<BTreeMap<String, Tensor>> = samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (i as u64).wrapping_mul(0xA24B_AED4_963E_E407));
            let mut tape = Tape::new();
            let p = store.bind(&mut tape, is_consolidated);
            let ll = sampled_log_likelihood(&mut tape, &p, student, s, &mut rng)?;
            let mut g = tape.backward(ll)?;
            Ok(p.collect(&tape, &mut g).0)
        })
        .collect::<Result<_>>()?;
    let mut fisher: BTreeMap<String, Tensor> = store
        .iter()
        .filter(|(_, p)| is_consolidated(p.label))
        .map(|(n, p)| (n.clone(), Tensor::zeros(p.value.shape())))
        .collect();
    let inv = 1.0 / samples.len() as f64;
    for g in per {
        for (name, t) in g {
            let acc = fisher.get_mut(&name).expect("collected from consolidated parameters");
            acc.add_scaled(&t.map(|v| v * v), inv);
        }
    }
    Ok(fisher)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn complexity_examples() {
        assert_eq!(complexity_from_normalized([0.0; 3]), 0.0);
        assert!((complexity_from_normalized([1.0; 3]) - 1.0).abs() < 1e-15);
        assert_eq!(complexity_from_normalized([1.0, 0.0, 0.0]), 0.3);
        let f = ComplexityFeatures { n_obj: 1.0, v_rel: 0.0, h_traj: 0.0 };
        assert!(complexity(&f, None).is_err());
    }

    #[test]
    fn entropy_examples() {
        assert_eq!(histogram_entropy(&[0.0; 5], 0.0), 0.0);
        let uniform: Vec<f64> = (0..8).map(|b| -1.0 + 0.25 * b as f64 + 0.125).collect();
        assert!((histogram_entropy(&uniform, 1.0) - 1.0).abs() < 1e-12);
        assert!((histogram_entropy(&[-0.9, 0.9], 1.0) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn increments() {
        let c = CurriculumConfig::default();
        assert_eq!(increment(0.85, &c), 0.0);
        assert!((increment(0.95, &c) - 0.1).abs() < 1e-12);
        assert!((increment(0.875, &c) - 0.05).abs() < 1e-12);
        assert_eq!(increment(0.5, &c), 0.0);
    }
}
