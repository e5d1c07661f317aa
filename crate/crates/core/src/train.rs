//! Training phases: teacher pretraining, curriculum-ordered distillation
//! and closed-loop refinement of the policy adapter.

use autodiff::{Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{RunConfig, TrainConfig};
use crate::curriculum::{fisher_diagonal, ewc_penalty, score_dataset, ComplexityStats, CurriculumState, EwcState, raw_features};
use crate::distill::{loss_att, loss_low, loss_output, loss_sem, schedule_weights, TeacherTargets, TransferMode, Weights};
use crate::error::{contract, CoreError, Result};
use crate::head::{targets_for, to_forecast, wta_loss};
use crate::metrics::{evaluate_forecasts, min_ade_fde, MetricsReport, MISS_THRESHOLD};
use crate::moe::load_balance_loss;
use crate::params::{cosine_lr, AdamW, AdamWConfig, Bound, ParamGrads, ParamStore};
use crate::rl::{evaluate_policy, train_ppo, PpoLogRow};
use crate::scene::{tensorize, DataConfig, MultimodalForecast, Sample, Scenario, ScenarioSet};
use crate::sim::{near_collision_suite, Action, RolloutSummary, SimConfig};
use crate::student::{is_student_param, Student, ACTION_DIM, MANEUVERS};
use crate::teacher::Teacher;

pub fn prepare(set: &ScenarioSet, data: &DataConfig) -> Vec<Sample> {
    set.scenarios.par_iter().map(|s| tensorize(s, data)).collect()
}

fn optimizer(cfg: &TrainConfig) -> AdamW {
    AdamW::new(AdamWConfig { weight_decay: cfg.weight_decay, ..Default::default() })
}

fn shuffled_batches(idx: &[usize], size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut v = idx.to_vec();
    v.shuffle(rng);
    v.chunks(size).map(|c| c.to_vec()).collect()
}

/// Averages, clips and applies `grads`; returns the norm before clipping.
fn apply(store: &mut ParamStore, opt: &mut AdamW, mut grads: ParamGrads, scale: f64, lr: f64, clip: f64) -> Result<f64> {
    for g in grads.0.values_mut() {
        g.data_mut().iter_mut().for_each(|v| *v *= scale);
    }
    if !grads.all_finite() {
        return Err(CoreError::Divergence("non-finite gradient".into()));
    }
    let norm = grads.clip_global_norm(clip);
    opt.step(store, &grads, lr)?;
    Ok(norm)
}

fn sum_in_order(parts: Vec<ParamGrads>) -> ParamGrads {
    let mut acc = ParamGrads::default();
    for p in parts {
        acc.accumulate(p);
    }
    acc
}

#[derive(Clone, Debug, Serialize)]
pub struct TeacherLogRow {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub grad_norm: f64,
}

impl TeacherLogRow {
    pub const CSV_HEADER: &'static str = "epoch,lr,train_loss,val_loss,grad_norm";

    pub fn csv_row(&self) -> String {
        format!("{},{:.6e},{:.9},{:.9},{:.9}", self.epoch, self.lr, self.train_loss, self.val_loss, self.grad_norm)
    }
}

/// Task loss plus the weighted load-balance term for one scenario; also
/// returns the task loss alone.
pub fn teacher_loss(teacher: &Teacher, tape: &mut Tape, p: &Bound, sample: &Sample) -> Result<(Var, f64)> {
    let out = teacher.forward(tape, p, sample)?;
    let (rows, gts) = targets_for(sample, &out.row_of);
    let task = wta_loss(tape, &out.forecast, &rows, &gts)?;
    let task_value = tape.value(task).item();
    let lb = load_balance_loss(tape, out.gate.weights)?;
    let lb = tape.scale(lb, teacher.cfg.moe.load_balance_coef);
    Ok((tape.add(task, lb)?, task_value))
}

pub fn teacher_val_loss(teacher: &Teacher, store: &ParamStore, samples: &[Sample]) -> Result<f64> {
    let losses: Vec<f64> = samples
        .par_iter()
        .map(|s| {
            let mut tape = Tape::new();
            let p = store.bind(&mut tape, |_| false);
            Ok(teacher_loss(teacher, &mut tape, &p, s)?.1)
        })
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len().max(1) as f64)
}

pub fn train_teacher(teacher: &Teacher, store: &mut ParamStore, train: &[Sample], val: &[Sample], cfg: &TrainConfig) -> Result<Vec<TeacherLogRow>> {
    if train.is_empty() {
        return Err(contract("teacher training needs data"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7EAC_4E12);
    let mut opt = optimizer(cfg);
    let idx: Vec<usize> = (0..train.len()).collect();
    let mut log = Vec::with_capacity(cfg.teacher_epochs);
    for epoch in 0..cfg.teacher_epochs {
        let lr = cosine_lr(epoch, cfg.teacher_epochs, cfg.lr_max, cfg.lr_min);
        let mut loss_sum = 0.0;
        let mut norm_sum = 0.0;
        let batches = shuffled_batches(&idx, cfg.batch_size, &mut rng);
        for b in &batches {
            let parts: Vec<(ParamGrads, f64)> = b
                .par_iter()
                .map(|&i| {
                    let mut tape = Tape::new();
                    let p = store.bind(&mut tape, |_| true);
                    let (loss, task) = teacher_loss(teacher, &mut tape, &p, &train[i])?;
                    let mut g = tape.backward(loss)?;
                    Ok((p.collect(&tape, &mut g), task))
                })
                .collect::<Result<_>>()?;
            let task: f64 = parts.iter().map(|p| p.1).sum();
            if !task.is_finite() {
                return Err(CoreError::Divergence(format!("teacher loss is {task} at epoch {epoch}")));
            }
            loss_sum += task;
            let grads = sum_in_order(parts.into_iter().map(|p| p.0).collect());
            norm_sum += apply(store, &mut opt, grads, 1.0 / b.len() as f64, lr, cfg.grad_clip)?;
        }
        log.push(TeacherLogRow {
            epoch,
            lr,
            train_loss: loss_sum / train.len() as f64,
            val_loss: teacher_val_loss(teacher, store, val)?,
            grad_norm: norm_sum / batches.len() as f64,
        });
        log::info!("teacher epoch {epoch}: val {:.4}", log.last().expect("pushed").val_loss);
    }
    Ok(log)
}

/// Frozen-teacher outputs used as transfer targets.
pub fn teacher_targets(teacher: &Teacher, store: &ParamStore, samples: &[Sample]) -> Result<Vec<TeacherTargets>> {
    samples
        .par_iter()
        .map(|s| {
            let mut tape = Tape::new();
            let p = store.bind(&mut tape, |_| false);
            let out = teacher.forward(&mut tape, &p, s)?;
            let lat = tape.value(out.forecast.latents);
            let (k, dz) = (lat.shape()[1], lat.shape()[2]);
            Ok(TeacherTargets {
                features: tape.value(out.encoder).clone(),
                attn: out.attn_map.clone(),
                ego_latents: Tensor::new(vec![k, dz], lat.data()[..k * dz].to_vec())?,
                traj: tape.value(out.forecast.traj).clone(),
                log_probs: tape.value(out.forecast.log_probs).clone(),
            })
        })
        .collect()
}

/// Normalized ego action that reproduces the first recorded future step.
pub fn imitation_target(sample: &Sample, data: &DataConfig, sim: &SimConfig) -> [f64; 2] {
    let fut = &sample.future[0];
    if fut.is_empty() {
        return [0.0; 2];
    }
    let half = 0.5 * data.dt;
    let p0 = sample.anchor[0];
    let v = sample.vel[0];
    let (v0, th0) = (v[0].hypot(v[1]), v[1].atan2(v[0]));
    let (dx, dy) = (fut[0][0] - p0[0], fut[0][1] - p0[1]);
    let v1 = dx.hypot(dy) / data.dt;
    let accel = (v1 - v0) / half;
    let yaw_rate = crate::scene::wrap_angle(dy.atan2(dx) - th0) / half;
    let steer = (sim.wheelbase * yaw_rate / v0.max(1.0)).atan();
    let a = Action { accel, steer }.clamped(sim).to_normalized(sim);
    [a[0], a[1]]
}

#[derive(Clone, Copy, Debug, Default, Serialize)]
pub struct DistillParts {
    pub task: f64,
    pub low: f64,
    pub att: f64,
    pub sem: f64,
    pub output: f64,
    pub ewc: f64,
    pub total: f64,
}

impl DistillParts {
    /// Recombines the logged components with their weights.
    pub fn reconstruct(&self, w: &Weights, output_weight: f64) -> f64 {
        w.alpha * self.task + w.xi * self.low + w.zeta * self.att + w.eta * self.sem + output_weight * self.output + w.psi * self.ewc
    }
}

/// Weighted sum of `(weight, loss)` terms; zero-weight terms are skipped.
pub fn total_loss(tape: &mut Tape, terms: &[(f64, Var)]) -> Result<Var> {
    let mut acc = tape.constant(Tensor::scalar(0.0));
    for &(w, v) in terms {
        if w != 0.0 {
            let s = tape.scale(v, w);
            acc = tape.add(acc, s)?;
        }
    }
    Ok(acc)
}

fn batch_mean(tape: &mut Tape, vs: &[Var]) -> Result<Var> {
    let mut acc = vs[0];
    for v in &vs[1..] {
        acc = tape.add(acc, *v)?;
    }
    Ok(tape.scale(acc, 1.0 / vs.len() as f64))
}

pub struct DistillInputs<'a> {
    pub student: &'a Student,
    pub samples: &'a [Sample],
    pub targets: &'a [TeacherTargets],
    pub cfg: &'a RunConfig,
}

/// Composite transfer objective over the minibatch `idx`.
pub fn distill_loss(
    tape: &mut Tape,
    p: &Bound,
    inp: &DistillInputs,
    idx: &[usize],
    w: &Weights,
    ewc: Option<&EwcState>,
) -> Result<(Var, DistillParts)> {
    if idx.is_empty() {
        return Err(contract("empty minibatch"));
    }
    let dc = &inp.cfg.distill;
    let full = dc.mode == TransferMode::Full;
    let (mut task, mut low, mut att, mut out) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let (mut zt, mut zs) = (Vec::new(), Vec::new());
    for &i in idx {
        let s = &inp.samples[i];
        let t = &inp.targets[i];
        let o = inp.student.forward(tape, p, s, full && w.zeta > 0.0)?;
        let (rows, gts) = targets_for(s, &o.row_of);
        let mut l = wta_loss(tape, &o.forecast, &rows, &gts)?;
        if dc.maneuver_weight > 0.0 {
            let ls = tape.log_softmax(o.maneuver_logits, 1)?;
            let ls = tape.reshape(ls, &[MANEUVERS, 1])?;
            let pick = tape.gather(ls, &[s.label.index()])?;
            let ce = tape.sum_all(pick);
            let ce = tape.scale(ce, -dc.maneuver_weight);
            l = tape.add(l, ce)?;
        }
        if dc.imitation_weight > 0.0 {
            let target = imitation_target(s, &inp.cfg.data, &inp.cfg.sim);
            let tv = tape.constant(Tensor::new(vec![1, ACTION_DIM], target.to_vec())?);
            let d = tape.sub(o.action_mean, tv)?;
            let d = tape.mul(d, d)?;
            let d = tape.mean_all(d);
            let d = tape.scale(d, dc.imitation_weight);
            l = tape.add(l, d)?;
        }
        task.push(l);
        if dc.output_weight > 0.0 {
            out.push(loss_output(tape, &o.forecast, t)?);
        }
        if full {
            if w.xi > 0.0 {
                low.push(loss_low(tape, p, &t.features, o.features, &s.valid)?);
            }
            if let Some(a_s) = o.a_s {
                att.push(loss_att(tape, &t.attn, a_s, &s.valid)?);
            }
            if w.eta > 0.0 {
                let (k, dz) = (t.ego_latents.shape()[0], t.ego_latents.shape()[1]);
                let ego = tape.slice(o.forecast.latents, 0, 0, 1)?;
                zs.push(tape.reshape(ego, &[k, dz])?);
                zt.push(t.ego_latents.clone());
            }
        }
    }
    let mut parts = DistillParts::default();
    let mut terms = Vec::new();
    let task = batch_mean(tape, &task)?;
    parts.task = tape.value(task).item();
    terms.push((w.alpha, task));
    if !out.is_empty() {
        let v = batch_mean(tape, &out)?;
        parts.output = tape.value(v).item();
        terms.push((dc.output_weight, v));
    }
    if !low.is_empty() {
        let v = batch_mean(tape, &low)?;
        parts.low = tape.value(v).item();
        terms.push((w.xi, v));
    }
    if !att.is_empty() {
        let v = batch_mean(tape, &att)?;
        parts.att = tape.value(v).item();
        terms.push((w.zeta, v));
    }
    if !zs.is_empty() {
        let v = loss_sem(tape, &zt, &zs, dc.negatives, dc.tau)?;
        parts.sem = tape.value(v).item();
        terms.push((w.eta, v));
    }
    if let Some(e) = ewc.filter(|e| !e.is_empty()) {
        let v = ewc_penalty(tape, p, e)?;
        parts.ewc = tape.value(v).item();
        terms.push((w.psi, v));
    }
    let total = total_loss(tape, &terms)?;
    parts.total = tape.value(total).item();
    Ok((total, parts))
}

/// Ego forecast of the student for one sample.
pub fn student_forecast(student: &Student, store: &ParamStore, s: &Sample) -> Result<(MultimodalForecast, f64)> {
    let mut tape = Tape::new();
    let p = store.bind(&mut tape, |_| false);
    let o = student.forward(&mut tape, &p, s, false)?;
    let (rows, gts) = targets_for(s, &o.row_of);
    let l = wta_loss(&mut tape, &o.forecast, &rows, &gts)?;
    Ok((to_forecast(&tape, &o.forecast, 0), tape.value(l).item()))
}

pub fn teacher_forecast(teacher: &Teacher, store: &ParamStore, s: &Sample) -> Result<(MultimodalForecast, f64)> {
    let mut tape = Tape::new();
    let p = store.bind(&mut tape, |_| false);
    let o = teacher.forward(&mut tape, &p, s)?;
    let (rows, gts) = targets_for(s, &o.row_of);
    let l = wta_loss(&mut tape, &o.forecast, &rows, &gts)?;
    Ok((to_forecast(&tape, &o.forecast, 0), tape.value(l).item()))
}

/// Mean forecast loss and the fraction of ego forecasts with minFDE under the miss threshold.
pub fn student_validation(student: &Student, store: &ParamStore, samples: &[Sample]) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Err(contract("validation needs data"));
    }
    let r: Vec<(f64, bool)> = samples
        .par_iter()
        .map(|s| {
            let (f, l) = student_forecast(student, store, s)?;
            Ok((l, min_ade_fde(&f, &s.future[0]).1 < MISS_THRESHOLD))
        })
        .collect::<Result<_>>()?;
    let n = r.len() as f64;
    Ok((r.iter().map(|x| x.0).sum::<f64>() / n, r.iter().filter(|x| x.1).count() as f64 / n))
}

/// Metrics of ego forecasts produced by `f` over `samples`.
pub fn evaluate_with<F>(samples: &[Sample], dt: f64, f: F) -> Result<MetricsReport>
where
    F: Fn(&Sample) -> Result<(MultimodalForecast, f64)> + Sync,
{
    let items = samples
        .par_iter()
        .map(|s| Ok((f(s)?.0, s.future[0].clone(), s.label)))
        .collect::<Result<Vec<_>>>()?;
    evaluate_forecasts(&items, dt)
}

#[derive(Clone, Debug, Serialize)]
pub struct DistillLogRow {
    pub epoch: usize,
    pub stage: usize,
    pub lr: f64,
    pub scenarios: usize,
    pub weights: Weights,
    pub parts: DistillParts,
    pub val_loss: f64,
    pub val_acc: f64,
}

impl DistillLogRow {
    pub const CSV_HEADER: &'static str =
        "epoch,stage,lr,scenarios,alpha,xi,zeta,eta,beta,psi,total,task,low,att,sem,output,ewc,val_loss,val_acc";

    pub fn csv_row(&self) -> String {
        let w = &self.weights;
        let p = &self.parts;
        format!(
            "{},{},{:.6e},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9},{:.6}",
            self.epoch, self.stage, self.lr, self.scenarios, w.alpha, w.xi, w.zeta, w.eta, w.beta, w.psi, p.total, p.task, p.low,
            p.att, p.sem, p.output, p.ewc, self.val_loss, self.val_acc
        )
    }
}

/// Mutable state of one distillation run.
pub struct Distiller<'a> {
    pub inputs: DistillInputs<'a>,
    pub val: &'a [Sample],
    pub opt: AdamW,
    pub rng: ChaCha8Rng,
    pub epoch: usize,
    /// Epoch count the learning-rate schedule spans.
    pub schedule_epochs: usize,
    pub ewc: Option<EwcState>,
    pub log: Vec<DistillLogRow>,
}

impl<'a> Distiller<'a> {
    pub fn new(inputs: DistillInputs<'a>, val: &'a [Sample], schedule_epochs: usize) -> Self {
        let seed = inputs.cfg.train.seed ^ 0xD157_111;
        Self {
            opt: optimizer(&inputs.cfg.train),
            inputs,
            val,
            rng: ChaCha8Rng::seed_from_u64(seed),
            epoch: 0,
            schedule_epochs,
            ewc: None,
            log: Vec::new(),
        }
    }

    /// One pass over `subset`; validation on `val_subset`.
    pub fn run_epoch(&mut self, store: &mut ParamStore, subset: &[usize], val_subset: &[Sample], stage: usize) -> Result<&DistillLogRow> {
        let tc = &self.inputs.cfg.train;
        let lr = cosine_lr(self.epoch, self.schedule_epochs, tc.lr_max, tc.lr_min);
        let w = schedule_weights(self.epoch as f64, &self.inputs.cfg.distill);
        let mut sum = DistillParts::default();
        let batches = shuffled_batches(subset, tc.batch_size, &mut self.rng);
        for b in &batches {
            let mut tape = Tape::new();
            let p = store.bind(&mut tape, |l| is_student_param(l) || l == crate::params::ParamLabel::Adapter);
            let (loss, parts) = distill_loss(&mut tape, &p, &self.inputs, b, &w, self.ewc.as_ref())?;
            if !parts.total.is_finite() {
                return Err(CoreError::Divergence(format!("distillation loss is {} at epoch {}", parts.total, self.epoch)));
            }
            let mut g = tape.backward(loss)?;
            let grads = p.collect(&tape, &mut g);
            apply(store, &mut self.opt, grads, 1.0, lr, tc.grad_clip)?;
            let f = b.len() as f64;
            sum.task += parts.task * f;
            sum.low += parts.low * f;
            sum.att += parts.att * f;
            sum.sem += parts.sem * f;
            sum.output += parts.output * f;
            sum.ewc += parts.ewc * f;
            sum.total += parts.total * f;
        }
        let n = subset.len() as f64;
        let parts = DistillParts {
            task: sum.task / n,
            low: sum.low / n,
            att: sum.att / n,
            sem: sum.sem / n,
            output: sum.output / n,
            ewc: sum.ewc / n,
            total: sum.total / n,
        };
        let (val_loss, val_acc) = student_validation(self.inputs.student, store, val_subset)?;
        self.log.push(DistillLogRow { epoch: self.epoch, stage, lr, scenarios: subset.len(), weights: w, parts, val_loss, val_acc });
        self.epoch += 1;
        Ok(self.log.last().expect("pushed"))
    }

    /// Fisher estimate on (a prefix of) `subset` folded into the EWC state.
    pub fn consolidate(&mut self, store: &ParamStore, subset: &[usize], samples: usize) -> Result<()> {
        let pick: Vec<Sample> = subset.iter().take(samples.max(1)).map(|&i| self.inputs.samples[i].clone()).collect();
        let f = fisher_diagonal(self.inputs.student, store, &pick, self.inputs.cfg.train.seed ^ self.epoch as u64)?;
        self.ewc.get_or_insert_with(|| EwcState::new(self.inputs.cfg.curriculum.ewc_lambda)).consolidate(f, store);
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct StageEvent {
    pub stage: usize,
    pub bound: f64,
    pub next_bound: f64,
    pub acc: f64,
    /// Epoch counter at the end of the stage (logs carry no wall-clock time).
    pub epoch: usize,
    pub epochs_in_stage: usize,
    pub reached_threshold: bool,
    pub scenarios: usize,
    /// Validation loss on the first stage's slice after this stage.
    pub first_slice_val_loss: f64,
}

pub struct CurriculumData<'a> {
    pub train: &'a [Scenario],
    pub val: &'a [Scenario],
    pub val_samples: &'a [Sample],
}

/// Indices with complexity at most `bound`; the `min_count` easiest when none qualify.
fn slice_by_bound(scores: &[f64], bound: f64, min_count: usize) -> Vec<usize> {
    let sel: Vec<usize> = (0..scores.len()).filter(|&i| scores[i] <= bound + 1e-12).collect();
    if !sel.is_empty() {
        return sel;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    order.truncate(min_count.max(1));
    order.sort_unstable();
    order
}

/// Staged distillation: each stage trains on scenarios under the current
/// complexity bound until validation accuracy reaches the threshold or the
/// epoch cap, then consolidates and advances the bound.
pub fn run_curriculum(d: &mut Distiller, store: &mut ParamStore, data: &CurriculumData) -> Result<Vec<StageEvent>> {
    let cc = d.inputs.cfg.curriculum.clone();
    let tc = d.inputs.cfg.train.clone();
    let (scores, stats) = score_dataset(data.train)?;
    let val_scores: Vec<f64> = data
        .val
        .iter()
        .map(|s| crate::curriculum::complexity(&raw_features(s), Some(&stats)))
        .collect::<Result<_>>()?;
    let nominal = tc.distill_epochs.div_ceil(cc.stages).max(1);
    let mut state = CurriculumState::new(&cc);
    let mut events = Vec::with_capacity(cc.stages);
    let mut first_val: Option<Vec<Sample>> = None;
    for stage in 0..cc.stages {
        let bound = state.bound;
        let subset = slice_by_bound(&scores, bound, tc.batch_size);
        let val_idx = slice_by_bound(&val_scores, bound, 1);
        let val: Vec<Sample> = val_idx.iter().map(|&i| data.val_samples[i].clone()).collect();
        let first = first_val.get_or_insert_with(|| val.clone()).clone();
        let mut acc = 0.0;
        let mut epochs = 0;
        let mut reached = false;
        while epochs < nominal * cc.max_epoch_factor {
            acc = d.run_epoch(store, &subset, &val, stage)?.val_acc;
            epochs += 1;
            if epochs >= nominal && acc >= cc.acc_threshold {
                reached = true;
                break;
            }
        }
        if !reached {
            log::warn!("stage {stage}: accuracy {acc:.3} below {} after {epochs} epochs; moving on", cc.acc_threshold);
        }
        if cc.ewc {
            d.consolidate(store, &subset, cc.fisher_samples)?;
        }
        let next_bound = state.advance(acc, &cc);
        let first_slice_val_loss = student_validation(d.inputs.student, store, &first)?.0;
        events.push(StageEvent {
            stage,
            bound,
            next_bound,
            acc,
            epoch: d.epoch,
            epochs_in_stage: epochs,
            reached_threshold: reached,
            scenarios: subset.len(),
            first_slice_val_loss,
        });
    }
    Ok(events)
}

/// Complexity statistics of a scenario set, for reports.
pub fn complexity_stats(set: &[Scenario]) -> Result<ComplexityStats> {
    Ok(score_dataset(set)?.1)
}

#[derive(Clone, Debug, Serialize)]
pub struct PpoPhaseReport {
    pub before: RolloutSummary,
    pub after: RolloutSummary,
    pub log: Vec<PpoLogRow>,
    pub body_digest_before: String,
    pub body_digest_after: String,
}

/// Closed-loop refinement on the near-collision suite. Fails if any
/// distilled or frozen tensor changes.
pub fn run_ppo_phase(student: &Student, store: &mut ParamStore, cfg: &RunConfig, iterations: usize) -> Result<PpoPhaseReport> {
    let suite = near_collision_suite(cfg.train.seed ^ 0x5AFE, cfg.train.ppo_scenarios, &cfg.data)?;
    let frozen = |l| matches!(l, crate::params::ParamLabel::Body | crate::params::ParamLabel::FrozenBase);
    let body_digest_before = store.digest(frozen);
    let before = evaluate_policy(student, store, &suite, &cfg.sim, &cfg.data)?;
    let log = train_ppo(student, store, &suite, &cfg.sim, &cfg.data, &cfg.ppo, iterations, cfg.train.seed)?;
    let after = evaluate_policy(student, store, &suite, &cfg.sim, &cfg.data)?;
    let body_digest_after = store.digest(frozen);
    if body_digest_before != body_digest_after {
        return Err(contract("policy refinement modified distilled or frozen parameters"));
    }
    Ok(PpoPhaseReport { before, after, log, body_digest_before, body_digest_after })
}
