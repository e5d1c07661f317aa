//! Teacher-to-student transfer losses (feature, attention, mode-level
//! contrastive, output-level) and their epoch schedules.

use autodiff::{Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{contract, CoreError, Result};
use crate::head::{argmin, mode_ades, ForecastOutput};
use crate::nn;
use crate::params::Bound;

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
pub enum Negatives {
    /// Other modes of the same scene.
    InMode,
    /// The same mode of other scenes in the batch.
    InBatch,
    Both,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
pub enum TransferMode {
    /// Feature, attention, contrastive and output terms.
    Full,
    /// Output-level term only.
    OutputOnly,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub tau: f64,
    pub xi0: f64,
    pub zeta0: f64,
    pub eta0: f64,
    pub lambda_xi: f64,
    pub lambda_zeta: f64,
    pub lambda_eta: f64,
    pub beta0: f64,
    pub lambda_beta: f64,
    pub alpha: f64,
    pub psi: f64,
    pub negatives: Negatives,
    pub mode: TransferMode,
    /// Weight of the output-level term (teacher forecast as soft target).
    pub output_weight: f64,
    /// Weight of the ego action-imitation term.
    pub imitation_weight: f64,
    pub maneuver_weight: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            tau: 0.07,
            xi0: 1.0,
            zeta0: 0.5,
            eta0: 0.5,
            lambda_xi: 0.02,
            lambda_zeta: 0.01,
            lambda_eta: 0.01,
            beta0: 1.0,
            lambda_beta: 0.05,
            alpha: 1.0,
            psi: 1.0,
            negatives: Negatives::Both,
            mode: TransferMode::Full,
            output_weight: 1.0,
            imitation_weight: 1.0,
            maneuver_weight: 1.0,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(CoreError::Config("distill.tau: must be positive".into()));
        }
        let w = [self.xi0, self.zeta0, self.eta0, self.beta0, self.alpha, self.psi, self.output_weight];
        if w.iter().any(|v| !(*v >= 0.0)) {
            return Err(CoreError::Config("distill: loss weights must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Weights {
    pub alpha: f64,
    pub xi: f64,
    pub zeta: f64,
    pub eta: f64,
    pub beta: f64,
    pub psi: f64,
}

/// Loss weights at epoch `t`: decaying transfer terms, saturating PPO term.
pub fn schedule_weights(t: f64, cfg: &DistillConfig) -> Weights {
    Weights {
        alpha: cfg.alpha,
        xi: cfg.xi0 * (-cfg.lambda_xi * t).exp(),
        zeta: cfg.zeta0 * (-cfg.lambda_zeta * t).exp(),
        eta: cfg.eta0 * (-cfg.lambda_eta * t).exp(),
        beta: cfg.beta0 * (1.0 - (-cfg.lambda_beta * t).exp()),
        psi: cfg.psi,
    }
}

/// Masked mean squared error between teacher features `f_t: [t, n, D]` and
/// the adapted student features `f_s: [t, n, d] @ W + b`.
pub fn loss_low(tape: &mut Tape, p: &Bound, f_t: &Tensor, f_s: Var, valid: &[bool]) -> Result<Var> {
    let s = tape.shape(f_s).to_vec();
    let rows = s[0] * s[1];
    let fs = tape.reshape(f_s, &[rows, s[2]])?;
    let adapted = nn::linear(tape, fs, p.var("adapter.w"), Some(p.var("adapter.b")))?;
    let dt = f_t.shape();
    if dt.len() != 3 || dt[0] * dt[1] != rows || tape.shape(adapted)[1] != dt[2] {
        return Err(contract(format!("adapted student features {:?} do not match teacher {:?}", tape.shape(adapted), dt)));
    }
    let ft = tape.constant(f_t.clone().reshaped(&[rows, dt[2]])?);
    masked_mse_rows(tape, adapted, ft, valid)
}

/// Mean squared error over the rows flagged in `valid`.
pub fn masked_mse_rows(tape: &mut Tape, a: Var, b: Var, valid: &[bool]) -> Result<Var> {
    let cols = tape.shape(a)[1];
    let count = valid.iter().filter(|v| **v).count();
    if count == 0 {
        return Err(contract("no valid rows"));
    }
    let diff = tape.sub(a, b)?;
    let diff = nn::mask_rows(tape, diff, valid)?;
    let sq = tape.mul(diff, diff)?;
    let s = tape.sum_all(sq);
    Ok(tape.scale(s, 1.0 / (count * cols) as f64))
}

/// Mean squared difference between attention maps `[t, n, n]` over entries
/// whose query and key agents are both valid.
pub fn loss_att(tape: &mut Tape, a_t: &Tensor, a_s: Var, valid: &[bool]) -> Result<Var> {
    let shape = a_t.shape().to_vec();
    if tape.shape(a_s) != shape.as_slice() {
        return Err(contract(format!("attention maps differ in shape: {:?} vs {:?}", tape.shape(a_s), shape)));
    }
    let (t_h, n) = (shape[0], shape[1]);
    let mut mask = vec![0.0; t_h * n * n];
    let mut count = 0usize;
    for t in 0..t_h {
        for i in 0..n {
            for j in 0..n {
                if valid[t * n + i] && valid[t * n + j] {
                    mask[(t * n + i) * n + j] = 1.0;
                    count += 1;
                }
            }
        }
    }
    if count == 0 {
        return Err(contract("no valid attention entries"));
    }
    let at = tape.constant(a_t.clone());
    let m = tape.constant(Tensor::new(shape, mask)?);
    let diff = tape.sub(a_s, at)?;
    let diff = tape.mul(diff, m)?;
    let sq = tape.mul(diff, diff)?;
    let s = tape.sum_all(sq);
    Ok(tape.scale(s, 1.0 / count as f64))
}

/// Nearest-neighbour resize of `map: [t, h, w]` to `[t, out_h, out_w]`.
pub fn upsample_nearest(map: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let s = map.shape();
    let (t, h, w) = (s[0], s[1], s[2]);
    Tensor::from_fn(&[t, out_h, out_w], |idx| {
        let x = idx % out_w;
        let y = (idx / out_w) % out_h;
        let k = idx / (out_w * out_h);
        map.data()[(k * h + y * h / out_h) * w + x * w / out_w]
    })
}

/// Plain InfoNCE for one anchor: `-log(e^{pos/tau} / (e^{pos/tau} + sum e^{neg/tau}))`.
pub fn info_nce_plain(pos: f64, negs: &[f64], tau: f64) -> f64 {
    let logits: Vec<f64> = std::iter::once(pos).chain(negs.iter().copied()).map(|s| s / tau).collect();
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
    lse - pos / tau
}

fn normalize_rows(t: &Tensor) -> Tensor {
    let cols = t.shape()[1];
    let mut out = t.clone();
    for row in out.data_mut().chunks_mut(cols) {
        let n = (row.iter().map(|v| v * v).sum::<f64>() + 1e-12).sqrt();
        row.iter_mut().for_each(|v| *v /= n);
    }
    out
}

/// Contrastive alignment of per-mode latents. `z_t[b]` and `z_s[b]` are the
/// teacher (constant) and student `[K, dz]` latents of scene `b`.
pub fn loss_sem(tape: &mut Tape, z_t: &[Tensor], z_s: &[Var], negatives: Negatives, tau: f64) -> Result<Var> {
    if z_t.is_empty() || z_t.len() != z_s.len() {
        return Err(contract("contrastive loss needs one teacher latent set per student latent set"));
    }
    let k = z_t[0].shape()[0];
    let bsz = z_t.len();
    let total = bsz * k;
    let zt: Vec<f64> = z_t.iter().flat_map(|z| normalize_rows(z).into_data()).collect();
    let dz = z_t[0].shape()[1];
    let zt = tape.constant(Tensor::new(vec![total, dz], zt)?);
    let zs = tape.concat(z_s, 0)?;
    let zs = nn::l2_normalize(tape, zs, 1e-12)?;
    let zst = tape.transpose(zs)?;
    let sims = tape.matmul(zt, zst)?;
    let sims = tape.scale(sims, 1.0 / tau);
    let mask: Vec<f64> = (0..total)
        .flat_map(|r| {
            (0..total).map(move |c| {
                let (rb, rk, cb, ck) = (r / k, r % k, c / k, c % k);
                let ok = r == c
                    || (rb == cb && matches!(negatives, Negatives::InMode | Negatives::Both))
                    || (rk == ck && matches!(negatives, Negatives::InBatch | Negatives::Both));
                if ok {
                    0.0
                } else {
                    f64::NEG_INFINITY
                }
            })
        })
        .collect();
    let mask = tape.constant(Tensor::new(vec![total, total], mask)?);
    let logits = tape.add(sims, mask)?;
    let ls = tape.log_softmax(logits, 1)?;
    let flat = tape.reshape(ls, &[total * total, 1])?;
    let diag: Vec<usize> = (0..total).map(|r| r * total + r).collect();
    let pos = tape.gather(flat, &diag)?;
    let m = tape.mean_all(pos);
    Ok(tape.neg(m))
}

/// Cached outputs of the frozen teacher for one scenario.
#[derive(Clone, Debug)]
pub struct TeacherTargets {
    pub features: Tensor,
    pub attn: Tensor,
    /// Ego mode latents `[K, dz]`.
    pub ego_latents: Tensor,
    pub traj: Tensor,
    pub log_probs: Tensor,
}

/// Output-level transfer: half squared error of the student mode closest to
/// the teacher's most likely trajectory, plus KL(teacher || student) over
/// mode probabilities. Rows align between teacher and student.
pub fn loss_output(tape: &mut Tape, student: &ForecastOutput, teacher: &TeacherTargets) -> Result<Var> {
    let s = tape.shape(student.traj).to_vec();
    let (k, rows, tf) = (s[0], s[1], s[3]);
    if teacher.traj.shape() != s.as_slice() {
        return Err(contract("teacher and student forecasts differ in shape"));
    }
    let tlp = teacher.log_probs.data();
    let td = teacher.traj.data();
    let mut targets = Vec::with_capacity(rows);
    for r in 0..rows {
        let best = (0..k).max_by(|&a, &b| tlp[r * k + a].total_cmp(&tlp[r * k + b]).then(b.cmp(&a))).expect("k >= 1");
        let base = (best * rows + r) * 2 * tf;
        targets.push((0..tf).map(|t| [td[base + t], td[base + tf + t]]).collect::<Vec<_>>());
    }
    let winners: Vec<usize> = (0..rows).map(|r| argmin(&mode_ades(tape.value(student.traj), r, &targets[r]))).collect();
    let flat = tape.reshape(student.traj, &[k * rows, 2 * tf])?;
    let idx: Vec<usize> = winners.iter().enumerate().map(|(r, &w)| w * rows + r).collect();
    let chosen = tape.gather(flat, &idx)?;
    let gt: Vec<f64> = targets.iter().flat_map(|g| g.iter().map(|p| p[0]).chain(g.iter().map(|p| p[1])).collect::<Vec<_>>()).collect();
    let gt = tape.constant(Tensor::new(vec![rows, 2 * tf], gt)?);
    let diff = tape.sub(chosen, gt)?;
    let sq = tape.mul(diff, diff)?;
    let reg = tape.sum_all(sq);
    let reg = tape.scale(reg, 0.5 / (rows * tf) as f64);
    let pt = tape.constant(teacher.log_probs.map(f64::exp));
    let cross = tape.mul(pt, student.log_probs)?;
    let cross = tape.sum_all(cross);
    let ent: f64 = tlp.iter().map(|l| l.exp() * l).sum();
    let neg_cross = tape.neg(cross);
    let kl = tape.add_scalar(neg_cross, ent);
    let kl = tape.scale(kl, 1.0 / rows as f64);
    Ok(tape.add(reg, kl)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_values() {
        let c = DistillConfig::default();
        let w0 = schedule_weights(0.0, &c);
        assert_eq!((w0.xi, w0.zeta, w0.eta, w0.beta), (1.0, 0.5, 0.5, 0.0));
        let w1 = schedule_weights(10.0, &c);
        assert!(w1.xi < w0.xi && w1.beta > w0.beta);
    }

    #[test]
    fn info_nce_examples() {
        assert_eq!(info_nce_plain(1.0, &[], 0.07), 0.0);
        let v = info_nce_plain(1.0, &[0.0], 0.07);
        assert!((v - (1.0 + (-1.0f64 / 0.07).exp()).ln()).abs() < 1e-15);
        assert!((v - 6.2e-7).abs() < 0.1e-7);
    }

    #[test]
    fn upsample_constant() {
        let m = Tensor::new(vec![1, 1, 1], vec![0.3]).unwrap();
        let u = upsample_nearest(&m, 3, 4);
        assert!(u.data().iter().all(|v| *v == 0.3));
    }

    #[test]
    fn attention_offset() {
        let a = Tensor::full(&[2, 3, 3], 0.2);
        let mut tape = Tape::new();
        let s = tape.constant(Tensor::full(&[2, 3, 3], 0.3));
        let l = loss_att(&mut tape, &a, s, &[true; 6]).unwrap();
        assert!((tape.value(l).item() - 0.01).abs() < 1e-12);
    }
}
