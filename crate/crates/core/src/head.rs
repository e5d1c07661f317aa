//! Multimodal forecast head shared by teacher and student, plus the
//! winner-take-all task loss.

use autodiff::{Tape, Tensor, Var};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::nn;
use crate::params::{Bound, Init, ParamLabel, ParamStore};
use crate::scene::{ForecastMode, MultimodalForecast, Sample};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct HeadConfig {
    pub modes: usize,
    pub latent: usize,
    /// Add `anchor + v * t` under the learned displacements.
    pub cv_prior: bool,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self { modes: 6, latent: 32, cv_prior: true }
    }
}

pub struct ForecastOutput {
    /// Positions `[K, rows, 2, t_f]` (x then y).
    pub traj: Var,
    pub logits: Var,
    pub log_probs: Var,
    /// Mode latents `[rows, K, latent]`.
    pub latents: Var,
}

#[derive(Clone, Debug)]
pub struct ForecastHead {
    pub prefix: String,
    pub cfg: HeadConfig,
    pub d: usize,
    pub t_f: usize,
    pub dt: f64,
}

impl ForecastHead {
    pub fn new(prefix: impl Into<String>, cfg: HeadConfig, d: usize, t_f: usize, dt: f64) -> Self {
        Self { prefix: prefix.into(), cfg, d, t_f, dt }
    }

    fn name(&self, p: &str) -> String {
        format!("{}.{p}", self.prefix)
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng, label: ParamLabel) {
        let (k, dz, tf) = (self.cfg.modes, self.cfg.latent, self.t_f);
        let mut init = Init::new(rng);
        store.insert(self.name("wz"), init.xavier(self.d, k * dz), label);
        store.insert(self.name("bz"), init.uniform(&[k * dz], 0.5), label);
        store.insert(self.name("wp"), init.uniform(&[dz], (1.0 / dz as f64).sqrt()), label);
        let a = 0.1 * (6.0 / (dz + 2 * tf) as f64).sqrt();
        store.insert(self.name("traj"), init.uniform(&[k, dz, 2 * tf], a), label);
        store.insert(self.name("traj_b"), Tensor::zeros(&[2 * tf]), label);
    }

    /// Constant base `[K, rows, 2, t_f]`: anchors plus the optional constant-velocity prior.
    pub fn base(&self, anchors: &[[f64; 2]], vel: &[[f64; 2]]) -> Tensor {
        let (k, rows, tf) = (self.cfg.modes, anchors.len(), self.t_f);
        Tensor::from_fn(&[k, rows, 2, tf], |i| {
            let t = i % tf;
            let c = (i / tf) % 2;
            let r = (i / (2 * tf)) % rows;
            let v = if self.cfg.cv_prior { vel[r][c] * (t + 1) as f64 * self.dt } else { 0.0 };
            anchors[r][c] + v
        })
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, h: Var, anchors: &[[f64; 2]], vel: &[[f64; 2]]) -> Result<ForecastOutput> {
        let rows = tape.shape(h)[0];
        let (k, dz, tf) = (self.cfg.modes, self.cfg.latent, self.t_f);
        let z = nn::linear(tape, h, p.var(&self.name("wz")), Some(p.var(&self.name("bz"))))?;
        let z = tape.tanh(z);
        let latents = tape.reshape(z, &[rows, k, dz])?;
        let lp = tape.mul(latents, p.var(&self.name("wp")))?;
        let logits = tape.sum(lp, 2, false)?;
        let log_probs = tape.log_softmax(logits, 1)?;
        let zk = tape.permute(latents, &[1, 0, 2])?;
        let disp = tape.bmm(zk, p.var(&self.name("traj")))?;
        let disp = tape.add(disp, p.var(&self.name("traj_b")))?;
        let disp = tape.reshape(disp, &[k * rows * 2, tf])?;
        let u = tape.constant(nn::cumsum_matrix(tf));
        let cum = tape.matmul(disp, u)?;
        let cum = tape.reshape(cum, &[k, rows, 2, tf])?;
        let base = tape.constant(self.base(anchors, vel));
        let traj = tape.add(cum, base)?;
        Ok(ForecastOutput { traj, logits, log_probs, latents })
    }
}

/// Converts row `r` of a forecast into the data-model type.
pub fn to_forecast(tape: &Tape, out: &ForecastOutput, r: usize) -> MultimodalForecast {
    let tv = tape.value(out.traj);
    let (k, rows, tf) = (tv.shape()[0], tv.shape()[1], tv.shape()[3]);
    let lp = tape.value(out.log_probs).data();
    let modes = (0..k)
        .map(|m| {
            let base = (m * rows + r) * 2 * tf;
            ForecastMode {
                traj: (0..tf).map(|t| [tv.data()[base + t], tv.data()[base + tf + t]]).collect(),
                prob: lp[r * k + m].exp(),
            }
        })
        .collect();
    MultimodalForecast { modes }
}

/// Average displacement of each mode of row `r` against `gt`.
pub fn mode_ades(traj: &Tensor, r: usize, gt: &[[f64; 2]]) -> Vec<f64> {
    let (k, rows, tf) = (traj.shape()[0], traj.shape()[1], traj.shape()[3]);
    (0..k)
        .map(|m| {
            let base = (m * rows + r) * 2 * tf;
            let d = traj.data();
            (0..tf).map(|t| ((d[base + t] - gt[t][0]).powi(2) + (d[base + tf + t] - gt[t][1]).powi(2)).sqrt()).sum::<f64>()
                / tf as f64
        })
        .collect()
}

/// Index of the smallest value, lowest index on ties.
pub fn argmin(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x < v[best] {
            best = i;
        }
    }
    best
}

/// Winner-take-all loss: half squared error on the closest mode per row plus
/// cross-entropy towards that mode. `rows[i]` is the forecast row and
/// `targets[i]` the matching ground truth.
pub fn wta_loss(tape: &mut Tape, out: &ForecastOutput, rows: &[usize], targets: &[&[[f64; 2]]]) -> Result<Var> {
    if rows.is_empty() {
        return Err(contract("task loss needs at least one target row"));
    }
    let (k, total_rows, tf) = {
        let s = tape.shape(out.traj);
        (s[0], s[1], s[3])
    };
    let winners: Vec<usize> = rows.iter().zip(targets).map(|(&r, gt)| argmin(&mode_ades(tape.value(out.traj), r, gt))).collect();
    let flat = tape.reshape(out.traj, &[k * total_rows, 2 * tf])?;
    let idx: Vec<usize> = rows.iter().zip(&winners).map(|(&r, &w)| w * total_rows + r).collect();
    let chosen = tape.gather(flat, &idx)?;
    let gt = Tensor::new(
        vec![rows.len(), 2 * tf],
        targets.iter().flat_map(|g| g.iter().map(|p| p[0]).chain(g.iter().map(|p| p[1])).collect::<Vec<_>>()).collect(),
    )?;
    let gt = tape.constant(gt);
    let diff = tape.sub(chosen, gt)?;
    let sq = tape.mul(diff, diff)?;
    let reg = tape.sum_all(sq);
    let reg = tape.scale(reg, 0.5 / (rows.len() * tf) as f64);
    let lp = tape.reshape(out.log_probs, &[total_rows * k, 1])?;
    let pick: Vec<usize> = rows.iter().zip(&winners).map(|(&r, &w)| r * k + w).collect();
    let lw = tape.gather(lp, &pick)?;
    let ce = tape.mean_all(lw);
    let ce = tape.neg(ce);
    Ok(tape.add(reg, ce)?)
}

/// Forecast rows and ground truths for every target slot of `sample`;
/// `row_of[slot]` maps slots onto forecast rows.
pub fn targets_for<'a>(sample: &'a Sample, row_of: &[Option<usize>]) -> (Vec<usize>, Vec<&'a [[f64; 2]]>) {
    let mut rows = Vec::new();
    let mut gts = Vec::new();
    for slot in sample.targets() {
        if let Some(r) = row_of[slot] {
            rows.push(r);
            gts.push(sample.future[slot].as_slice());
        }
    }
    (rows, gts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn equal_logits_uniform_and_zero_offsets_at_origin() {
        let head = ForecastHead::new("h", HeadConfig { cv_prior: false, ..Default::default() }, 4, 25, 0.2);
        let mut store = ParamStore::new();
        head.init(&mut store, &mut ChaCha8Rng::seed_from_u64(0), ParamLabel::Body);
        for name in ["h.wp", "h.traj", "h.traj_b"] {
            store.tensor_mut(name).unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut tape = Tape::new();
        let b = store.bind(&mut tape, |_| false);
        let h = tape.constant(Tensor::from_fn(&[1, 4], |i| i as f64 * 0.3));
        let out = head.forward(&mut tape, &b, h, &[[0.0, 0.0]], &[[20.0, 0.0]]).unwrap();
        assert_eq!(tape.shape(out.traj), &[6, 1, 2, 25]);
        for lp in tape.value(out.log_probs).data() {
            assert!((lp.exp() - 1.0 / 6.0).abs() < 1e-12);
        }
        assert!(tape.value(out.traj).data().iter().all(|v| *v == 0.0));
        let f = to_forecast(&tape, &out, 0);
        assert!((f.modes.iter().map(|m| m.prob).sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cumsum_matrix_runs_a_prefix_sum() {
        let u = nn::cumsum_matrix(3);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap());
        let u = tape.constant(u);
        let y = tape.matmul(x, u).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 3.0, 6.0]);
    }
}
