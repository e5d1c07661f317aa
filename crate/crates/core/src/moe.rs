//! Sparse mixture-of-experts feed-forward layer with top-k gating.

use autodiff::{Tape, Tensor, Var};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, CoreError, Result};
use crate::params::{Bound, Init, ParamLabel, ParamStore};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct MoeConfig {
    pub experts: usize,
    pub top_k: usize,
    pub hidden: usize,
    pub load_balance_coef: f64,
    /// Rescale kept gate values to sum to one.
    pub renormalize: bool,
}

impl Default for MoeConfig {
    fn default() -> Self {
        Self { experts: 4, top_k: 2, hidden: 256, load_balance_coef: 0.01, renormalize: false }
    }
}

impl MoeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.top_k == 0 || self.top_k > self.experts {
            return Err(CoreError::Config(format!(
                "teacher.moe.top_k: need 1 <= top_k <= experts ({}), got {}",
                self.experts, self.top_k
            )));
        }
        if self.hidden == 0 {
            return Err(CoreError::Config("teacher.moe.hidden: must be positive".into()));
        }
        Ok(())
    }
}

/// Indices of the `k` largest entries; ties go to the lower index.
pub fn topk_indices(p: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..p.len()).collect();
    idx.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx.sort_unstable();
    idx
}

/// Softmax over `logits`, keeping the `k` largest entries.
pub fn topk_gate_plain(logits: &[f64], k: usize, renormalize: bool) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let z: f64 = e.iter().sum();
    let p: Vec<f64> = e.iter().map(|v| v / z).collect();
    let keep = topk_indices(&p, k);
    let mut g = vec![0.0; p.len()];
    for &i in &keep {
        g[i] = p[i];
    }
    if renormalize {
        let s: f64 = g.iter().sum();
        g.iter_mut().for_each(|v| *v /= s);
    }
    g
}

/// Squared coefficient of variation of per-expert gate mass.
pub fn cv_squared_plain(mass: &[f64]) -> f64 {
    let n = mass.len() as f64;
    let mean = mass.iter().sum::<f64>() / n;
    let var = mass.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / n;
    var / (mean * mean)
}

pub struct Gate {
    /// Dense softmax probabilities `[rows, E]`.
    pub probs: Var,
    /// Kept gate weights `[rows, E]`, zero outside the top-k.
    pub weights: Var,
    pub mask: Vec<bool>,
}

impl Gate {
    pub fn selected(&self, rows: usize, experts: usize, e: usize) -> Vec<usize> {
        (0..rows).filter(|r| self.mask[r * experts + e]).collect()
    }
}

#[derive(Clone, Debug)]
pub struct MoeLayer {
    pub prefix: String,
    pub cfg: MoeConfig,
    pub d: usize,
}

impl MoeLayer {
    pub fn new(prefix: impl Into<String>, cfg: MoeConfig, d: usize) -> Self {
        Self { prefix: prefix.into(), cfg, d }
    }

    fn name(&self, p: &str) -> String {
        format!("{}.{p}", self.prefix)
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng, label: ParamLabel) {
        let (d, hd) = (self.d, self.cfg.hidden);
        let mut init = Init::new(rng);
        store.insert(self.name("gate"), init.xavier(d, self.cfg.experts), label);
        for e in 0..self.cfg.experts {
            store.insert(self.name(&format!("e{e}.w1")), init.xavier(d, hd), label);
            store.insert(self.name(&format!("e{e}.b1")), Tensor::zeros(&[hd]), label);
            store.insert(self.name(&format!("e{e}.w2")), init.xavier(hd, d), label);
            store.insert(self.name(&format!("e{e}.b2")), Tensor::zeros(&[d]), label);
        }
    }

    pub fn gate(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Gate> {
        let rows = tape.shape(x)[0];
        let e = self.cfg.experts;
        let logits = tape.matmul(x, p.var(&self.name("gate")))?;
        let probs = tape.softmax(logits, 1)?;
        let mut mask = vec![false; rows * e];
        {
            let pv = tape.value(probs).data();
            for r in 0..rows {
                for i in topk_indices(&pv[r * e..(r + 1) * e], self.cfg.top_k) {
                    mask[r * e + i] = true;
                }
            }
        }
        let m = tape.constant(Tensor::new(vec![rows, e], mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect())?);
        let mut weights = tape.mul(probs, m)?;
        if self.cfg.renormalize {
            let s = tape.sum(weights, 1, true)?;
            weights = tape.div(weights, s)?;
        }
        Ok(Gate { probs, weights, mask })
    }

    pub fn expert(&self, tape: &mut Tape, p: &Bound, e: usize, x: Var) -> Result<Var> {
        let h = tape.matmul(x, p.var(&self.name(&format!("e{e}.w1"))))?;
        let h = tape.add(h, p.var(&self.name(&format!("e{e}.b1"))))?;
        let h = tape.tanh(h);
        let y = tape.matmul(h, p.var(&self.name(&format!("e{e}.w2"))))?;
        Ok(tape.add(y, p.var(&self.name(&format!("e{e}.b2"))))?)
    }

    fn gate_column(&self, tape: &mut Tape, gate: &Gate, e: usize, rows: Option<&[usize]>) -> Result<Var> {
        let w = match rows {
            Some(r) => tape.gather(gate.weights, r)?,
            None => gate.weights,
        };
        Ok(tape.slice(w, 1, e, e + 1)?)
    }

    /// Evaluates each expert only on the rows routed to it.
    pub fn forward_sparse(&self, tape: &mut Tape, p: &Bound, x: Var, gate: &Gate) -> Result<Var> {
        let rows = tape.shape(x)[0];
        let mut acc = tape.constant(Tensor::zeros(&[rows, self.d]));
        for e in 0..self.cfg.experts {
            let sel = gate.selected(rows, self.cfg.experts, e);
            if sel.is_empty() {
                continue;
            }
            let xs = tape.gather(x, &sel)?;
            let y = self.expert(tape, p, e, xs)?;
            let g = self.gate_column(tape, gate, e, Some(&sel))?;
            let y = tape.mul(y, g)?;
            let y = tape.scatter_add(y, &sel, rows)?;
            acc = tape.add(acc, y)?;
        }
        Ok(acc)
    }

    /// Evaluates every expert on every row and weights by the (masked) gate.
    pub fn forward_dense(&self, tape: &mut Tape, p: &Bound, x: Var, gate: &Gate) -> Result<Var> {
        let rows = tape.shape(x)[0];
        let mut acc = tape.constant(Tensor::zeros(&[rows, self.d]));
        for e in 0..self.cfg.experts {
            let y = self.expert(tape, p, e, x)?;
            let g = self.gate_column(tape, gate, e, None)?;
            let y = tape.mul(y, g)?;
            acc = tape.add(acc, y)?;
        }
        Ok(acc)
    }
}

/// Squared coefficient of variation of the per-expert gate mass over `weights: [rows, E]`.
pub fn load_balance_loss(tape: &mut Tape, weights: Var) -> Result<Var> {
    let shape = tape.shape(weights).to_vec();
    if shape.len() != 2 || shape[0] == 0 {
        return Err(contract("load balance loss needs a non-empty [rows, experts] batch"));
    }
    let mass = tape.sum(weights, 0, false)?;
    let mean = tape.mean_all(mass);
    let centered = tape.sub(mass, mean)?;
    let sq = tape.mul(centered, centered)?;
    let var = tape.mean_all(sq);
    let m2 = tape.mul(mean, mean)?;
    Ok(tape.div(var, m2)?)
}
