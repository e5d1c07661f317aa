//! Compact deployment network: its own graph encoder, mean-pooled neighbour
//! context, a two-layer GRU, squeeze-and-excitation over channels, and
//! forecast / maneuver / low-rank-adapted policy heads.

use autodiff::{Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::graph::{EncoderOutput, GraphConfig, GraphEncoder};
use crate::head::{ForecastHead, ForecastOutput, HeadConfig};
use crate::nn;
use crate::params::{Bound, Init, ParamLabel, ParamStore};
use crate::scene::{DataConfig, Sample};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct StudentConfig {
    pub graph: GraphConfig,
    pub hidden: usize,
    pub gru_layers: usize,
    pub se_ratio: usize,
    pub head: HeadConfig,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub critic_hidden: usize,
}

impl Default for StudentConfig {
    fn default() -> Self {
        Self {
            graph: GraphConfig::student(),
            hidden: 32,
            gru_layers: 2,
            se_ratio: 16,
            head: HeadConfig::default(),
            lora_rank: 8,
            lora_alpha: 32.0,
            critic_hidden: 64,
        }
    }
}

impl StudentConfig {
    pub fn validate(&self) -> Result<()> {
        self.graph.validate("student.graph")?;
        if self.se_ratio == 0 || self.hidden % self.se_ratio != 0 {
            return Err(CoreError::Config(format!(
                "student.se_ratio: hidden width {} is not divisible by {}",
                self.hidden, self.se_ratio
            )));
        }
        if self.gru_layers == 0 || self.lora_rank == 0 {
            return Err(CoreError::Config("student: gru_layers and lora_rank must be positive".into()));
        }
        Ok(())
    }
}

pub const MANEUVERS: usize = 3;
pub const ACTION_DIM: usize = 2;

pub struct StudentOutput {
    /// Encoder features `[t_h, n, d_s]`.
    pub features: Var,
    pub encoder: EncoderOutput,
    /// Last GRU layer's hidden states `[t_h, n, hidden]`.
    pub hidden: Var,
    /// SE-weighted last-step features `[rows, hidden]`.
    pub feat: Var,
    pub rows: Vec<usize>,
    pub row_of: Vec<Option<usize>>,
    pub forecast: ForecastOutput,
    /// Ego maneuver logits `[1, 3]`.
    pub maneuver_logits: Var,
    /// Ego action mean `[1, 2]`.
    pub action_mean: Var,
    /// Interaction map `[t_h, n, n]`, only when requested.
    pub a_s: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct Student {
    pub cfg: StudentConfig,
    pub encoder: GraphEncoder,
    pub head: ForecastHead,
    pub teacher_width: usize,
}

/// Deployment parameters: everything except the training-only adapter,
/// critic and exploration scale.
pub fn is_student_param(l: ParamLabel) -> bool {
    matches!(l, ParamLabel::Body | ParamLabel::Lora | ParamLabel::FrozenBase)
}

impl Student {
    pub fn new(cfg: StudentConfig, data: &DataConfig, teacher_width: usize) -> Self {
        Self {
            encoder: GraphEncoder::new("student.enc", cfg.graph.clone(), data.feature_dim()),
            head: ForecastHead::new("student.head", cfg.head.clone(), cfg.hidden, data.t_f, data.dt),
            cfg,
            teacher_width,
        }
    }

    pub fn init(&self, seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let body = ParamLabel::Body;
        self.encoder.init(&mut store, &mut rng, body);
        let (h, ds) = (self.cfg.hidden, self.cfg.graph.d_model);
        let mut init = Init::new(&mut rng);
        for l in 0..self.cfg.gru_layers {
            let inp = if l == 0 { 2 * ds } else { h };
            store.insert(format!("student.gru{l}.wx"), init.xavier(inp, 3 * h), body);
            store.insert(format!("student.gru{l}.uh"), init.xavier(h, 2 * h), body);
            store.insert(format!("student.gru{l}.un"), init.xavier(h, h), body);
            store.insert(format!("student.gru{l}.b"), Tensor::zeros(&[3 * h]), body);
        }
        let hr = h / self.cfg.se_ratio;
        store.insert("student.se.w1", init.xavier(h, hr), body);
        store.insert("student.se.w2", init.xavier(hr, h), body);
        store.insert("student.man.w", init.xavier(h, MANEUVERS), body);
        store.insert("student.man.b", Tensor::zeros(&[MANEUVERS]), body);
        let r = self.cfg.lora_rank;
        store.insert("student.policy.w0", init.xavier(h, ACTION_DIM), ParamLabel::FrozenBase);
        store.insert("student.policy.lora_a", init.uniform(&[h, r], 1.0 / (h as f64).sqrt()), ParamLabel::Lora);
        store.insert("student.policy.lora_b", Tensor::zeros(&[r, ACTION_DIM]), ParamLabel::Lora);
        store.insert("student.policy.log_std", Tensor::full(&[ACTION_DIM], (0.3f64).ln()), ParamLabel::PolicyStd);
        let ch = self.cfg.critic_hidden;
        store.insert("critic.w1", init.xavier(h, ch), ParamLabel::Critic);
        store.insert("critic.b1", Tensor::zeros(&[ch]), ParamLabel::Critic);
        store.insert("critic.w2", init.xavier(ch, 1), ParamLabel::Critic);
        store.insert("critic.b2", Tensor::zeros(&[1]), ParamLabel::Critic);
        store.insert("adapter.w", init.xavier(ds, self.teacher_width), ParamLabel::Adapter);
        store.insert("adapter.b", Tensor::zeros(&[self.teacher_width]), ParamLabel::Adapter);
        self.head.init(&mut store, &mut rng, body);
        store
    }

    /// One GRU layer over `x: [t, n, in]`; returns `[t, n, hidden]`.
    pub fn gru_layer(&self, tape: &mut Tape, p: &Bound, l: usize, x: Var) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        let (t_len, n, inp) = (s[0], s[1], s[2]);
        let h = self.cfg.hidden;
        let x2 = tape.reshape(x, &[t_len * n, inp])?;
        let xw = tape.matmul(x2, p.var(&format!("student.gru{l}.wx")))?;
        let xw = tape.add(xw, p.var(&format!("student.gru{l}.b")))?;
        let uh = p.var(&format!("student.gru{l}.uh"));
        let un = p.var(&format!("student.gru{l}.un"));
        let mut hs = tape.constant(Tensor::zeros(&[n, h]));
        let mut outs = Vec::with_capacity(t_len);
        for t in 0..t_len {
            let xt = tape.slice(xw, 0, t * n, (t + 1) * n)?;
            let xz = tape.slice(xt, 1, 0, h)?;
            let xr = tape.slice(xt, 1, h, 2 * h)?;
            let xn = tape.slice(xt, 1, 2 * h, 3 * h)?;
            let hu = tape.matmul(hs, uh)?;
            let hz = tape.slice(hu, 1, 0, h)?;
            let hr = tape.slice(hu, 1, h, 2 * h)?;
            let z = tape.add(xz, hz)?;
            let z = tape.sigmoid(z);
            let r = tape.add(xr, hr)?;
            let r = tape.sigmoid(r);
            let rh = tape.mul(r, hs)?;
            let rn = tape.matmul(rh, un)?;
            let cand = tape.add(xn, rn)?;
            let cand = tape.tanh(cand);
            let delta = tape.sub(hs, cand)?;
            let keep = tape.mul(z, delta)?;
            hs = tape.add(cand, keep)?;
            outs.push(tape.reshape(hs, &[1, n, h])?);
        }
        Ok(tape.concat(&outs, 0)?)
    }

    /// Squeeze-and-excitation over `u: [t, n, hidden]`; returns `(u * s, s)`.
    pub fn se_block(&self, tape: &mut Tape, p: &Bound, u: Var) -> Result<(Var, Var)> {
        let pooled = tape.mean(u, 0, false)?;
        let a = tape.matmul(pooled, p.var("student.se.w1"))?;
        let a = tape.relu(a);
        let s = tape.matmul(a, p.var("student.se.w2"))?;
        let s = tape.sigmoid(s);
        Ok((tape.mul(u, s)?, s))
    }

    /// `x W0 + (alpha / r) (x A) B`.
    pub fn lora(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let base = tape.matmul(x, p.var("student.policy.w0"))?;
        let xa = tape.matmul(x, p.var("student.policy.lora_a"))?;
        let xab = tape.matmul(xa, p.var("student.policy.lora_b"))?;
        let xab = tape.scale(xab, self.cfg.lora_alpha / self.cfg.lora_rank as f64);
        Ok(tape.add(base, xab)?)
    }

    /// Mean of the other valid agents' features at each step, `[t, n, d]`.
    pub fn neighbor_context(&self, tape: &mut Tape, f: Var, sample: &Sample) -> Result<Var> {
        let s = tape.shape(f).to_vec();
        let (t_h, n, _) = (s[0], s[1], s[2]);
        let fp = tape.permute(f, &[0, 2, 1])?;
        let total = tape.sum(fp, 2, true)?;
        let diff = tape.sub(fp, total)?;
        let diff = tape.permute(diff, &[0, 2, 1])?;
        let coef: Vec<f64> = (0..t_h)
            .flat_map(|t| {
                let cnt = (0..n).filter(|&i| sample.is_valid(t, i)).count();
                (0..n).map(move |i| if sample.is_valid(t, i) && cnt > 1 { -1.0 / (cnt - 1) as f64 } else { 0.0 })
            })
            .collect();
        let coef = tape.constant(Tensor::new(vec![t_h, n, 1], coef)?);
        Ok(tape.mul(diff, coef)?)
    }

    /// Row-softmax of scaled hidden-state dot products per step.
    pub fn interaction_map(&self, tape: &mut Tape, hidden: Var, sample: &Sample) -> Result<Var> {
        let (t_h, n) = (sample.t_h, sample.n);
        let ht = tape.transpose(hidden)?;
        let s = tape.bmm(hidden, ht)?;
        let s = tape.scale(s, 1.0 / (self.cfg.hidden as f64).sqrt());
        let mask: Vec<f64> = (0..t_h)
            .flat_map(|t| {
                (0..n).flat_map(move |i| {
                    (0..n).map(move |j| if i == j || sample.is_valid(t, j) { 0.0 } else { f64::NEG_INFINITY })
                })
            })
            .collect();
        let mask = tape.constant(Tensor::new(vec![t_h, n, n], mask)?);
        let s = tape.add(s, mask)?;
        Ok(tape.softmax(s, 2)?)
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, sample: &Sample, internals: bool) -> Result<StudentOutput> {
        let (t_h, n) = (sample.t_h, sample.n);
        let enc = self.encoder.forward(tape, p, sample)?;
        let f = enc.features;
        let ctx = self.neighbor_context(tape, f, sample)?;
        let mut x = tape.concat(&[f, ctx], 2)?;
        for l in 0..self.cfg.gru_layers {
            x = self.gru_layer(tape, p, l, x)?;
        }
        let hidden = x;
        let (u, _) = self.se_block(tape, p, hidden)?;
        let last = tape.slice(u, 0, t_h - 1, t_h)?;
        let last = tape.reshape(last, &[n, self.cfg.hidden])?;
        let rows: Vec<usize> = (0..n).filter(|&i| sample.is_valid(t_h - 1, i)).collect();
        let mut row_of = vec![None; n];
        for (r, &i) in rows.iter().enumerate() {
            row_of[i] = Some(r);
        }
        let feat = tape.gather(last, &rows)?;
        let anchors: Vec<[f64; 2]> = rows.iter().map(|&i| sample.anchor[i]).collect();
        let vel: Vec<[f64; 2]> = rows.iter().map(|&i| sample.vel[i]).collect();
        let forecast = self.head.forward(tape, p, feat, &anchors, &vel)?;
        let ego = tape.slice(feat, 0, 0, 1)?;
        let maneuver_logits = nn::linear(tape, ego, p.var("student.man.w"), Some(p.var("student.man.b")))?;
        let action_mean = self.lora(tape, p, ego)?;
        let a_s = if internals { Some(self.interaction_map(tape, hidden, sample)?) } else { None };
        Ok(StudentOutput { features: f, encoder: enc, hidden, feat, rows, row_of, forecast, maneuver_logits, action_mean, a_s })
    }

    /// Ego feature vector and action mean without recording gradients.
    pub fn policy_features(&self, store: &ParamStore, sample: &Sample) -> Result<(Vec<f64>, [f64; 2])> {
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, |_| false);
        let out = self.forward(&mut tape, &p, sample, false)?;
        let feat = tape.value(out.feat).data()[..self.cfg.hidden].to_vec();
        let m = tape.value(out.action_mean).data();
        Ok((feat, [m[0], m[1]]))
    }
}

/// Value estimate `[rows, 1]` from detached features `x: [rows, hidden]`.
pub fn critic(tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
    let h = nn::linear(tape, x, p.var("critic.w1"), Some(p.var("critic.b1")))?;
    let h = tape.tanh(h);
    nn::linear(tape, h, p.var("critic.w2"), Some(p.var("critic.b2")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::generate_synthetic;

    fn setup() -> (Student, ParamStore, Sample) {
        let data = DataConfig::default();
        let st = Student::new(StudentConfig::default(), &data, 64);
        let store = st.init(3);
        let set = generate_synthetic(5, 1, "mixed", &data).unwrap();
        let s = crate::scene::tensorize(&set.scenarios[0], &data);
        (st, store, s)
    }

    #[test]
    fn lora_fraction_below_one_percent() {
        let (_, store, _) = setup();
        let lora = store.count(|l| l == ParamLabel::Lora);
        let total = store.count(is_student_param);
        assert!((lora as f64) / (total as f64) < 0.01, "{lora}/{total}");
    }

    #[test]
    fn lora_zero_init_matches_base() {
        let (st, store, s) = setup();
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, |_| false);
        let out = st.forward(&mut tape, &p, &s, false).unwrap();
        let ego = tape.slice(out.feat, 0, 0, 1).unwrap();
        let base = tape.matmul(ego, p.var("student.policy.w0")).unwrap();
        assert_eq!(tape.value(base).data(), tape.value(out.action_mean).data());
    }

    #[test]
    fn se_ratio_must_divide_width() {
        let cfg = StudentConfig { hidden: 30, ..Default::default() };
        assert!(matches!(cfg.validate(), Err(CoreError::Config(_))));
    }

    #[test]
    fn interaction_rows_are_stochastic() {
        let (st, store, s) = setup();
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, |_| false);
        let out = st.forward(&mut tape, &p, &s, true).unwrap();
        let a = tape.value(out.a_s.unwrap()).clone();
        let n = s.n;
        for t in 0..s.t_h {
            for i in 0..n {
                let row: f64 = (0..n).map(|j| a.data()[(t * n + i) * n + j]).sum();
                assert!((row - 1.0).abs() < 1e-9);
            }
        }
    }
}
