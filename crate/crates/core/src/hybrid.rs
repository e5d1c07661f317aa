//! Hybrid temporal-spatial block: a selective state-space scan over time,
//! shifted-window attention over the agent axis, and a residual gated fusion.

use autodiff::{Tape, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::params::{Bound, Init, ParamLabel, ParamStore};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct HybridConfig {
    pub d_state: usize,
    pub window: usize,
    pub shift: usize,
    pub attn_heads: usize,
    /// Initial step size range; the step bias is drawn so softplus lands inside it.
    pub delta_min: f64,
    pub delta_max: f64,
}

impl Default for HybridConfig {
    fn default() -> Self {
        Self { d_state: 16, window: 4, shift: 2, attn_heads: 4, delta_min: 0.05, delta_max: 0.1 }
    }
}

impl HybridConfig {
    pub fn validate(&self, d_model: usize) -> Result<()> {
        let bad = |f: &str, m: &str| Err(CoreError::Config(format!("teacher.hybrid.{f}: {m}")));
        if self.d_state == 0 {
            return bad("d_state", "must be positive");
        }
        if self.window == 0 || self.shift >= self.window {
            return bad("shift", "need 0 <= shift < window");
        }
        if self.attn_heads == 0 || d_model % self.attn_heads != 0 {
            return bad("attn_heads", "must divide d_model");
        }
        if !(self.delta_min > 0.0 && self.delta_max >= self.delta_min) {
            return bad("delta_min", "need 0 < delta_min <= delta_max");
        }
        Ok(())
    }
}

/// Zero-order-hold discretisation of `dh/dt = a h + b x` over a step `delta`.
pub fn zoh_discretize(a: f64, b: f64, delta: f64) -> Result<(f64, f64)> {
    if !(delta > 0.0) {
        return Err(CoreError::Autodiff(autodiff::AutodiffError::Domain {
            op: "zoh_discretize",
            msg: format!("step {delta} must be positive"),
        }));
    }
    let a_bar = (delta * a).exp();
    let b_bar = if a.abs() > 1e-8 { (delta * a).exp_m1() / a * b } else { delta * b };
    Ok((a_bar, b_bar))
}

/// Inputs to the plain scan kernel for one sequence. Row-major
/// `delta: [t, d]`, `a: [d, s]`, `b, c: [t, s]`, `d_skip: [d]`.
pub struct ScanInputs<'a> {
    pub x: &'a [f64],
    pub delta: &'a [f64],
    pub a: &'a [f64],
    pub b: &'a [f64],
    pub c: &'a [f64],
    pub d_skip: &'a [f64],
    pub d: usize,
    pub s: usize,
}

/// Sequential recurrence `h_t = a_bar h_{t-1} + b_bar x_t`, `y_t = C h_t + D x_t`.
pub fn selective_scan_plain(inp: &ScanInputs) -> Vec<f64> {
    let (d, s) = (inp.d, inp.s);
    let t_len = inp.x.len() / d;
    let mut h = vec![0.0; d * s];
    let mut y = vec![0.0; t_len * d];
    for t in 0..t_len {
        for c in 0..d {
            let dt = inp.delta[t * d + c];
            let xt = inp.x[t * d + c];
            let mut acc = 0.0;
            for k in 0..s {
                let a = inp.a[c * s + k];
                let a_bar = (dt * a).exp();
                let b_bar = (a_bar - 1.0) / a * inp.b[t * s + k];
                let hv = &mut h[c * s + k];
                *hv = a_bar * *hv + b_bar * xt;
                acc += inp.c[t * s + k] * *hv;
            }
            y[t * d + c] = acc + inp.d_skip[c] * xt;
        }
    }
    y
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Full scan layer on one `[t, d]` sequence with explicit weights, used for
/// profiling. Weights are row-major: `w_delta: [d, d]`, `w_b, w_c: [d, s]`.
#[allow(clippy::too_many_arguments)]
pub fn scan_layer_plain(
    x: &[f64],
    d: usize,
    s: usize,
    w_delta: &[f64],
    b_delta: &[f64],
    w_b: &[f64],
    w_c: &[f64],
    a_log: &[f64],
    d_skip: &[f64],
) -> Vec<f64> {
    let t_len = x.len() / d;
    let proj = |w: &[f64], out: usize| {
        let mut r = vec![0.0; t_len * out];
        for t in 0..t_len {
            for i in 0..d {
                let xv = x[t * d + i];
                for o in 0..out {
                    r[t * out + o] += xv * w[i * out + o];
                }
            }
        }
        r
    };
    let mut delta = proj(w_delta, d);
    for t in 0..t_len {
        for c in 0..d {
            delta[t * d + c] = softplus(delta[t * d + c] + b_delta[c]);
        }
    }
    let b = proj(w_b, s);
    let c = proj(w_c, s);
    let a: Vec<f64> = a_log.iter().map(|v| -v.exp()).collect();
    selective_scan_plain(&ScanInputs { x, delta: &delta, a: &a, b: &b, c: &c, d_skip, d, s })
}

/// Plain single-head dense self-attention over `[t, d]` tokens with `Q = K = V = x`.
pub fn dense_attention_plain(x: &[f64], d: usize) -> Vec<f64> {
    let t = x.len() / d;
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = vec![0.0; t * d];
    let mut row = vec![0.0; t];
    for i in 0..t {
        let qi = &x[i * d..(i + 1) * d];
        let mut m = f64::NEG_INFINITY;
        for j in 0..t {
            let s: f64 = qi.iter().zip(&x[j * d..(j + 1) * d]).map(|(a, b)| a * b).sum::<f64>() * scale;
            row[j] = s;
            m = m.max(s);
        }
        let mut z = 0.0;
        for r in row.iter_mut() {
            *r = (*r - m).exp();
            z += *r;
        }
        let o = &mut out[i * d..(i + 1) * d];
        for j in 0..t {
            let w = row[j] / z;
            for (ov, xv) in o.iter_mut().zip(&x[j * d..(j + 1) * d]) {
                *ov += w * xv;
            }
        }
    }
    out
}

/// Plain non-overlapping window attention over `[t, d]` tokens, window `m`.
pub fn window_attention_plain(x: &[f64], d: usize, m: usize) -> Vec<f64> {
    let t = x.len() / d;
    let mut out = vec![0.0; t * d];
    let mut start = 0;
    while start < t {
        let end = (start + m).min(t);
        let y = dense_attention_plain(&x[start * d..end * d], d);
        out[start * d..end * d].copy_from_slice(&y);
        start = end;
    }
    out
}

/// Token layout for one window-attention layer over `[steps, n]` tokens.
#[derive(Clone, Debug)]
pub struct WindowLayout {
    pub steps: usize,
    pub n: usize,
    pub m: usize,
    pub windows_per_step: usize,
    /// Source row for each windowed slot; `steps * n` points at a zero pad row.
    pub gather: Vec<usize>,
    /// Windowed slot of each real token.
    pub inverse: Vec<usize>,
    /// Additive mask `[steps * windows, heads, m, m]` flattened per window as `[m, m]`.
    pub allowed: Vec<bool>,
}

impl WindowLayout {
    pub fn new(steps: usize, n: usize, m: usize, shift: usize, shifted: bool, valid: &[bool]) -> Self {
        let npad = n.div_ceil(m) * m;
        let nw = npad / m;
        let s = if shifted { shift } else { 0 };
        let pad_row = steps * n;
        let mut gather = Vec::with_capacity(steps * npad);
        let mut inverse = vec![0; steps * n];
        let mut allowed = Vec::with_capacity(steps * nw * m * m);
        for t in 0..steps {
            for w in 0..nw {
                let mut pos = Vec::with_capacity(m);
                for k in 0..m {
                    let raw = w * m + k + s;
                    let p = raw % npad;
                    let wrapped = raw >= npad;
                    let real = p < n;
                    let slot = t * npad + w * m + k;
                    if real {
                        gather.push(t * n + p);
                        inverse[t * n + p] = slot;
                    } else {
                        gather.push(pad_row);
                    }
                    pos.push((real && valid[t * n + p], wrapped));
                }
                for qi in 0..m {
                    for kj in 0..m {
                        let (kv, kw) = pos[kj];
                        let ok = qi == kj || (kv && kw == pos[qi].1);
                        allowed.push(ok);
                    }
                }
            }
        }
        Self { steps, n, m, windows_per_step: nw, gather, inverse, allowed }
    }

    pub fn num_windows(&self) -> usize {
        self.steps * self.windows_per_step
    }
}

pub struct WindowAttnOutput {
    pub out: Var,
    /// Attention probabilities `[windows, heads, m, m]`.
    pub probs: Var,
    pub layout: WindowLayout,
}

pub struct HybridOutput {
    pub y_mamba: Var,
    pub y_swin: Var,
    pub gate: Var,
    /// Block output `x + z`, `[t_h * n, d]` time-major.
    pub out: Var,
    /// Unshifted-layer probabilities and layout, for attention maps.
    pub unshifted: (Tensor, WindowLayout),
}

#[derive(Clone, Debug)]
pub struct HybridBlock {
    pub prefix: String,
    pub cfg: HybridConfig,
    pub d: usize,
}

impl HybridBlock {
    pub fn new(prefix: impl Into<String>, cfg: HybridConfig, d: usize) -> Self {
        Self { prefix: prefix.into(), cfg, d }
    }

    fn name(&self, p: &str) -> String {
        format!("{}.{p}", self.prefix)
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng, label: ParamLabel) {
        let (d, s) = (self.d, self.cfg.d_state);
        let b_delta: Vec<f64> = (0..d)
            .map(|_| {
                let target = rng.gen_range(self.cfg.delta_min..=self.cfg.delta_max);
                target.exp_m1().ln()
            })
            .collect();
        let mut init = Init::new(rng);
        let mut w_delta = init.xavier(d, d);
        for v in w_delta.data_mut() {
            *v *= 0.1;
        }
        store.insert(self.name("ssm.w_delta"), w_delta, label);
        store.insert(self.name("ssm.b_delta"), Tensor::from_vec(b_delta), label);
        store.insert(self.name("ssm.w_b"), init.xavier(d, s), label);
        store.insert(self.name("ssm.w_c"), init.xavier(d, s), label);
        store.insert(self.name("ssm.a_log"), Tensor::from_fn(&[d, s], |i| ((i % s) as f64 + 1.0).ln()), label);
        store.insert(self.name("ssm.d"), Tensor::ones(&[d]), label);
        let h = self.cfg.attn_heads;
        let m = self.cfg.window;
        for l in 0..2 {
            for p in ["wq", "wk", "wv", "wo"] {
                store.insert(self.name(&format!("attn{l}.{p}")), init.xavier(d, d), label);
            }
            store.insert(self.name(&format!("attn{l}.bias")), Tensor::zeros(&[h, 2 * m - 1]), label);
        }
        store.insert(self.name("fuse.w"), init.xavier(2 * d, d), label);
        store.insert(self.name("fuse.b"), Tensor::zeros(&[d]), label);
    }

    /// Selective scan over `x: [t, b, d]` (time-major, `b` independent sequences).
    pub fn scan(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        let (t_len, bsz, d) = (shape[0], shape[1], shape[2]);
        let s = self.cfg.d_state;
        let x2 = tape.reshape(x, &[t_len * bsz, d])?;
        let dl = tape.matmul(x2, p.var(&self.name("ssm.w_delta")))?;
        let dl = tape.add(dl, p.var(&self.name("ssm.b_delta")))?;
        let delta = tape.softplus(dl);
        let bm = tape.matmul(x2, p.var(&self.name("ssm.w_b")))?;
        let cm = tape.matmul(x2, p.var(&self.name("ssm.w_c")))?;
        let ea = tape.exp(p.var(&self.name("ssm.a_log")));
        let a = tape.neg(ea);
        let ones_s = tape.constant(Tensor::ones(&[bsz, 1, s]));
        let ones_d = tape.constant(Tensor::ones(&[bsz, d, 1]));
        let d_skip = p.var(&self.name("ssm.d"));

        let mut h: Option<Var> = None;
        let mut ys = Vec::with_capacity(t_len);
        for t in 0..t_len {
            let rows = (t * bsz, (t + 1) * bsz);
            let dt = tape.slice(delta, 0, rows.0, rows.1)?;
            let dt = tape.reshape(dt, &[bsz, d, 1])?;
            let dt_rep = tape.bmm(dt, ones_s)?;
            let da = tape.mul(dt_rep, a)?;
            let a_bar = tape.exp(da);
            let em1 = tape.add_scalar(a_bar, -1.0);
            let coef = tape.div(em1, a)?;
            let bt = tape.slice(bm, 0, rows.0, rows.1)?;
            let bt = tape.reshape(bt, &[bsz, 1, s])?;
            let b_rep = tape.bmm(ones_d, bt)?;
            let b_bar = tape.mul(coef, b_rep)?;
            let xt = tape.slice(x2, 0, rows.0, rows.1)?;
            let xt3 = tape.reshape(xt, &[bsz, d, 1])?;
            let u = tape.mul(b_bar, xt3)?;
            let hn = match h {
                Some(prev) => {
                    let decay = tape.mul(a_bar, prev)?;
                    tape.add(decay, u)?
                }
                None => u,
            };
            h = Some(hn);
            let ct = tape.slice(cm, 0, rows.0, rows.1)?;
            let ct = tape.reshape(ct, &[bsz, s, 1])?;
            let yc = tape.bmm(hn, ct)?;
            let yc = tape.reshape(yc, &[bsz, d])?;
            let skip = tape.mul(xt, d_skip)?;
            let yt = tape.add(yc, skip)?;
            ys.push(tape.reshape(yt, &[1, bsz, d])?);
        }
        Ok(tape.concat(&ys, 0)?)
    }

    /// One window-attention layer over `x: [steps * n, d]` time-major tokens.
    pub fn window_attention(
        &self,
        tape: &mut Tape,
        p: &Bound,
        layer: usize,
        x: Var,
        steps: usize,
        n: usize,
        valid: &[bool],
        shifted: bool,
    ) -> Result<WindowAttnOutput> {
        let d = self.d;
        let (h, m) = (self.cfg.attn_heads, self.cfg.window);
        let dh = d / h;
        let layout = WindowLayout::new(steps, n, m, self.cfg.shift, shifted, valid);
        let nw = layout.num_windows();
        let zero = tape.constant(Tensor::zeros(&[1, d]));
        let ext = tape.concat(&[x, zero], 0)?;
        let xw = tape.gather(ext, &layout.gather)?;
        let split_heads = |tape: &mut Tape, v: Var| -> Result<Var> {
            let v = tape.reshape(v, &[nw, m, h, dh])?;
            let v = tape.permute(v, &[0, 2, 1, 3])?;
            Ok(tape.reshape(v, &[nw * h, m, dh])?)
        };
        let name = |s: &str| self.name(&format!("attn{layer}.{s}"));
        let q = tape.matmul(xw, p.var(&name("wq")))?;
        let k = tape.matmul(xw, p.var(&name("wk")))?;
        let v = tape.matmul(xw, p.var(&name("wv")))?;
        let q = split_heads(tape, q)?;
        let k = split_heads(tape, k)?;
        let v = split_heads(tape, v)?;
        let kt = tape.transpose(k)?;
        let scores = tape.bmm(q, kt)?;
        let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
        let scores = tape.reshape(scores, &[nw, h, m, m])?;

        let table = tape.reshape(p.var(&name("bias")), &[h * (2 * m - 1), 1])?;
        let idx: Vec<usize> = (0..h)
            .flat_map(|hh| (0..m).flat_map(move |i| (0..m).map(move |j| hh * (2 * m - 1) + i + m - 1 - j)))
            .collect();
        let bias = tape.gather(table, &idx)?;
        let bias = tape.reshape(bias, &[h, m, m])?;
        let scores = tape.add(scores, bias)?;
        let mask: Vec<f64> = (0..nw)
            .flat_map(|w| {
                let allowed = &layout.allowed[w * m * m..(w + 1) * m * m];
                (0..h).flat_map(move |_| allowed.iter().map(|&ok| if ok { 0.0 } else { f64::NEG_INFINITY }))
            })
            .collect();
        let mask = tape.constant(Tensor::new(vec![nw, h, m, m], mask)?);
        let scores = tape.add(scores, mask)?;
        let probs = tape.softmax(scores, 3)?;
        let pr = tape.reshape(probs, &[nw * h, m, m])?;
        let o = tape.bmm(pr, v)?;
        let o = tape.reshape(o, &[nw, h, m, dh])?;
        let o = tape.permute(o, &[0, 2, 1, 3])?;
        let o = tape.reshape(o, &[nw * m, d])?;
        let o = tape.matmul(o, p.var(&name("wo")))?;
        let o = tape.gather(o, &layout.inverse)?;
        let o = crate::nn::mask_rows(tape, o, valid)?;
        Ok(WindowAttnOutput { out: o, probs, layout })
    }

    /// `z = g * y_m + (1 - g) * y_s` with `g = sigmoid([y_m, y_s] W_g + b_g)`.
    pub fn gated_fusion(&self, tape: &mut Tape, p: &Bound, y_m: Var, y_s: Var) -> Result<(Var, Var)> {
        let cat = tape.concat(&[y_m, y_s], 1)?;
        let logits = tape.matmul(cat, p.var(&self.name("fuse.w")))?;
        let logits = tape.add(logits, p.var(&self.name("fuse.b")))?;
        let g = tape.sigmoid(logits);
        let a = tape.mul(g, y_m)?;
        let og = tape.one_minus(g);
        let b = tape.mul(og, y_s)?;
        Ok((tape.add(a, b)?, g))
    }

    /// Block over `x: [t_h, n, d]`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var, valid: &[bool]) -> Result<HybridOutput> {
        let shape = tape.shape(x).to_vec();
        let (t_h, n, d) = (shape[0], shape[1], shape[2]);
        let y_m = self.scan(tape, p, x)?;
        let y_m = tape.reshape(y_m, &[t_h * n, d])?;
        let y_m = crate::nn::mask_rows(tape, y_m, valid)?;
        let w0 = self.window_attention(tape, p, 0, y_m, t_h, n, valid, false)?;
        let y1 = tape.add(y_m, w0.out)?;
        let w1 = self.window_attention(tape, p, 1, y1, t_h, n, valid, true)?;
        let y_s = tape.add(y1, w1.out)?;
        let (z, gate) = self.gated_fusion(tape, p, y_m, y_s)?;
        let x2 = tape.reshape(x, &[t_h * n, d])?;
        let out = tape.add(x2, z)?;
        let probs = tape.value(w0.probs).clone();
        Ok(HybridOutput { y_mamba: y_m, y_swin: y_s, gate, out, unshifted: (probs, w0.layout) })
    }
}

/// Head-averaged, block-diagonal attention map `[t_h, n, n]` from an
/// unshifted layer's probabilities.
pub fn attention_map(probs: &Tensor, layout: &WindowLayout, heads: usize) -> Tensor {
    let (steps, n, m) = (layout.steps, layout.n, layout.m);
    let npad = layout.windows_per_step * m;
    let mut out = vec![0.0; steps * n * n];
    let pd = probs.data();
    for t in 0..steps {
        for w in 0..layout.windows_per_step {
            let win = t * layout.windows_per_step + w;
            for qi in 0..m {
                let sq = t * npad + w * m + qi;
                let q_src = layout.gather[sq];
                if q_src >= steps * n {
                    continue;
                }
                for kj in 0..m {
                    let k_src = layout.gather[t * npad + w * m + kj];
                    if k_src >= steps * n {
                        continue;
                    }
                    let mut acc = 0.0;
                    for h in 0..heads {
                        acc += pd[((win * heads + h) * m + qi) * m + kj];
                    }
                    let (i, j) = (q_src - t * n, k_src - t * n);
                    out[(t * n + i) * n + j] = acc / heads as f64;
                }
            }
        }
    }
    Tensor::new(vec![steps, n, n], out).expect("consistent shape")
}
