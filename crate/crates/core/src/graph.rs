//! Proximity graph encoder: causal temporal convolution followed by stacked
//! graph-attention layers, each normalised by RMSNorm.

use autodiff::{Tape, Tensor, Var};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::nn;
use crate::params::{Bound, Init, ParamLabel, ParamStore};
use crate::scene::{Sample, Scene};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct GraphConfig {
    pub r_thresh: f64,
    pub sigma: f64,
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub eps: f64,
    pub conv_width: usize,
    pub leaky_slope: f64,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self { r_thresh: 50.0, sigma: 10.0, d_model: 64, heads: 4, layers: 2, eps: 1e-6, conv_width: 4, leaky_slope: 0.2 }
    }
}

impl GraphConfig {
    pub fn student() -> Self {
        Self { d_model: 16, heads: 2, ..Self::default() }
    }

    pub fn validate(&self, section: &str) -> Result<()> {
        let bad = |f: &str, m: &str| Err(CoreError::Config(format!("{section}.{f}: {m}")));
        if !(self.r_thresh > 0.0) {
            return bad("r_thresh", "must be positive");
        }
        if !(self.sigma > 0.0) {
            return bad("sigma", "must be positive");
        }
        if !(self.eps > 0.0) {
            return bad("eps", "must be positive");
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return bad("heads", "must divide d_model");
        }
        if self.conv_width == 0 {
            return bad("conv_width", "must be at least 1");
        }
        if self.layers == 0 {
            return bad("layers", "must be at least 1");
        }
        Ok(())
    }
}

/// Proximity weights over `n` agents; masked agents get all-zero rows and
/// columns. `a[i * n + j]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Adjacency {
    pub n: usize,
    pub a: Vec<f64>,
}

impl Adjacency {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.a[i * self.n + j]
    }
}

pub fn adjacency_weight(d: f64, cfg: &GraphConfig) -> f64 {
    if d < cfg.r_thresh {
        (-d * d / (2.0 * cfg.sigma * cfg.sigma)).exp()
    } else {
        0.0
    }
}

pub fn build_adjacency(pos: &[[f64; 2]], valid: &[bool], cfg: &GraphConfig) -> Adjacency {
    let n = pos.len();
    let mut a = vec![0.0; n * n];
    for i in 0..n {
        if !valid[i] {
            continue;
        }
        a[i * n + i] = 1.0;
        for j in 0..i {
            if !valid[j] {
                continue;
            }
            let d = ((pos[i][0] - pos[j][0]).powi(2) + (pos[i][1] - pos[j][1]).powi(2)).sqrt();
            let w = adjacency_weight(d, cfg);
            a[i * n + j] = w;
            a[j * n + i] = w;
        }
    }
    Adjacency { n, a }
}

/// Adjacency over `[ego, neighbours...]` of one scene.
pub fn scene_adjacency(scene: &Scene, cfg: &GraphConfig) -> Adjacency {
    let pos: Vec<[f64; 2]> =
        std::iter::once([scene.ego.x, scene.ego.y]).chain(scene.neighbors.iter().map(|(_, s)| [s.x, s.y])).collect();
    build_adjacency(&pos, &vec![true; pos.len()], cfg)
}

/// `out[t] = sum_k kernel[k] * x[t - k]` with zero left padding.
pub fn causal_conv1d(x: &[f64], kernel: &[f64]) -> Result<Vec<f64>> {
    if kernel.is_empty() || kernel.len() > x.len() {
        return Err(CoreError::Config(format!(
            "kernel width {} does not fit a window of {}",
            kernel.len(),
            x.len()
        )));
    }
    Ok((0..x.len()).map(|t| kernel.iter().enumerate().filter(|(k, _)| *k <= t).map(|(k, w)| w * x[t - k]).sum()).collect())
}

/// Directed edges `(dst, src)` over flattened `t * n + i` nodes, self-loops
/// included, sorted by destination.
#[derive(Clone, Debug, Default)]
pub struct EdgeList {
    pub dst: Vec<usize>,
    pub src: Vec<usize>,
}

pub fn edge_list(sample: &Sample, cfg: &GraphConfig) -> EdgeList {
    let n = sample.n;
    let mut e = EdgeList::default();
    for t in 0..sample.t_h {
        let base = t * n;
        let adj = build_adjacency(&sample.pos[base..base + n], &sample.valid[base..base + n], cfg);
        for i in 0..n {
            for j in 0..n {
                if adj.get(i, j) > 0.0 {
                    e.dst.push(base + i);
                    e.src.push(base + j);
                }
            }
        }
    }
    e
}

/// Attention weights of one layer, `[edges, heads]`.
#[derive(Clone, Debug)]
pub struct LayerAttention {
    pub alpha: Tensor,
}

pub struct EncoderOutput {
    /// `[t_h, n, d_model]`.
    pub features: Var,
    pub attention: Vec<LayerAttention>,
    pub edges: EdgeList,
}

#[derive(Clone, Debug)]
pub struct GraphEncoder {
    pub prefix: String,
    pub cfg: GraphConfig,
    pub d_in: usize,
}

impl GraphEncoder {
    pub fn new(prefix: impl Into<String>, cfg: GraphConfig, d_in: usize) -> Self {
        Self { prefix: prefix.into(), cfg, d_in }
    }

    fn name(&self, p: &str) -> String {
        format!("{}.{p}", self.prefix)
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng, label: ParamLabel) {
        let d = self.cfg.d_model;
        let dh = d / self.cfg.heads;
        let mut init = Init::new(rng);
        for k in 0..self.cfg.conv_width {
            let mut w = init.xavier(self.d_in, d);
            for v in w.data_mut() {
                *v /= self.cfg.conv_width as f64;
            }
            store.insert(self.name(&format!("conv.w{k}")), w, label);
        }
        store.insert(self.name("conv.b"), Tensor::zeros(&[d]), label);
        for l in 0..self.cfg.layers {
            store.insert(self.name(&format!("gat{l}.w")), init.xavier(d, d), label);
            let a = (6.0 / (2 * dh) as f64).sqrt();
            store.insert(self.name(&format!("gat{l}.a_dst")), init.uniform(&[self.cfg.heads, dh], a), label);
            store.insert(self.name(&format!("gat{l}.a_src")), init.uniform(&[self.cfg.heads, dh], a), label);
            store.insert(self.name(&format!("norm{l}.g")), Tensor::ones(&[d]), label);
        }
    }

    /// Causal convolution of `x: [t_h, n, d_in]` along time; returns `[t_h * n, d_model]`.
    pub fn conv(&self, tape: &mut Tape, b: &Bound, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        let (t_h, n, d_in) = (shape[0], shape[1], shape[2]);
        let w = self.cfg.conv_width;
        if w > t_h {
            return Err(CoreError::Config(format!("conv_width {w} exceeds the {t_h}-step window")));
        }
        let flat = tape.reshape(x, &[t_h, n * d_in])?;
        let padded = if w > 1 {
            let z = tape.constant(Tensor::zeros(&[w - 1, n * d_in]));
            tape.concat(&[z, flat], 0)?
        } else {
            flat
        };
        let mut acc: Option<Var> = None;
        for k in 0..w {
            let start = w - 1 - k;
            let xs = tape.slice(padded, 0, start, start + t_h)?;
            let xs = tape.reshape(xs, &[t_h * n, d_in])?;
            let y = tape.matmul(xs, b.var(&self.name(&format!("conv.w{k}"))))?;
            acc = Some(match acc {
                Some(a) => tape.add(a, y)?,
                None => y,
            });
        }
        let acc = acc.expect("conv_width >= 1");
        Ok(tape.add(acc, b.var(&self.name("conv.b")))?)
    }

    /// One attention layer over `h: [nodes, d]`. Returns `(h', alpha)`.
    pub fn gat_layer(&self, tape: &mut Tape, b: &Bound, l: usize, h: Var, edges: &EdgeList) -> Result<(Var, Var)> {
        let nodes = tape.shape(h)[0];
        let (d, heads) = (self.cfg.d_model, self.cfg.heads);
        let dh = d / heads;
        let wh = tape.matmul(h, b.var(&self.name(&format!("gat{l}.w"))))?;
        let wh3 = tape.reshape(wh, &[nodes, heads, dh])?;
        let sd = tape.mul(wh3, b.var(&self.name(&format!("gat{l}.a_dst"))))?;
        let s_dst = tape.sum(sd, 2, false)?;
        let ss = tape.mul(wh3, b.var(&self.name(&format!("gat{l}.a_src"))))?;
        let s_src = tape.sum(ss, 2, false)?;
        let ed = tape.gather(s_dst, &edges.dst)?;
        let es = tape.gather(s_src, &edges.src)?;
        let e = tape.add(ed, es)?;
        let e = tape.leaky_relu(e, self.cfg.leaky_slope);

        // Per-destination max shift; softmax is invariant to it.
        let mut m = vec![f64::NEG_INFINITY; nodes * heads];
        {
            let ev = tape.value(e).data();
            for (k, &dst) in edges.dst.iter().enumerate() {
                for hh in 0..heads {
                    let v = ev[k * heads + hh];
                    if v > m[dst * heads + hh] {
                        m[dst * heads + hh] = v;
                    }
                }
            }
        }
        let shift: Vec<f64> =
            edges.dst.iter().flat_map(|&dst| (0..heads).map(move |hh| (dst, hh))).map(|(dst, hh)| m[dst * heads + hh]).collect();
        let shift = tape.constant(Tensor::new(vec![edges.dst.len(), heads], shift)?);
        let e = tape.sub(e, shift)?;
        let ex = tape.exp(e);
        let den = tape.scatter_add(ex, &edges.dst, nodes)?;
        let den_e = tape.gather(den, &edges.dst)?;
        let alpha = tape.div(ex, den_e)?;

        let msgs = tape.gather(wh3, &edges.src)?;
        let a3 = tape.reshape(alpha, &[edges.dst.len(), heads, 1])?;
        let weighted = tape.mul(msgs, a3)?;
        let agg = tape.scatter_add(weighted, &edges.dst, nodes)?;
        let agg = tape.reshape(agg, &[nodes, d])?;
        Ok((tape.tanh(agg), alpha))
    }

    pub fn forward(&self, tape: &mut Tape, b: &Bound, sample: &Sample) -> Result<EncoderOutput> {
        let x = tape.constant(sample.feats.clone());
        let edges = edge_list(sample, &self.cfg);
        self.forward_with(tape, b, x, sample, edges)
    }

    /// Forward pass on an explicit input variable `x: [t_h, n, d_in]`.
    pub fn forward_with(&self, tape: &mut Tape, b: &Bound, x: Var, sample: &Sample, edges: EdgeList) -> Result<EncoderOutput> {
        let (t_h, n, d) = (sample.t_h, sample.n, self.cfg.d_model);
        let mut h = self.conv(tape, b, x)?;
        let mut attention = Vec::with_capacity(self.cfg.layers);
        for l in 0..self.cfg.layers {
            let (g, alpha) = self.gat_layer(tape, b, l, h, &edges)?;
            attention.push(LayerAttention { alpha: tape.value(alpha).clone() });
            h = nn::rmsnorm(tape, g, b.var(&self.name(&format!("norm{l}.g"))), self.cfg.eps)?;
        }
        let features = tape.reshape(h, &[t_h, n, d])?;
        Ok(EncoderOutput { features, attention, edges })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adjacency_values() {
        let cfg = GraphConfig::default();
        assert_eq!(adjacency_weight(0.0, &cfg), 1.0);
        assert!((adjacency_weight(30.0, &cfg) - (-4.5f64).exp()).abs() < 1e-12);
        assert_eq!(adjacency_weight(50.0, &cfg), 0.0);
    }

    #[test]
    fn adjacency_symmetric_and_masked() {
        let cfg = GraphConfig::default();
        let pos = [[0.0, 0.0], [10.0, 3.0], [-20.0, 1.0], [60.0, 0.0]];
        let a = build_adjacency(&pos, &[true, true, false, true], &cfg);
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(a.get(i, j), a.get(j, i));
            }
            assert_eq!(a.get(2, i), 0.0);
        }
        assert_eq!(a.get(0, 3), 0.0);
        assert_eq!(a.get(1, 1), 1.0);
    }

    #[test]
    fn conv_examples() {
        assert_eq!(causal_conv1d(&[1.0, 2.0, 3.0], &[1.0]).unwrap(), vec![1.0, 2.0, 3.0]);
        assert_eq!(causal_conv1d(&[0.0, 2.0, 4.0], &[0.5, 0.5]).unwrap(), vec![0.0, 1.0, 3.0]);
        assert!(matches!(causal_conv1d(&[1.0], &[1.0, 1.0]), Err(CoreError::Config(_))));
    }

    #[test]
    fn rmsnorm_example() {
        let y = nn::rmsnorm_plain(&[3.0, 4.0], &[1.0, 1.0], 0.0);
        assert!((y[0] - 0.848528137).abs() < 1e-8);
        assert!((y[1] - 1.131370850).abs() < 1e-8);
    }
}
