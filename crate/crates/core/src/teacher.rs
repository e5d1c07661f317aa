//! High-capacity forecaster: graph encoder, hybrid block, sparse MoE decoder.

use autodiff::{Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::graph::{GraphConfig, GraphEncoder};
use crate::head::{ForecastHead, ForecastOutput, HeadConfig};
use crate::hybrid::{attention_map, HybridBlock, HybridConfig};
use crate::moe::{Gate, MoeConfig, MoeLayer};
use crate::params::{Bound, ParamLabel, ParamStore};
use crate::scene::{DataConfig, Sample};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherConfig {
    pub graph: GraphConfig,
    pub hybrid: HybridConfig,
    pub moe: MoeConfig,
    pub head: HeadConfig,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            graph: GraphConfig::default(),
            hybrid: HybridConfig::default(),
            moe: MoeConfig::default(),
            head: HeadConfig::default(),
        }
    }
}

impl TeacherConfig {
    pub fn validate(&self) -> Result<()> {
        self.graph.validate("teacher.graph")?;
        self.hybrid.validate(self.graph.d_model)?;
        self.moe.validate()
    }
}

pub struct TeacherOutput {
    /// Encoder features `[t_h, n, d]`.
    pub encoder: Var,
    /// Rows of the decoder, one per agent valid at the last step.
    pub rows: Vec<usize>,
    /// `row_of[slot]`.
    pub row_of: Vec<Option<usize>>,
    pub gate: Gate,
    pub forecast: ForecastOutput,
    /// Head-averaged unshifted window attention `[t_h, n, n]`.
    pub attn_map: Tensor,
}

#[derive(Clone, Debug)]
pub struct Teacher {
    pub cfg: TeacherConfig,
    pub encoder: GraphEncoder,
    pub hybrid: HybridBlock,
    pub moe: MoeLayer,
    pub head: ForecastHead,
}

impl Teacher {
    pub fn new(cfg: TeacherConfig, data: &DataConfig) -> Self {
        let d = cfg.graph.d_model;
        Self {
            encoder: GraphEncoder::new("teacher.enc", cfg.graph.clone(), data.feature_dim()),
            hybrid: HybridBlock::new("teacher.hybrid", cfg.hybrid.clone(), d),
            moe: MoeLayer::new("teacher.moe", cfg.moe.clone(), d),
            head: ForecastHead::new("teacher.head", cfg.head.clone(), d, data.t_f, data.dt),
            cfg,
        }
    }

    pub fn init(&self, seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        self.encoder.init(&mut store, &mut rng, ParamLabel::Teacher);
        self.hybrid.init(&mut store, &mut rng, ParamLabel::Teacher);
        self.moe.init(&mut store, &mut rng, ParamLabel::Teacher);
        self.head.init(&mut store, &mut rng, ParamLabel::Teacher);
        store
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, sample: &Sample) -> Result<TeacherOutput> {
        let (t_h, n, d) = (sample.t_h, sample.n, self.cfg.graph.d_model);
        let enc = self.encoder.forward(tape, p, sample)?;
        let hy = self.hybrid.forward(tape, p, enc.features, &sample.valid)?;
        let attn_map = attention_map(&hy.unshifted.0, &hy.unshifted.1, self.cfg.hybrid.attn_heads);
        let last = tape.slice(hy.out, 0, (t_h - 1) * n, t_h * n)?;
        let rows: Vec<usize> = (0..n).filter(|&i| sample.is_valid(t_h - 1, i)).collect();
        let mut row_of = vec![None; n];
        for (r, &i) in rows.iter().enumerate() {
            row_of[i] = Some(r);
        }
        let h = tape.gather(last, &rows)?;
        let gate = self.moe.gate(tape, p, h)?;
        let m = self.moe.forward_sparse(tape, p, h, &gate)?;
        let y = tape.add(h, m)?;
        debug_assert_eq!(tape.shape(y), &[rows.len(), d]);
        let anchors: Vec<[f64; 2]> = rows.iter().map(|&i| sample.anchor[i]).collect();
        let vel: Vec<[f64; 2]> = rows.iter().map(|&i| sample.vel[i]).collect();
        let forecast = self.head.forward(tape, p, y, &anchors, &vel)?;
        Ok(TeacherOutput { encoder: enc.features, rows, row_of, gate, forecast, attn_map })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_synthetic, tensorize};
    use crate::student::{is_student_param, Student, StudentConfig};

    #[test]
    fn forward_shapes_and_probabilities() {
        let data = DataConfig::default();
        let t = Teacher::new(TeacherConfig::default(), &data);
        let store = t.init(1);
        let set = generate_synthetic(2, 3, "dense-merge", &data).unwrap();
        for sc in &set.scenarios {
            let s = tensorize(sc, &data);
            let mut tape = Tape::new();
            let p = store.bind(&mut tape, |_| false);
            let out = t.forward(&mut tape, &p, &s).unwrap();
            let rows = out.rows.len();
            assert_eq!(tape.shape(out.forecast.traj), &[6, rows, 2, 25]);
            assert_eq!(tape.shape(out.encoder), &[15, 20, 64]);
            let lp = tape.value(out.forecast.log_probs).data();
            for r in 0..rows {
                let s: f64 = (0..6).map(|k| lp[r * 6 + k].exp()).sum();
                assert!((s - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn compression_ratio_at_defaults() {
        let data = DataConfig::default();
        let t = Teacher::new(TeacherConfig::default(), &data);
        let st = Student::new(StudentConfig::default(), &data, 64);
        let tn = t.init(0).count(|_| true);
        let sn = st.init(0).count(is_student_param);
        assert!(tn as f64 / sn as f64 >= 5.0, "{tn} / {sn}");
    }
}
