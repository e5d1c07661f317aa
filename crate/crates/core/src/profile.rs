//! Wall-clock profiles: sequence-length scaling of scan versus dense
//! attention, agent-count scaling, and per-module latency.

use std::time::Instant;

use autodiff::Tape;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::{CoreError, Result};
use crate::hybrid::{dense_attention_plain, scan_layer_plain};
use crate::scene::{
    road_context, tensorize, AgentFuture, AgentState, Maneuver, ObservationWindow, Sample, Scenario, Scene,
};
use crate::student::Student;
use crate::teacher::Teacher;

pub const SEQ_LENGTHS: [usize; 4] = [32, 64, 128, 256];
pub const AGENT_COUNTS: [usize; 5] = [5, 10, 15, 20, 30];
pub const MODULES: [&str; 5] = [
    "Surround-aware GATv2 encoder",
    "Hybrid Mamba–SWA block",
    "GRU–SE encoder",
    "MoE decoder / LoRA head",
    "Output projection & head",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum What {
    ScanVsAttn,
    AgentsScaling,
    ModuleLatency,
}

impl std::str::FromStr for What {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "scan-vs-attn" => What::ScanVsAttn,
            "agents-scaling" => What::AgentsScaling,
            "module-latency" => What::ModuleLatency,
            _ => {
                return Err(CoreError::Config(format!(
                    "unknown profile `{s}` (expected scan-vs-attn, agents-scaling or module-latency)"
                )))
            }
        })
    }
}

/// Medians of `reps` timings per closure, timed round-robin so slow periods of
/// the machine hit every closure alike. One untimed warm-up round.
pub fn interleaved_median_ms(reps: usize, fs: &mut [&mut dyn FnMut()]) -> Vec<f64> {
    let mut samples = vec![Vec::with_capacity(reps); fs.len()];
    for rep in 0..=reps.max(1) {
        for (f, v) in fs.iter_mut().zip(samples.iter_mut()) {
            let t = Instant::now();
            f();
            if rep > 0 {
                v.push(t.elapsed().as_secs_f64() * 1e3);
            }
        }
    }
    samples
        .into_iter()
        .map(|mut v| {
            v.sort_by(f64::total_cmp);
            v[v.len() / 2]
        })
        .collect()
}

#[derive(Clone, Debug, Serialize)]
pub struct SeqRow {
    pub t: usize,
    pub scan_ms: f64,
    pub attention_ms: f64,
}

/// Single-sequence scan layer versus dense self-attention at width `d`.
pub fn scan_vs_attention(lengths: &[usize], d: usize, s: usize, reps: usize, seed: u64) -> Vec<SeqRow> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rand = |n: usize, a: f64| -> Vec<f64> { (0..n).map(|_| rng.gen_range(-a..a)).collect() };
    let w_delta = rand(d * d, 0.1);
    let b_delta = rand(d, 0.1);
    let w_b = rand(d * s, 0.1);
    let w_c = rand(d * s, 0.1);
    let a_log = rand(d * s, 1.0);
    let d_skip = rand(d, 1.0);
    let inputs: Vec<Vec<f64>> = lengths.iter().map(|&t| rand(t * d, 1.0)).collect();
    let mut scans: Vec<Box<dyn FnMut() + '_>> = Vec::new();
    let mut attns: Vec<Box<dyn FnMut() + '_>> = Vec::new();
    for x in &inputs {
        let (w_delta, b_delta, w_b, w_c, a_log, d_skip) = (&w_delta, &b_delta, &w_b, &w_c, &a_log, &d_skip);
        scans.push(Box::new(move || {
            std::hint::black_box(scan_layer_plain(x, d, s, w_delta, b_delta, w_b, w_c, a_log, d_skip));
        }));
        attns.push(Box::new(move || {
            std::hint::black_box(dense_attention_plain(x, d));
        }));
    }
    let mut all: Vec<&mut dyn FnMut()> = scans.iter_mut().chain(attns.iter_mut()).map(|f| &mut **f as &mut dyn FnMut()).collect();
    let ms = interleaved_median_ms(reps, &mut all);
    let k = lengths.len();
    lengths.iter().enumerate().map(|(i, &t)| SeqRow { t, scan_ms: ms[i], attention_ms: ms[k + i] }).collect()
}

/// Scene with `n` agents on three lanes at a fixed spacing, so the number of
/// neighbours within the interaction radius stays roughly constant.
pub fn uniform_density_sample(n: usize, cfg: &RunConfig) -> Sample {
    let mut data = cfg.data.clone();
    data.n_max = n;
    let spacing = 30.0;
    let place = |i: usize, t: usize| {
        let lane = i % data.lanes;
        let back = (data.t_h - 1 - t) as f64 * data.dt;
        let x = (i / data.lanes) as f64 * spacing - 20.0 * back;
        AgentState { x, y: lane as f64 * data.lane_width, v: 20.0, theta: 0.0, a: 0.0, agent_type: 0 }
    };
    let scenes = (0..data.t_h)
        .map(|t| {
            let ego = place(0, t);
            Scene {
                ego,
                neighbors: (1..n).map(|i| (i as u32, place(i, t))).collect(),
                context: road_context(ego.y, &data),
            }
        })
        .collect();
    let futures = (0..n)
        .map(|i| {
            let p = place(i, data.t_h - 1);
            AgentFuture { id: i as u32, traj: (1..=data.t_f).map(|k| [p.x + 20.0 * k as f64 * data.dt, p.y]).collect() }
        })
        .collect();
    let sc = Scenario { window: ObservationWindow { scenes, dt: data.dt }, futures, label: Maneuver::LaneKeep, forecast: None, seed: 0 };
    tensorize(&sc, &data)
}

#[derive(Clone, Debug, Serialize)]
pub struct AgentRow {
    pub agents: usize,
    pub student_ms: f64,
    pub teacher_ms: f64,
}

pub fn agents_scaling(counts: &[usize], cfg: &RunConfig, reps: usize) -> Vec<AgentRow> {
    let teacher = Teacher::new(cfg.teacher.clone(), &cfg.data);
    let student = Student::new(cfg.student.clone(), &cfg.data, cfg.teacher.graph.d_model);
    let ts = teacher.init(0);
    let ss = student.init(0);
    let samples: Vec<Sample> = counts.iter().map(|&n| uniform_density_sample(n, cfg)).collect();
    let time = |reps: usize, run: &dyn Fn(&Sample)| {
        let mut fs: Vec<Box<dyn FnMut() + '_>> = samples.iter().map(|s| Box::new(move || run(s)) as Box<dyn FnMut()>).collect();
        let mut refs: Vec<&mut dyn FnMut()> = fs.iter_mut().map(|f| &mut **f as &mut dyn FnMut()).collect();
        interleaved_median_ms(reps, &mut refs)
    };
    let student_ms = time(reps, &|s| {
        let mut tape = Tape::new();
        let p = ss.bind(&mut tape, |_| false);
        std::hint::black_box(student.forward(&mut tape, &p, s, false).map(|o| o.forecast.traj).ok());
    });
    let teacher_ms = time(reps.div_ceil(4), &|s| {
        let mut tape = Tape::new();
        let p = ts.bind(&mut tape, |_| false);
        std::hint::black_box(teacher.forward(&mut tape, &p, s).map(|o| o.forecast.traj).ok());
    });
    counts
        .iter()
        .enumerate()
        .map(|(i, &agents)| AgentRow { agents, student_ms: student_ms[i], teacher_ms: teacher_ms[i] })
        .collect()
}

#[derive(Clone, Debug, Serialize)]
pub struct ModuleRow {
    pub module: &'static str,
    pub teacher_ms: Option<f64>,
    pub student_ms: Option<f64>,
}

/// Per-module forward latency on one synthetic scene; earlier stages are
/// run untimed on the same tape.
pub fn module_latency(cfg: &RunConfig, reps: usize) -> Result<Vec<ModuleRow>> {
    let teacher = Teacher::new(cfg.teacher.clone(), &cfg.data);
    let student = Student::new(cfg.student.clone(), &cfg.data, cfg.teacher.graph.d_model);
    let ts = teacher.init(0);
    let ss = student.init(0);
    let s = uniform_density_sample(cfg.data.n_max, cfg);
    let rows: Vec<usize> = (0..s.n).filter(|&i| s.is_valid(s.t_h - 1, i)).collect();
    let anchors: Vec<[f64; 2]> = rows.iter().map(|&i| s.anchor[i]).collect();
    let vel: Vec<[f64; 2]> = rows.iter().map(|&i| s.vel[i]).collect();

    let time_stage = |f: &mut dyn FnMut(&mut Tape) -> Result<Instant>| -> Result<f64> {
        let mut err = None;
        let mut v: Vec<f64> = Vec::new();
        for _ in 0..=reps.max(1) {
            let mut tape = Tape::new();
            let start = Instant::now();
            match f(&mut tape) {
                Ok(mark) => v.push((start.elapsed() - (mark - start)).as_secs_f64() * 1e3),
                Err(e) => err = Some(e),
            }
        }
        if let Some(e) = err {
            return Err(e);
        }
        v.remove(0);
        v.sort_by(f64::total_cmp);
        Ok(v[v.len() / 2])
    };

    let t_enc = time_stage(&mut |tape| {
        let p = ts.bind(tape, |_| false);
        let m = Instant::now();
        teacher.encoder.forward(tape, &p, &s)?;
        Ok(m)
    })?;
    let s_enc = time_stage(&mut |tape| {
        let p = ss.bind(tape, |_| false);
        let m = Instant::now();
        student.encoder.forward(tape, &p, &s)?;
        Ok(m)
    })?;
    let t_hyb = time_stage(&mut |tape| {
        let p = ts.bind(tape, |_| false);
        let e = teacher.encoder.forward(tape, &p, &s)?;
        let m = Instant::now();
        teacher.hybrid.forward(tape, &p, e.features, &s.valid)?;
        Ok(m)
    })?;
    let s_gru = time_stage(&mut |tape| {
        let p = ss.bind(tape, |_| false);
        let e = student.encoder.forward(tape, &p, &s)?;
        let m = Instant::now();
        let ctx = student.neighbor_context(tape, e.features, &s)?;
        let mut x = tape.concat(&[e.features, ctx], 2)?;
        for l in 0..student.cfg.gru_layers {
            x = student.gru_layer(tape, &p, l, x)?;
        }
        student.se_block(tape, &p, x)?;
        Ok(m)
    })?;
    let d_t = cfg.teacher.graph.d_model;
    let h_s = cfg.student.hidden;
    let t_moe = time_stage(&mut |tape| {
        let p = ts.bind(tape, |_| false);
        let h = tape.constant(autodiff::Tensor::full(&[rows.len(), d_t], 0.1));
        let m = Instant::now();
        let g = teacher.moe.gate(tape, &p, h)?;
        teacher.moe.forward_sparse(tape, &p, h, &g)?;
        Ok(m)
    })?;
    let s_lora = time_stage(&mut |tape| {
        let p = ss.bind(tape, |_| false);
        let ego = tape.constant(autodiff::Tensor::full(&[1, h_s], 0.1));
        let m = Instant::now();
        student.lora(tape, &p, ego)?;
        Ok(m)
    })?;
    let t_head = time_stage(&mut |tape| {
        let p = ts.bind(tape, |_| false);
        let h = tape.constant(autodiff::Tensor::full(&[rows.len(), d_t], 0.1));
        let m = Instant::now();
        teacher.head.forward(tape, &p, h, &anchors, &vel)?;
        Ok(m)
    })?;
    let s_head = time_stage(&mut |tape| {
        let p = ss.bind(tape, |_| false);
        let h = tape.constant(autodiff::Tensor::full(&[rows.len(), h_s], 0.1));
        let m = Instant::now();
        student.head.forward(tape, &p, h, &anchors, &vel)?;
        Ok(m)
    })?;
    Ok(vec![
        ModuleRow { module: MODULES[0], teacher_ms: Some(t_enc), student_ms: Some(s_enc) },
        ModuleRow { module: MODULES[1], teacher_ms: Some(t_hyb), student_ms: None },
        ModuleRow { module: MODULES[2], teacher_ms: None, student_ms: Some(s_gru) },
        ModuleRow { module: MODULES[3], teacher_ms: Some(t_moe), student_ms: Some(s_lora) },
        ModuleRow { module: MODULES[4], teacher_ms: Some(t_head), student_ms: Some(s_head) },
    ])
}

/// Least-squares line through `(x, y)`; returns `(slope, intercept, r2)`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    let slope = sxy / sxx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    (slope, my - slope * mx, r2)
}

/// CSV text for one profile.
pub fn run_profile(what: What, cfg: &RunConfig, reps: usize) -> Result<String> {
    let opt = |v: Option<f64>| v.map_or_else(String::new, |x| format!("{x:.4}"));
    Ok(match what {
        What::ScanVsAttn => {
            let d = cfg.teacher.graph.d_model;
            let mut s = String::from("t,scan_ms,attention_ms\n");
            for r in scan_vs_attention(&SEQ_LENGTHS, d, cfg.teacher.hybrid.d_state, reps, 0) {
                s += &format!("{},{:.4},{:.4}\n", r.t, r.scan_ms, r.attention_ms);
            }
            s
        }
        What::AgentsScaling => {
            let mut s = String::from("agents,student_ms,teacher_ms\n");
            for r in agents_scaling(&AGENT_COUNTS, cfg, reps) {
                s += &format!("{},{:.4},{:.4}\n", r.agents, r.student_ms, r.teacher_ms);
            }
            s
        }
        What::ModuleLatency => {
            let mut s = String::from("module,teacher_ms,student_ms\n");
            for r in module_latency(cfg, reps)? {
                s += &format!("{},{},{}\n", r.module, opt(r.teacher_ms), opt(r.student_ms));
            }
            s
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fit_recovers_line() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v + 1.0).collect();
        let (a, b, r2) = linear_fit(&x, &y);
        assert!((a - 2.0).abs() < 1e-12 && (b - 1.0).abs() < 1e-12 && (r2 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn uniform_sample_has_all_agents() {
        let cfg = RunConfig::default();
        for n in AGENT_COUNTS {
            let s = uniform_density_sample(n, &cfg);
            assert_eq!(s.n, n);
            assert_eq!(s.num_valid_last(), n);
        }
    }
}
