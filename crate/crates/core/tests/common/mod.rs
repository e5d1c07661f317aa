#![allow(dead_code)]

use autodiff::gradcheck::check;
use autodiff::{Tape, Tensor, Var};
use hetdistill::distill::{loss_att, loss_low, loss_sem, Negatives};
use hetdistill::graph::{EdgeList, GraphConfig, GraphEncoder};
use hetdistill::head::HeadConfig;
use hetdistill::hybrid::{HybridBlock, HybridConfig};
use hetdistill::moe::{load_balance_loss, MoeConfig, MoeLayer};
use hetdistill::nn;
use hetdistill::params::{Bound, ParamLabel, ParamStore};
use hetdistill::rl::{ppo_loss, PpoBatch, PpoConfig};
use hetdistill::scene::DataConfig;
use hetdistill::student::{Student, StudentConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(r: &mut ChaCha8Rng, shape: &[usize], a: f64) -> Tensor {
    Tensor::from_fn(shape, |_| r.gen_range(-a..a))
}

/// `sum(y * w)` with a fixed random `w`, so every output element matters.
pub fn project(tape: &mut Tape, y: Var, seed: u64) -> autodiff::Result<Var> {
    let shape = tape.shape(y).to_vec();
    let w = tape.constant(rand_tensor(&mut rng(seed ^ 0xABCD), &shape, 1.0));
    let p = tape.mul(y, w)?;
    Ok(tape.sum_all(p))
}

/// Gradient check of `f` with respect to the explicit inputs and the named
/// parameters of `store`; returns the worst relative error.
pub fn check_block<F>(store: &ParamStore, names: &[&str], extra: Vec<Tensor>, f: F) -> f64
where
    F: Fn(&mut Tape, &Bound, &[Var]) -> hetdistill::Result<Var>,
{
    let k = extra.len();
    let mut inputs = extra;
    inputs.extend(names.iter().map(|n| store.tensor(n).clone()));
    let res = check(
        &inputs,
        |tape, vars| {
            let b = Bound::from_vars(names.iter().map(|s| s.to_string()).zip(vars[k..].iter().copied()));
            f(tape, &b, &vars[..k]).map_err(ad)
        },
        STEP,
    )
    .expect("gradient check runs");
    res.max_rel_error()
}

fn ad(e: hetdistill::CoreError) -> autodiff::AutodiffError {
    autodiff::AutodiffError::Domain { op: "block", msg: e.to_string() }
}

fn owned(names: &[String]) -> Vec<&str> {
    names.iter().map(|s| s.as_str()).collect()
}

pub fn gat(seed: u64) -> f64 {
    let mut r = rng(seed);
    let cfg = GraphConfig { d_model: 4, heads: 2, layers: 1, conv_width: 1, ..GraphConfig::default() };
    let enc = GraphEncoder::new("g", cfg, 3);
    let mut store = ParamStore::new();
    enc.init(&mut store, &mut r, ParamLabel::Body);
    let nodes = 4;
    let mut edges = EdgeList::default();
    for i in 0..nodes {
        for j in 0..nodes {
            if i == j || r.gen_bool(0.5) {
                edges.dst.push(i);
                edges.src.push(j);
            }
        }
    }
    let h = rand_tensor(&mut r, &[nodes, 4], 1.0);
    check_block(&store, &["g.gat0.w", "g.gat0.a_dst", "g.gat0.a_src"], vec![h], |tape, b, x| {
        let (y, _) = enc.gat_layer(tape, b, 0, x[0], &edges)?;
        Ok(project(tape, y, seed)?)
    })
}

pub fn rmsnorm(seed: u64) -> f64 {
    let mut r = rng(seed);
    let x = rand_tensor(&mut r, &[3, 5], 2.0);
    let g = rand_tensor(&mut r, &[5], 1.5);
    let res = check(
        &[x, g],
        |tape, v| {
            let y = nn::rmsnorm(tape, v[0], v[1], 1e-6).map_err(ad)?;
            project(tape, y, seed)
        },
        STEP,
    )
    .unwrap();
    res.max_rel_error()
}

fn hybrid(seed: u64) -> (HybridBlock, ParamStore, ChaCha8Rng) {
    let mut r = rng(seed);
    let cfg = HybridConfig { d_state: 3, window: 2, shift: 1, attn_heads: 2, ..HybridConfig::default() };
    let block = HybridBlock::new("h", cfg, 4);
    let mut store = ParamStore::new();
    block.init(&mut store, &mut r, ParamLabel::Body);
    // Non-zero fusion bias and relative-position bias so those gradients are exercised.
    for name in ["h.fuse.b", "h.attn0.bias", "h.attn1.bias"] {
        let t = store.tensor_mut(name).unwrap();
        let shape = t.shape().to_vec();
        *t = rand_tensor(&mut r, &shape, 0.5);
    }
    (block, store, r)
}

fn names_with(store: &ParamStore, needle: &str) -> Vec<String> {
    store.names().filter(|n| n.contains(needle)).cloned().collect()
}

pub fn scan(seed: u64) -> f64 {
    let (block, store, mut r) = hybrid(seed);
    let names = names_with(&store, ".ssm.");
    let x = rand_tensor(&mut r, &[5, 2, 4], 1.0);
    check_block(&store, &owned(&names), vec![x], |tape, b, x| {
        let y = block.scan(tape, b, x[0])?;
        Ok(project(tape, y, seed)?)
    })
}

pub fn window_attention(seed: u64) -> f64 {
    let (block, store, mut r) = hybrid(seed);
    let names = names_with(&store, ".attn0.");
    let (steps, n) = (4, 3);
    let mut valid: Vec<bool> = (0..steps * n).map(|_| r.gen_bool(0.8)).collect();
    valid[0] = true;
    let x = rand_tensor(&mut r, &[steps * n, 4], 1.0);
    let shifted = seed % 2 == 1;
    check_block(&store, &owned(&names), vec![x], |tape, b, x| {
        let o = block.window_attention(tape, b, 0, x[0], steps, n, &valid, shifted)?;
        Ok(project(tape, o.out, seed)?)
    })
}

pub fn fusion(seed: u64) -> f64 {
    let (block, store, mut r) = hybrid(seed);
    let ym = rand_tensor(&mut r, &[3, 4], 1.0);
    let ys = rand_tensor(&mut r, &[3, 4], 1.0);
    check_block(&store, &["h.fuse.w", "h.fuse.b"], vec![ym, ys], |tape, b, x| {
        let (z, _) = block.gated_fusion(tape, b, x[0], x[1])?;
        Ok(project(tape, z, seed)?)
    })
}

pub fn moe(seed: u64) -> f64 {
    let mut r = rng(seed);
    let layer = MoeLayer::new("m", MoeConfig { experts: 3, top_k: 2, hidden: 3, ..MoeConfig::default() }, 4);
    let mut store = ParamStore::new();
    layer.init(&mut store, &mut r, ParamLabel::Body);
    let names: Vec<String> = store.names().cloned().collect();
    let x = rand_tensor(&mut r, &[4, 4], 1.0);
    check_block(&store, &owned(&names), vec![x], |tape, b, x| {
        let g = layer.gate(tape, b, x[0])?;
        let y = layer.forward_sparse(tape, b, x[0], &g)?;
        let lb = load_balance_loss(tape, g.weights)?;
        let p = project(tape, y, seed)?;
        Ok(tape.add(p, lb)?)
    })
}

pub fn small_student() -> (Student, DataConfig) {
    let data = DataConfig::default();
    let cfg = StudentConfig {
        graph: GraphConfig { d_model: 4, heads: 2, ..GraphConfig::student() },
        hidden: 8,
        gru_layers: 1,
        se_ratio: 4,
        head: HeadConfig { modes: 2, latent: 3, cv_prior: true },
        lora_rank: 2,
        lora_alpha: 4.0,
        critic_hidden: 4,
    };
    (Student::new(cfg, &data, 6), data)
}

fn randomized(store: &mut ParamStore, names: &[&str], r: &mut ChaCha8Rng) {
    for n in names {
        let t = store.tensor_mut(n).unwrap();
        let shape = t.shape().to_vec();
        *t = rand_tensor(r, &shape, 0.5);
    }
}

pub fn gru(seed: u64) -> f64 {
    let (st, _) = small_student();
    let mut store = st.init(seed);
    let mut r = rng(seed);
    randomized(&mut store, &["student.gru0.b"], &mut r);
    let x = rand_tensor(&mut r, &[3, 2, 8], 1.0);
    check_block(&store, &["student.gru0.wx", "student.gru0.uh", "student.gru0.un", "student.gru0.b"], vec![x], |tape, b, x| {
        let y = st.gru_layer(tape, b, 0, x[0])?;
        Ok(project(tape, y, seed)?)
    })
}

pub fn se(seed: u64) -> f64 {
    let (st, _) = small_student();
    let store = st.init(seed);
    let mut r = rng(seed);
    let u = rand_tensor(&mut r, &[3, 2, 8], 1.0);
    check_block(&store, &["student.se.w1", "student.se.w2"], vec![u], |tape, b, x| {
        let (y, _) = st.se_block(tape, b, x[0])?;
        Ok(project(tape, y, seed)?)
    })
}

pub fn lora(seed: u64) -> f64 {
    let (st, _) = small_student();
    let mut store = st.init(seed);
    let mut r = rng(seed);
    randomized(&mut store, &["student.policy.lora_b"], &mut r);
    let x = rand_tensor(&mut r, &[3, 8], 1.0);
    check_block(&store, &["student.policy.w0", "student.policy.lora_a", "student.policy.lora_b"], vec![x], |tape, b, x| {
        let y = st.lora(tape, b, x[0])?;
        Ok(project(tape, y, seed)?)
    })
}

pub fn distill_low(seed: u64) -> f64 {
    let (st, _) = small_student();
    let mut store = st.init(seed);
    let mut r = rng(seed);
    randomized(&mut store, &["adapter.b"], &mut r);
    let (t, n) = (3, 4);
    let mut valid: Vec<bool> = (0..t * n).map(|_| r.gen_bool(0.7)).collect();
    valid[0] = true;
    let f_t = rand_tensor(&mut r, &[t, n, 6], 1.0);
    let f_s = rand_tensor(&mut r, &[t, n, 4], 1.0);
    check_block(&store, &["adapter.w", "adapter.b"], vec![f_s], |tape, b, x| loss_low(tape, b, &f_t, x[0], &valid))
}

pub fn distill_att(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (t, n) = (2, 4);
    let mut valid: Vec<bool> = (0..t * n).map(|_| r.gen_bool(0.75)).collect();
    valid[0] = true;
    let a_t = rand_tensor(&mut r, &[t, n, n], 1.0).map(|v| v.abs());
    let logits = rand_tensor(&mut r, &[t, n, n], 1.0);
    let res = check(
        &[logits],
        |tape, v| {
            let a_s = tape.softmax(v[0], 2)?;
            loss_att(tape, &a_t, a_s, &valid).map_err(ad)
        },
        STEP,
    )
    .unwrap();
    res.max_rel_error()
}

pub fn distill_sem(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (b, k, dz) = (2, 3, 4);
    let z_t: Vec<Tensor> = (0..b).map(|_| rand_tensor(&mut r, &[k, dz], 1.0)).collect();
    let z_s: Vec<Tensor> = (0..b).map(|_| rand_tensor(&mut r, &[k, dz], 1.0)).collect();
    let neg = [Negatives::InMode, Negatives::InBatch, Negatives::Both][seed as usize % 3];
    let res = check(
        &z_s,
        |tape, v| loss_sem(tape, &z_t, v, neg, 0.07).map_err(ad),
        STEP,
    )
    .unwrap();
    res.max_rel_error()
}

pub fn ppo_surrogate(seed: u64) -> f64 {
    let (st, _) = small_student();
    let mut store = st.init(seed);
    let mut r = rng(seed);
    randomized(&mut store, &["student.policy.lora_b"], &mut r);
    let m = 6;
    let mut batch = PpoBatch::default();
    for _ in 0..m {
        batch.features.push((0..8).map(|_| r.gen_range(-1.0..1.0)).collect());
        batch.actions.push([r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0)]);
        batch.old_log_probs.push(r.gen_range(-3.0..-1.0));
        batch.advantages.push(r.gen_range(-2.0..2.0));
        batch.returns.push(r.gen_range(-2.0..2.0));
    }
    let idx: Vec<usize> = (0..m).collect();
    let cfg = PpoConfig::default();
    let names = [
        "student.policy.w0",
        "student.policy.lora_a",
        "student.policy.lora_b",
        "student.policy.log_std",
        "critic.w1",
        "critic.b1",
        "critic.w2",
        "critic.b2",
    ];
    check_block(&store, &names, vec![], |tape, b, _| Ok(ppo_loss(tape, b, &st, &batch, &idx, &cfg)?.0))
}

pub type Case = (&'static str, fn(u64) -> f64);

pub const GRADIENT_CASES: [Case; 13] = [
    ("GATv2 layer", gat),
    ("RMSNorm", rmsnorm),
    ("selective scan", scan),
    ("window attention", window_attention),
    ("gated fusion", fusion),
    ("MoE + load balance", moe),
    ("GRU layer", gru),
    ("SE block", se),
    ("LoRA head", lora),
    ("feature loss", distill_low),
    ("attention loss", distill_att),
    ("contrastive loss", distill_sem),
    ("PPO objective", ppo_surrogate),
];
