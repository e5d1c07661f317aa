use autodiff::gradcheck::check;
use autodiff::{AutodiffError, Tape, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Reduces any tensor to a scalar with random weights so every output element
/// contributes to the checked gradient.
fn weighted_sum(tape: &mut Tape, y: Var, seed: u64) -> autodiff::Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = rand_tensor(&mut rng, tape.shape(y), -1.0, 1.0);
    let w = tape.constant(w);
    let p = tape.mul(y, w)?;
    Ok(tape.sum_all(p))
}

/// Uniform in ±[0.05, hi], keeping samples clear of kinks at zero.
fn rand_away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(0.05..hi);
        if rng.gen_bool(0.5) { m } else { -m }
    })
}

const STEP: f64 = 1e-3;
const TOL: f64 = 1e-4;
const TRIALS: u64 = 50;

fn run_trials(name: &str, mut make: impl FnMut(&mut ChaCha8Rng) -> Vec<Tensor>, f: impl Fn(&mut Tape, &[Var]) -> autodiff::Result<Var> + Copy) {
    for trial in 0..TRIALS {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + trial);
        let inputs = make(&mut rng);
        let res = check(&inputs, |t, v| {
            let y = f(t, v)?;
            weighted_sum(t, y, 77 + trial)
        }, STEP)
        .unwrap();
        assert!(res.max_rel_error() < TOL, "{name} trial {trial}: rel err {}", res.max_rel_error());
    }
}

#[test]
fn add_example() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::from_vec(vec![1.0, 2.0]));
    let b = t.constant(Tensor::from_vec(vec![3.0, 4.0]));
    let c = t.add(a, b).unwrap();
    assert_eq!(t.value(c).data(), &[4.0, 6.0]);
}

#[test]
fn softmax_symmetric_example() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::from_vec(vec![0.0, 0.0]));
    let s = t.softmax(a, 0).unwrap();
    assert_eq!(t.value(s).data(), &[0.5, 0.5]);
}

#[test]
fn softmax_large_logits_stay_finite() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::from_vec(vec![1000.0, 999.0]));
    let s = t.softmax(a, 0).unwrap();
    assert!(t.value(s).all_finite());
    assert!((t.value(s).sum() - 1.0).abs() < 1e-12);
}

#[test]
fn softmax_fully_masked_axis_is_domain_error() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::from_vec(vec![f64::NEG_INFINITY; 3]));
    assert!(matches!(t.softmax(a, 0), Err(AutodiffError::Domain { .. })));
}

#[test]
fn matmul_identity_example() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_tensor(&mut rng, &[3, 4], -2.0, 2.0);
    let mut t = Tape::new();
    let i = t.constant(Tensor::eye(3));
    let xv = t.constant(x.clone());
    let y = t.matmul(i, xv).unwrap();
    assert_eq!(t.value(y), &x);
}

#[test]
fn shape_mismatch_reports_shapes() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::zeros(&[2, 3]));
    let b = t.constant(Tensor::zeros(&[2, 3]));
    match t.matmul(a, b) {
        Err(AutodiffError::Shape { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 3]);
        }
        other => panic!("expected shape error, got {other:?}"),
    }
}

#[test]
fn sum_gives_all_ones_gradient() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::from_fn(&[2, 3, 2], |i| i as f64), true);
    let s = t.sum_all(x);
    let g = t.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap(), &Tensor::ones(&[2, 3, 2]));
}

#[test]
fn square_gradient_at_three() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::scalar(3.0), true);
    let y = t.mul(x, x).unwrap();
    assert_eq!(t.backward(y).unwrap().get(x).unwrap().item(), 6.0);
}

#[test]
fn non_scalar_loss_is_rejected() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::zeros(&[2]), true);
    assert!(matches!(t.backward(x), Err(AutodiffError::NotScalar(_))));
}

#[test]
fn no_trainable_leaves_means_empty_gradients() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::from_vec(vec![1.0, 2.0]));
    let y = t.exp(x);
    let s = t.sum_all(y);
    assert!(t.backward(s).unwrap().is_empty());
}

#[test]
fn fan_out_accumulates() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::from_vec(vec![1.5, -2.0]), true);
    let y = t.add(x, x).unwrap();
    let w = t.constant(Tensor::from_vec(vec![0.3, 0.7]));
    let l = t.mul(y, w).unwrap();
    let l = t.sum_all(l);
    let g = t.backward(l).unwrap();
    // grad(y) = w, so grad(x) = 2w
    assert_eq!(g.get(x).unwrap().data(), &[0.6, 1.4]);
}

#[test]
fn unreached_leaf_gets_zero_gradient() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::scalar(1.0), true);
    let z = t.leaf(Tensor::zeros(&[3]), true);
    let y = t.exp(x);
    let g = t.backward(y).unwrap();
    assert_eq!(g.get(z).unwrap(), &Tensor::zeros(&[3]));
}

#[test]
fn flops_count_matmul() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::zeros(&[2, 3]));
    let b = t.constant(Tensor::zeros(&[3, 5]));
    t.matmul(a, b).unwrap();
    assert_eq!(t.flops(), 30);
}

// ---- finite-difference checks, one per op kind ----

#[test]
fn fd_matmul() {
    run_trials("matmul", |r| vec![rand_tensor(r, &[3, 4], -1.0, 1.0), rand_tensor(r, &[4, 2], -1.0, 1.0)], |t, v| t.matmul(v[0], v[1]));
}

#[test]
fn fd_bmm() {
    run_trials("bmm", |r| vec![rand_tensor(r, &[2, 3, 4], -1.0, 1.0), rand_tensor(r, &[2, 4, 2], -1.0, 1.0)], |t, v| t.bmm(v[0], v[1]));
}

#[test]
fn fd_add_broadcasts() {
    run_trials("add", |r| vec![rand_tensor(r, &[3, 4], -1.0, 1.0), rand_tensor(r, &[4], -1.0, 1.0)], |t, v| t.add(v[0], v[1]));
    run_trials("sub-row", |r| vec![rand_tensor(r, &[3, 4], -1.0, 1.0), rand_tensor(r, &[3, 1], -1.0, 1.0)], |t, v| t.sub(v[0], v[1]));
}

#[test]
fn fd_mul_div() {
    run_trials("mul", |r| vec![rand_tensor(r, &[3, 4], -1.0, 1.0), rand_tensor(r, &[3, 4], -1.0, 1.0)], |t, v| t.mul(v[0], v[1]));
    run_trials("div", |r| vec![rand_tensor(r, &[3, 4], -1.0, 1.0), rand_tensor(r, &[1], 0.5, 2.0)], |t, v| t.div(v[0], v[1]));
}

#[test]
fn fd_unary() {
    let mk = |r: &mut ChaCha8Rng| vec![rand_away_from_zero(r, &[4, 3], 2.0)];
    let pos = |r: &mut ChaCha8Rng| vec![rand_tensor(r, &[4, 3], 0.2, 3.0)];
    run_trials("exp", mk, |t, v| Ok(t.exp(v[0])));
    run_trials("tanh", mk, |t, v| Ok(t.tanh(v[0])));
    run_trials("sigmoid", mk, |t, v| Ok(t.sigmoid(v[0])));
    run_trials("relu", mk, |t, v| Ok(t.relu(v[0])));
    run_trials("leaky_relu", mk, |t, v| Ok(t.leaky_relu(v[0], 0.2)));
    run_trials("softplus", mk, |t, v| Ok(t.softplus(v[0])));
    run_trials("log", pos, |t, v| t.log(v[0]));
    run_trials("sqrt", pos, |t, v| t.sqrt(v[0]));
    run_trials("power", pos, |t, v| Ok(t.powf(v[0], 2.5)));
}

#[test]
fn fd_softmax_axes() {
    let mk = |r: &mut ChaCha8Rng| vec![rand_tensor(r, &[2, 3, 4], -2.0, 2.0)];
    run_trials("softmax0", mk, |t, v| t.softmax(v[0], 0));
    run_trials("softmax1", mk, |t, v| t.softmax(v[0], 1));
    run_trials("softmax2", mk, |t, v| t.softmax(v[0], 2));
    run_trials("log_softmax", mk, |t, v| t.log_softmax(v[0], 1));
}

#[test]
fn fd_reductions() {
    let mk = |r: &mut ChaCha8Rng| vec![rand_tensor(r, &[2, 3, 4], -2.0, 2.0)];
    run_trials("sum", mk, |t, v| t.sum(v[0], 1, false));
    run_trials("mean", mk, |t, v| t.mean(v[0], 2, true));
    run_trials("max", mk, |t, v| t.max(v[0], 0, false));
}

#[test]
fn fd_structural() {
    let mk = |r: &mut ChaCha8Rng| vec![rand_tensor(r, &[3, 4], -2.0, 2.0), rand_tensor(r, &[3, 2], -2.0, 2.0)];
    run_trials("concat", mk, |t, v| t.concat(&[v[0], v[1]], 1));
    run_trials("slice", mk, |t, v| t.slice(v[0], 1, 1, 3));
    run_trials("permute", |r| vec![rand_tensor(r, &[2, 3, 4], -1.0, 1.0)], |t, v| t.permute(v[0], &[2, 0, 1]));
    run_trials("reshape", mk, |t, v| t.reshape(v[0], &[2, 6]));
    run_trials("gather", mk, |t, v| t.gather(v[0], &[2, 0, 2, 1]));
    run_trials("scatter", mk, |t, v| t.scatter_add(v[0], &[1, 1, 0], 2));
    run_trials(
        "minimum",
        |r| {
            let a = rand_tensor(r, &[3, 4], -1.0, 1.0);
            let gap = rand_away_from_zero(r, &[3, 4], 1.0);
            let b = Tensor::from_fn(&[3, 4], |i| a.data()[i] + gap.data()[i]);
            vec![a, b]
        },
        |t, v| t.minimum(v[0], v[1]),
    );
}

#[test]
fn fd_composite_mlp() {
    run_trials(
        "mlp",
        |r| vec![rand_tensor(r, &[5, 3], -1.0, 1.0), rand_tensor(r, &[3, 8], -1.0, 1.0), rand_tensor(r, &[8], -0.5, 0.5), rand_tensor(r, &[8, 2], -1.0, 1.0)],
        |t, v| {
            let h = t.matmul(v[0], v[1])?;
            let h = t.add(h, v[2])?;
            let h = t.tanh(h);
            let o = t.matmul(h, v[3])?;
            t.log_softmax(o, 1)
        },
    );
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(vals in proptest::collection::vec(-30.0f64..30.0, 12)) {
        let mut t = Tape::new();
        let x = t.constant(Tensor::new(vec![3, 4], vals).unwrap());
        let s = t.softmax(x, 1).unwrap();
        for row in t.value(s).data().chunks(4) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn permute_then_inverse_is_identity(vals in proptest::collection::vec(-5.0f64..5.0, 24)) {
        let mut t = Tape::new();
        let x = t.constant(Tensor::new(vec![2, 3, 4], vals).unwrap());
        let p = t.permute(x, &[1, 2, 0]).unwrap();
        let q = t.permute(p, &[2, 0, 1]).unwrap();
        prop_assert_eq!(t.value(q), t.value(x));
    }
}
