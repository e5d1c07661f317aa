use autodiff::{Tape, Tensor};
use hetdistill::curriculum::{increment, CurriculumConfig};
use hetdistill::graph::causal_conv1d;
use hetdistill::hybrid::{selective_scan_plain, ScanInputs};
use hetdistill::moe::{cv_squared_plain, topk_gate_plain};
use hetdistill::rl::{clipped_surrogate_plain, gae};
use hetdistill::scene::{generate_synthetic, read_scenarios, wrap_angle, write_scenarios, DataConfig, Profile};
use hetdistill::sim::{step_bicycle, Action, BicycleState};
use proptest::prelude::*;

fn vec_in(lo: f64, hi: f64, n: std::ops::Range<usize>) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(lo..hi, n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..6, cols in 1usize..7, seed in any::<u64>(), scale in 0.1f64..50.0) {
        let mut x = seed;
        let t = Tensor::from_fn(&[rows, cols], |_| {
            x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((x >> 11) as f64 / (1u64 << 53) as f64 - 0.5) * scale
        });
        let mut tape = Tape::new();
        let v = tape.constant(t);
        let s = tape.softmax(v, 1).unwrap();
        for r in tape.value(s).data().chunks(cols) {
            prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(r.iter().all(|p| *p >= 0.0));
        }
    }

    #[test]
    fn topk_gate_keeps_at_most_k(logits in vec_in(-5.0, 5.0, 1..10), k in 1usize..5) {
        let w = topk_gate_plain(&logits, k, true);
        prop_assert!(w.iter().filter(|v| **v != 0.0).count() <= k);
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cv_squared_is_nonnegative(mass in vec_in(0.0, 3.0, 1..10)) {
        prop_assert!(cv_squared_plain(&mass) >= 0.0);
    }

    #[test]
    fn causal_conv_ignores_the_future(x in vec_in(-1.0, 1.0, 2..24), w in vec_in(-1.0, 1.0, 1..5), cut in 0usize..24, bump in -4.0f64..4.0) {
        let cut = cut % x.len();
        let w = &w[..w.len().min(x.len())];
        let mut y = x.clone();
        for v in &mut y[cut + 1..] {
            *v += bump;
        }
        let (a, b) = (causal_conv1d(&x, w).unwrap(), causal_conv1d(&y, w).unwrap());
        prop_assert_eq!(&a[..=cut], &b[..=cut]);
    }

    #[test]
    fn scan_prefix_is_causal(t in 2usize..10, seed in any::<u64>()) {
        let (d, s) = (2, 2);
        let mut x = seed | 1;
        let mut r = |lo: f64, hi: f64| {
            x ^= x << 13;
            x ^= x >> 7;
            x ^= x << 17;
            lo + (hi - lo) * ((x >> 11) as f64 / (1u64 << 53) as f64)
        };
        let xs: Vec<f64> = (0..t * d).map(|_| r(-1.0, 1.0)).collect();
        let delta: Vec<f64> = (0..t * d).map(|_| r(0.01, 0.5)).collect();
        let a: Vec<f64> = (0..d * s).map(|_| r(-2.0, -0.1)).collect();
        let b: Vec<f64> = (0..t * s).map(|_| r(-1.0, 1.0)).collect();
        let c: Vec<f64> = (0..t * s).map(|_| r(-1.0, 1.0)).collect();
        let dk: Vec<f64> = (0..d).map(|_| r(-1.0, 1.0)).collect();
        let full = selective_scan_plain(&ScanInputs { x: &xs, delta: &delta, a: &a, b: &b, c: &c, d_skip: &dk, d, s });
        let h = t / 2;
        let prefix = selective_scan_plain(&ScanInputs {
            x: &xs[..h * d], delta: &delta[..h * d], a: &a, b: &b[..h * s], c: &c[..h * s], d_skip: &dk, d, s,
        });
        prop_assert_eq!(&full[..h * d], &prefix[..]);
    }

    #[test]
    fn gae_without_discount_is_reward_minus_value(r in vec_in(-2.0, 2.0, 1..20), v0 in -2.0f64..2.0) {
        // gamma = 0: advantage is r_t - V_t.
        let n = r.len();
        let v = vec![v0; n];
        let done = vec![false; n];
        let (adv, ret) = gae(&r, &v, &done, 0.0, 0.0, 0.95).unwrap();
        for t in 0..n {
            prop_assert!((adv[t] - (r[t] - v0)).abs() < 1e-12);
            prop_assert!((ret[t] - r[t]).abs() < 1e-12);
        }
    }

    #[test]
    fn surrogate_never_exceeds_unclipped(ratio in 0.0f64..3.0, adv in -3.0f64..3.0, eps in 0.05f64..0.5) {
        prop_assert!(clipped_surrogate_plain(ratio, adv, eps) <= ratio * adv + 1e-15);
    }

    #[test]
    fn increment_is_bounded_and_monotone(a in 0.0f64..1.0, b in 0.0f64..1.0) {
        let cfg = CurriculumConfig::default();
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        let (il, ih) = (increment(lo, &cfg), increment(hi, &cfg));
        prop_assert!(il >= 0.0 && ih <= cfg.delta_c + 1e-12);
        prop_assert!(il <= ih);
    }

    #[test]
    fn wrap_angle_lands_in_range(a in -100.0f64..100.0) {
        let w = wrap_angle(a);
        prop_assert!(w > -std::f64::consts::PI - 1e-12 && w <= std::f64::consts::PI + 1e-12);
        prop_assert!(((w - a) / std::f64::consts::TAU - ((w - a) / std::f64::consts::TAU).round()).abs() < 1e-9);
    }

    #[test]
    fn bicycle_speed_stays_nonnegative(v in 0.0f64..40.0, accel in -8.0f64..4.0, steer in -0.5f64..0.5) {
        let mut s = BicycleState { x: 0.0, y: 0.0, theta: 0.0, v };
        for _ in 0..30 {
            s = step_bicycle(s, Action { accel, steer }, 0.1, 2.7);
            prop_assert!(s.v >= 0.0);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn generated_scenarios_validate_and_roundtrip(seed in any::<u64>(), p in 0usize..6) {
        let cfg = DataConfig::default();
        let set = generate_synthetic(seed, 3, Profile::NAMES[p], &cfg).unwrap();
        for s in &set.scenarios {
            prop_assert!(s.validate(&cfg).is_ok());
        }
        let mut buf = Vec::new();
        write_scenarios(&set, &mut buf).unwrap();
        let back = read_scenarios(&buf[..], &cfg).unwrap();
        let mut again = Vec::new();
        write_scenarios(&back, &mut again).unwrap();
        prop_assert_eq!(buf, again);
    }
}

#[test]
fn unknown_profile_lists_valid_names() {
    let e = generate_synthetic(0, 1, "rush-hour", &DataConfig::default()).unwrap_err().to_string();
    for n in Profile::NAMES {
        assert!(e.contains(n), "{e}");
    }
}

#[test]
fn malformed_line_reports_its_number() {
    let cfg = DataConfig::default();
    let set = generate_synthetic(1, 1, "lane-keep", &cfg).unwrap();
    let mut buf = Vec::new();
    write_scenarios(&set, &mut buf).unwrap();
    buf.extend_from_slice(b"{not json}\n");
    match read_scenarios(&buf[..], &cfg) {
        Err(hetdistill::CoreError::Parse { line, .. }) => assert_eq!(line, 2),
        other => panic!("expected a parse error, got {other:?}"),
    }
}
