//! Central finite-difference oracle for checking reverse-mode gradients.

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Outcome of comparing analytic gradients against central differences.
#[derive(Clone, Debug)]
pub struct GradCheck {
    /// Per-input `|g - fd| / max(|g|, |fd|, floor)` using Euclidean norms.
    pub rel_errors: Vec<f64>,
}

impl GradCheck {
    pub fn max_rel_error(&self) -> f64 {
        self.rel_errors.iter().copied().fold(0.0, f64::max)
    }
}

const NORM_FLOOR: f64 = 1e-6;

/// Evaluates `f` on fresh tapes, perturbing every element of every input by
/// `±step`. `f` must return a scalar.
pub fn check<F>(inputs: &[Tensor], f: F, step: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let eval = |probe: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = probe.iter().map(|x| t.leaf(x.clone(), false)).collect();
        let y = f(&mut t, &vs)?;
        Ok(t.value(y).item())
    };

    let mut rel_errors = Vec::with_capacity(inputs.len());
    let mut probe: Vec<Tensor> = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).expect("leaf gradient").clone();
        let mut numeric = Vec::with_capacity(inputs[k].len());
        for i in 0..inputs[k].len() {
            let orig = inputs[k].data()[i];
            probe[k].data_mut()[i] = orig + step;
            let up = eval(&probe)?;
            probe[k].data_mut()[i] = orig - step;
            let down = eval(&probe)?;
            probe[k].data_mut()[i] = orig;
            numeric.push((up - down) / (2.0 * step));
        }
        let diff: f64 = analytic
            .data()
            .iter()
            .zip(&numeric)
            .map(|(a, n)| (a - n) * (a - n))
            .sum::<f64>()
            .sqrt();
        let na = analytic.norm_sq().sqrt();
        let nn = numeric.iter().map(|v| v * v).sum::<f64>().sqrt();
        rel_errors.push(diff / na.max(nn).max(NORM_FLOOR));
    }
    Ok(GradCheck { rel_errors })
}
