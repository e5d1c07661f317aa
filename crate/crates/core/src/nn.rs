//! Small building blocks shared by the teacher and student.

use autodiff::{Tape, Tensor, Var};

use crate::error::Result;

/// `x @ w (+ b)` for `x: [m, k]`, `w: [k, n]`, `b: [n]`.
pub fn linear(tape: &mut Tape, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    Ok(match b {
        Some(b) => tape.add(y, b)?,
        None => y,
    })
}

/// Normalises the last axis by its root-mean-square and applies gain `g`.
pub fn rmsnorm(tape: &mut Tape, x: Var, g: Var, eps: f64) -> Result<Var> {
    let last = tape.shape(x).len() - 1;
    let sq = tape.mul(x, x)?;
    let ms = tape.mean(sq, last, true)?;
    let ms = tape.add_scalar(ms, eps);
    let rms = tape.sqrt(ms)?;
    let y = tape.div(x, rms)?;
    Ok(tape.mul(y, g)?)
}

/// Plain RMSNorm over one vector.
pub fn rmsnorm_plain(x: &[f64], g: &[f64], eps: f64) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let r = (ms + eps).sqrt();
    x.iter().zip(g).map(|(v, g)| v / r * g).collect()
}

/// Multiplies every row of `x: [rows, ...]` by `mask[row]` (0 or 1).
pub fn mask_rows(tape: &mut Tape, x: Var, mask: &[bool]) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let rows = shape[0];
    let rest: usize = shape[1..].iter().product();
    let flat = tape.reshape(x, &[rows, rest])?;
    let m = tape.constant(Tensor::new(vec![rows, 1], mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect())?);
    let y = tape.mul(flat, m)?;
    Ok(tape.reshape(y, &shape)?)
}

/// L2-normalises the last axis.
pub fn l2_normalize(tape: &mut Tape, x: Var, eps: f64) -> Result<Var> {
    let last = tape.shape(x).len() - 1;
    let sq = tape.mul(x, x)?;
    let s = tape.sum(sq, last, true)?;
    let s = tape.add_scalar(s, eps);
    let n = tape.sqrt(s)?;
    Ok(tape.div(x, n)?)
}

/// Upper-triangular ones: `x @ cumsum_matrix(n)` is a running sum over the last axis.
pub fn cumsum_matrix(n: usize) -> Tensor {
    Tensor::from_fn(&[n, n], |i| if i / n <= i % n { 1.0 } else { 0.0 })
}
