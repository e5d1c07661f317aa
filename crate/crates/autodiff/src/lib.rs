//! Reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! Operations are recorded on a [`Tape`] as they execute. Each op returns a
//! [`Var`] handle into the tape; [`Tape::backward`] walks the recorded nodes in
//! reverse and accumulates gradients for every node that requires them.
//!
//! ```
//! use autodiff::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::scalar(3.0), true);
//! let y = tape.mul(x, x).unwrap();
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.get(x).unwrap().item(), 6.0);
//! ```
//!
//! Broadcasting is limited to three cases for binary ops: the right operand is
//! a scalar, its shape is a suffix of the left shape (bias style), or it
//! equals the left shape with the last axis collapsed to 1 (row style).

mod error;
pub mod gradcheck;
mod ops;
mod tape;
mod tensor;

pub use error::{AutodiffError, Result};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
