//! Dense `f64` arrays with reverse-mode automatic differentiation.
//!
//! Every forward pass records onto a fresh [`Tape`]; [`Var::backward`]
//! returns exact chain-rule gradients for all leaves created with
//! [`Tape::param`].
//!
//! ```
//! use causnet::numerics::{Array, Tape};
//!
//! let tape = Tape::new();
//! let x = tape.param(Array::vector(&[0.3, -0.7]).unwrap());
//! let y = x.tanh().unwrap().sum().unwrap();
//! let g = y.backward().get(x);
//! assert!((g.data()[0] - (1.0 - 0.3f64.tanh().powi(2))).abs() < 1e-15);
//! ```

mod array;
mod check;
pub(crate) mod kernels;
mod tape;

pub use array::{Array, Mask};
pub use check::finite_difference_check;
pub use tape::{Gradients, Tape, Var};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("shape mismatch in `{op}`: {shapes:?}")]
    ShapeMismatch { op: &'static str, shapes: Vec<Vec<usize>> },
    #[error("invalid shape {shape:?}: every axis must be positive")]
    InvalidShape { shape: Vec<usize> },
    #[error("shape {shape:?} does not hold {len} values")]
    LengthMismatch { shape: Vec<usize>, len: usize },
    #[error("non-finite value in {context}")]
    NonFinite { context: String },
    #[error("mask entry {index} is {value}; only 0 and -inf are allowed")]
    InvalidMask { index: usize, value: f64 },
    #[error("input {index} is outside the domain of `{op}`")]
    Domain { op: &'static str, index: usize },
    #[error("slice [{start}, {end}) on axis {axis} is out of range for shape {shape:?}")]
    Slice { shape: Vec<usize>, axis: usize, start: usize, end: usize },
    #[error("finite-difference step must be positive and finite, got {0}")]
    InvalidStep(f64),
}

impl NumericsError {
    pub(crate) fn shape(op: &'static str, shapes: &[&[usize]]) -> Self {
        Self::ShapeMismatch {
            op,
            shapes: shapes.iter().map(|s| s.to_vec()).collect(),
        }
    }
}
