//! Minimal reverse-mode automatic differentiation over dense `f64` tensors,
//! plus the Adam optimizer and seeded weight initialization.
//!
//! ```
//! use ndtensor::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::vector(vec![3.0]));
//! let sq = tape.square(x);
//! let root = tape.sum(sq);
//! let grads = tape.backward(root).unwrap();
//! assert_eq!(grads.get(x).unwrap(), &[6.0]);
//! ```

mod adam;
pub mod check;
pub mod init;
mod tape;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use tape::{ConvGeom, Gradients, OpKind, Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape {
        shape: Vec<usize>,
        reason: &'static str,
    },
    #[error("{what} length mismatch: expected {expected}, got {got}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("backward root does not depend on any tracked leaf")]
    UntrackedRoot,
    #[error("backward already ran on this tape")]
    BackwardTwice,
}

/// Numerically stable logistic function.
pub fn sigmoid(v: f64) -> f64 {
    tape::sigmoid(v)
}

/// Numerically stable `ln(1 + e^v)`.
pub fn softplus(v: f64) -> f64 {
    tape::softplus(v)
}
