//! Reverse-mode automatic differentiation over dense `f64` arrays, plus
//! the special functions the evidential losses need.
//!
//! The [`Tape`] is define-by-run: each forward pass records array-level
//! primitives (matmul, convolution, spatial softmax, layer norm, GELU, the
//! log-gamma family, ...) and [`Tape::backward`] sweeps them once in
//! reverse order.
//!
//! ```
//! use evidentia::diffcore::{Array, Tape};
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Array::scalar(3.0));
//! let y = tape.square(x);
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.get(x).unwrap().item(), 6.0);
//! ```

mod array;
pub mod special;
mod tape;

pub use array::Array;
pub use special::{digamma, inc_beta, log_gamma, student_t_cdf, trigamma};
pub use tape::{Gradients, Tape, Var};

pub(crate) use tape::softplus;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DiffError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("data of length {len} does not fill shape {shape:?}")]
    Length { shape: Vec<usize>, len: usize },
    #[error("{op}: argument {value} outside the domain")]
    Domain { op: &'static str, value: f64 },
    #[error("{op}: no inputs")]
    Empty { op: &'static str },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
}
