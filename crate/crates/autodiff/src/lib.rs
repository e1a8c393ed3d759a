//! Minimal reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! A [`Tape`] records every [`Primitive`] application as an immutable node.
//! [`Tape::backward`] sweeps the record once in reverse and returns the
//! gradient of a scalar output with respect to every tracked leaf.
//!
//! ```
//! use eqgat_autodiff::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]));
//! let sq = tape.mul(x, x).unwrap();
//! let y = tape.sum(sq, 0).unwrap();
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
//! ```

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod error;
pub mod gradcheck;
mod primitive;
mod tape;
mod tensor;

pub use error::{AutodiffError, Result};
pub use gradcheck::{finite_difference_check, relative_error, ComponentError, GradCheckReport};
pub use primitive::Primitive;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
