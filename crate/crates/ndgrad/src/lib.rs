//! Reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! Values live on a [`Tape`]; each operation on a [`Var`] appends a node. A
//! reverse pass ([`Tape::backward`] or [`Tape::grad`]) walks the tape from a
//! scalar root. In create-graph mode the reverse pass is itself recorded, so
//! a function of a gradient (for example the norm of `∂Q/∂a`) can be
//! differentiated again with respect to network weights.
//!
//! ```
//! use ndgrad::{Array, Tape};
//!
//! let tape = Tape::new();
//! let x = tape.param(Array::scalar(2.0));
//! let y = x * x * x;
//! let dy = tape.grad(y, &[x], true).unwrap()[0];
//! let d2y = tape.grad(dy, &[x], false).unwrap()[0];
//! assert_eq!(dy.item(), 12.0);
//! assert_eq!(d2y.item(), 12.0);
//! ```

mod array;
mod error;
pub mod gradcheck;
mod tape;

pub use array::{broadcast_shapes, Array};
pub use error::{NdError, Result};
pub use tape::{Gradients, Tape, Var};
