//! Minimal dense-tensor engine with reverse-mode differentiation.
//!
//! Operations are recorded on a [`Tape`] as they execute. [`Tape::grad`] walks
//! the log backwards; with [`GradMode::CreateGraph`] the walk is recorded too,
//! so gradients of gradients (as needed for differentiating through an
//! optimizer step) come from a second call.
//!
//! ```
//! use autodiff::{GradMode, Tape, Tensor};
//!
//! let tape = Tape::new();
//! let x = tape.leaf(Tensor::scalar(3.0));
//! let y = x.square().unwrap();
//! let dy = tape.grad(&y, &[&x], GradMode::CreateGraph).unwrap().remove(0);
//! assert_eq!(dy.item(), 6.0);
//! let d2y = tape.gradients(&dy, &[&x]).unwrap().remove(0);
//! assert_eq!(d2y.item(), 2.0);
//! ```

mod check;
mod error;
mod ops;
mod sample;
mod tape;
mod tensor;

pub mod suite;

pub use check::{check_gradient, gradient_errors};
pub use error::{AdError, Result};
pub use sample::{bilinear_sample, Sampled, EDGE_TOLERANCE};
pub use tape::{GradMode, Tape, Var};
pub use tensor::{numel, Tensor, PAD};
