//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! The operator set is deliberately small: convolutions (with stride, padding
//! and dilation), nearest upsampling, channel concatenation, a few pointwise
//! nonlinearities and reductions. Gradients are recorded on the same tape as
//! the forward pass, so second-order quantities such as gradient penalties can
//! be differentiated directly.
//!
//! ```
//! use autodiff::{Tape, Tensor};
//!
//! let tape = Tape::new();
//! let x = tape.leaf(Tensor::new(vec![2], vec![2.0, 3.0]).unwrap());
//! let y = x.mul(x).unwrap().sum().unwrap();
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[4.0, 6.0]);
//! ```

mod error;
mod gradcheck;
pub mod kernels;
mod suite;
mod tape;
mod tensor;

pub use error::{AutodiffError, Result};
pub use gradcheck::{grad_check, grad_check_with, GradCheckOptions, GradCheckReport};
pub use kernels::ConvGeom;
pub use suite::{op_suite, project, SuiteRow, SUITE_EPS};
pub use tape::{expand_mask, sigmoid, softplus, Gradients, MaskedMean, Tape, Var};
pub use tensor::Tensor;
