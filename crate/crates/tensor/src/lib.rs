//! Dense `f64` tensors with reverse-mode automatic differentiation.
//!
//! Operations are methods on [`Tensor`]. Each result records a backward
//! closure when gradients are enabled and any input requires them; calling
//! [`Tensor::backward`] on a scalar walks the recorded graph and adds
//! gradients into every reachable tensor that requires them.
//!
//! ```
//! use mcsae_tensor::Tensor;
//!
//! let x = Tensor::new(&[2], vec![3.0, -1.0]).unwrap().requires_grad();
//! let loss = x.mul(&x).unwrap().sum();
//! loss.backward().unwrap();
//! assert_eq!(x.grad().unwrap(), vec![6.0, -2.0]);
//! ```

pub mod checkpoint;
mod error;
mod gradcheck;
mod ops;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, grad_check_params};
pub use ops::{ConvGeometry, Mode, RunningStats, BN_EPSILON, BN_MOMENTUM};
pub use tensor::{is_grad_enabled, no_grad, ParamRegistry, Parameter, Tensor};
