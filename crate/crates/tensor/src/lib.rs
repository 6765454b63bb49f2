//! Dense `f32`/`f64` tensors, a tape-based reverse-mode differentiation
//! graph, and an Adam updater.

mod adam;
mod error;
mod graph;
pub mod gradcheck;
pub mod kernels;
mod scalar;
mod shape;
mod tensor;

pub use adam::{AdamConfig, AdamState, Moments};
pub use error::{Result, TensorError};
pub use graph::{Graph, Var};
pub use scalar::Scalar;
pub use shape::Shape;
pub use tensor::Tensor;
