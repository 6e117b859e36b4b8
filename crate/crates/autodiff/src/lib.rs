//! Dense tensors and a reverse-mode tape for small convolutional networks.
//!
//! Convolutions run as im2col + GEMM over NCHW batches; images of a batch
//! are processed in parallel when the `parallel` feature is on (see
//! [`par`]). Every op is generic over [`Real`], so the same network code
//! trains in `f32` and is gradient-checked in `f64`.

mod error;
pub mod gradcheck;
mod graph;
mod kernels;
pub mod par;
mod real;
mod tensor;

pub use error::{Error, Result};
pub use graph::{Activation, Gradients, Graph, Var};
pub use kernels::ConvGeom;
pub use real::Real;
pub use tensor::Tensor;
