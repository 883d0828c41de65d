//! Minimal double-precision tensor engine: dense arrays, a reverse-mode
//! tape, convolution and recurrent kernels, Adam, and gradient checking.

mod adam;
mod backward;
mod conv;
mod error;
mod fused;
mod gradcheck;
mod graph;
mod linalg;
mod math;
mod rng;
mod tensor;

pub use adam::{clip_grad_norm, Adam, AdamConfig};
pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, grad_check_many, relative_error};
pub use graph::{BinaryOp, Graph, UnaryOp, Var};
pub use rng::{splitmix64, Rng};
pub use tensor::Tensor;
