//! Minimal dense tensor library with dynamic-graph reverse-mode automatic
//! differentiation, generic over `f32` and `f64`.

mod error;
mod float;
pub mod gradcheck;
mod graph;
mod tensor;

pub use error::{Result, TensorError};
pub use float::{DType, Float};
pub use graph::{matmul_raw, sigmoid, transpose_raw, Graph, Var};
pub use tensor::Tensor;
