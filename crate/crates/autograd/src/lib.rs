//! Reverse-mode automatic differentiation over dense row-major tensors.
//!
//! Everything is generic over [`Scalar`] (`f32` for training, `f64` for
//! gradient checks); the aliases below name the two concrete instantiations.

pub mod check;
pub mod conv;
pub mod graph;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod tensor;

pub use conv::ConvGeom;
pub use graph::{Gradients, Graph, Var};
pub use optim::{clip_grad_norm, AdamW};
pub use params::{ParamEntry, ParamId, ParamStore};
pub use scalar::{DType, Scalar};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("shape error: {0}")]
    Shape(String),
}

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = Graph<f32>;
pub type Graph64 = Graph<f64>;
pub type ParamStore32 = ParamStore<f32>;
pub type ParamStore64 = ParamStore<f64>;
