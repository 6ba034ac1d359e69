//! Dense tensors and reverse-mode differentiation.

pub mod attention;
mod error;
pub mod fft;
pub mod gradcheck;
mod graph;
mod params;
mod scalar;
#[allow(clippy::module_inception)]
mod tensor;

pub use attention::AttentionLayout;
pub use error::TensorError;
pub use graph::{softmax_values, Gradients, Graph, SparseMap, Var, LAYER_NORM_EPS};
pub use params::{Param, ParamId, ParamStore};
pub use scalar::{DType, Scalar};
pub use tensor::Tensor;
