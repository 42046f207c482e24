//! A compact reverse-mode autodiff engine over dense NCHW-style tensors.
//!
//! The engine is generic over [`Scalar`] (`f32` and `f64`). Matrix products go
//! through `matrixmultiply`; everything else is plain loops.

pub mod gradcheck;
pub mod graph;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod tensor;

pub use graph::{Gradients, Tape, Var};
pub use optim::{clip_global_norm, Adam, AdamConfig};
pub use params::{Ctx, Param, ParamBuilder, ParamId, ParamStore};
pub use scalar::{lit, Scalar};
pub use tensor::{broadcast_shape, reflect_index, Tensor};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
