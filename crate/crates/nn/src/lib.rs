//! Minimal define-by-run autograd for convolutional networks.
//!
//! Activations use the channel-major batch layout `[C, N, H, W]`; every
//! convolution lowers to one `im2col` + GEMM. The engine is generic over
//! [`Float`] so the same network can be trained in `f32` and checked
//! against finite differences in `f64`.

mod float;
mod graph;
mod ops;
mod optim;
mod params;
mod tensor;

pub use float::{gemm, Float};
pub use graph::{BnUpdate, Function, Gradients, Graph, Var};
pub use ops::IGNORE_LABEL;
pub use optim::{Adam, LrSchedule, Optimizer, Sgd};
pub use params::{kaiming_normal, normal, uniform_fan_in, ParamEntry, ParamId, ParamKind, ParamStore};
pub use tensor::Tensor;
