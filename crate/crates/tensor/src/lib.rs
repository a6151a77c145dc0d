//! A compact reverse-mode automatic differentiation engine over dense
//! row-major tensors, with the convolution and normalization primitives the
//! CE-VAE models need. Generic over `f32` (training, inference) and `f64`
//! (gradient checks).

mod float;
pub mod gradcheck;
mod ops;
mod params;
mod tensor;

pub use float::Float;
pub use ops::{conv2d_output_size, conv_transpose2d_output_size};
pub use params::{Init, Param, ParamBuilder, ParamStore};
pub use tensor::{is_grad_enabled, no_grad, GradStore, NoGradGuard, Tensor};
