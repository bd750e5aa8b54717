//! Dense tensors, differentiable primitives, and standalone numerical kernels.

pub mod gradcheck;
pub mod image;
pub mod kernels;
pub mod ops;
pub mod sparsemax;
pub mod tape;
pub mod tensor;

pub use gradcheck::{grad_check, GradCheckReport, ParamSpec};
pub use image::{bilinear_upsample, gaussian_blur, top_fraction_mean};
pub use ops::{cosine_sim, depthwise_conv3x3, dot, gelu, l2_normalize, layer_norm, linear, norm, normalized, relu};
pub use sparsemax::sparsemax;
pub use tape::{Gradients, Precision, Tape, Var};
pub use tensor::Tensor;
