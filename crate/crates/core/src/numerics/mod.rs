//! Dense tensor math shared by every stage.

pub mod gradcheck;
pub mod linear;
pub mod ops;
pub mod spectral;
mod tensor;

pub use gradcheck::{grad_check, max_relative_error, numerical_gradient};
pub use linear::LinearMap;
pub use ops::{
    activate, batch_norm_affine, layer_norm, matmul, softmax_lastdim, transpose_last2,
    Activation, BatchNorm, LayerNorm, Mode,
};
pub use spectral::spectral_filter;
pub use tensor::Tensor;

pub use num_complex::Complex64;
