//! Numerical substrate: matrices, elementwise ops, SVD and a seeded RNG.

mod matrix;
mod ops;
mod rng;
mod svd;

pub use matrix::{rel_err_rows, Dtype, Matrix, Scalar};
pub use ops::{
    gelu, gelu_grad, kl_divergence, layer_norm, layer_norm_rows, layer_norm_rows_backward,
    normal_cdf, softmax_rows, softmax_slice, LayerNormCache,
};
pub use rng::{derive_seed, Rng};
pub use svd::{svd_values, MAX_SVD_DIM};
