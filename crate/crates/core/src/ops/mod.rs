//! Primitive layers with explicit forward and backward passes.

pub mod activation;
pub mod batchnorm;
pub mod conv;
pub mod loss;
pub mod se;

pub use activation::{activation_backward, activation_forward, Activation};
pub use batchnorm::{
    batchnorm_backward, batchnorm_forward, BatchNormState, BnCache, BnConfig, BnParams, BnStats,
    Mode,
};
pub use conv::{conv2d_backward, conv2d_forward, ConvParams};
pub use loss::{argmax_rows, softmax_cross_entropy};
pub use se::{squeeze_excite, squeeze_excite_backward, SeCache};
