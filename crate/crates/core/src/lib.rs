//! Asymmetrical bottleneck networks on a small, dependency-light tensor core:
//! NCHW tensors with hand-written forward/backward ops, the inverted
//! residual, pruned and asymmetrical blocks, MobileNet-family network
//! builders, MAdds/parameter accounting, and a toy SGD trainer.

pub mod arch;
pub mod blocks;
pub mod channels;
pub mod cost;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod network;
pub mod ops;
pub mod params;
pub mod specfile;
pub mod tensor;
pub mod train;
pub mod weights;

pub use error::{Error, Result};
pub use tensor::{DType, Element, Shape, Tensor};
