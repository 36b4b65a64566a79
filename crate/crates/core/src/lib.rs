//! A small, self-contained deep-learning library built around the MVANet
//! multi-branch presentation-attack-detection network.
//!
//! The crate provides dense tensors with reverse-mode automatic
//! differentiation over a dynamically recorded tape, the layers MVANet needs
//! (convolution, pooling, batch normalization, dropout, linear, softmax
//! cross-entropy), the model itself with checkpointing and feature export,
//! an Adam trainer, and dataset plumbing (manifests, PGM images, a seeded
//! synthetic texture generator, protocol splits).
//!
//! All numeric code is generic over the scalar type via [`Scalar`]
//! (`f32`/`f64`). Training conventionally runs in `f32`; gradient checking
//! requires `f64` because finite-difference noise in single precision masks
//! real defects. Concrete aliases for both live at the crate root.
//!
//! Determinism is a design constraint throughout: every random draw comes
//! from the documented [`rng::Rng`] stream, so identical seeds reproduce
//! identical tensors, masks, shuffles, and generated datasets bit for bit.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod export;
pub mod gradcheck;
pub mod layers;
pub mod model;
pub mod optim;
pub mod rng;
pub mod scalar;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use rng::Rng;
pub use scalar::Scalar;
pub use tape::{Mode, Tape, VarId};
pub use tensor::Tensor;

/// Training-precision tensor.
pub type Tensor32 = tensor::Tensor<f32>;
/// Gradient-check-precision tensor.
pub type Tensor64 = tensor::Tensor<f64>;
/// Training-precision model.
pub type Model32 = model::Model<f32>;
/// Gradient-check-precision model.
pub type Model64 = model::Model<f64>;
