//! Enhanced-interaction vision transformer blocks on a small CPU autodiff
//! engine.
//!
//! The crate is layered bottom-up:
//!
//! - [`tensor`] and [`autodiff`]: dense tensors and reverse-mode gradients.
//! - [`nn`]: parameter storage and the basic layers.
//! - [`acp`]: aggressive convolutional pooling, a depthwise/downscale
//!   pyramid projected back to input resolution and summed.
//! - [`cat`]: conceptual attention, pooling features into concept tokens and
//!   redistributing them back over positions.
//! - [`transformer`]: patch embedding, self-attention, and baseline vs
//!   enhanced blocks assembled into toy classification/box models.
//! - [`analysis`]: PCA projections, linear/kernel CKA, Otsu enhancement.
//! - [`data`]: the synthetic concealed-shapes dataset and preprocessing.
//! - [`harness`]: training, checkpoints, metrics, ablations, dumps.

pub mod acp;
pub mod analysis;
pub mod autodiff;
pub mod cat;
pub mod data;
pub mod error;
pub mod harness;
pub mod nn;
pub mod tensor;
pub mod transformer;

pub use error::{Error, Result};
pub use tensor::{Precision, Scalar, Tensor};
