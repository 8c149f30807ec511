//! Encoder-decoder segmentation of tubule epithelium in histology images.
//!
//! The crate is self-contained: a small reverse-mode autodiff engine
//! ([`tensor`]), the ResNet-encoder / attention-decoder network ([`nn`]),
//! training objectives ([`losses`]), augmentation ([`augment`]), seeded
//! watershed post-processing ([`postprocess`]), evaluation ([`metrics`]),
//! synthetic data and file I/O ([`data`]) and the training / cross-validation
//! pipeline ([`pipeline`]).

pub mod augment;
pub mod data;
pub mod error;
pub mod losses;
pub mod mask;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod postprocess;
pub mod seed;
pub mod tensor;

pub use error::{Error, Result};
pub use image::RgbImage;
pub use mask::{InstanceMap, LabelMask};
pub use tensor::{Graph, Precision, Real, Tensor, Var};
