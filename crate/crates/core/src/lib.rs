//! Wavelet-guided forgery detection, localization and explanation.
//!
//! The pipeline: a single-level Haar transform isolates the HH sub-band,
//! which queries the RGB image through cross-attention; the attended
//! values return to image space as a residual. Detection, mask and
//! explanation heads run on the fused image. Training combines text, class,
//! BCE + Dice mask and InfoNCE contrastive terms. A procedural generator
//! provides copy-move and splicing samples with exact masks.

pub mod datagen;
pub mod error;
pub mod faf;
pub mod heads;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod objectives;
pub mod pnm;
pub mod trainer;
pub mod wavelet;

pub use error::{Error, Result};
