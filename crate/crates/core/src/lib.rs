//! Localizing visual domain shift inside images.
//!
//! A binary domain discriminator is trained on whole-image features; each
//! image is then densely occluded and the (discriminator-weighted) feature
//! change caused by every occluder is accumulated into a per-pixel
//! *domainness* map. Maps drive two downstream uses: foreground/background
//! analysis against object masks, and low/mid/high domainness patch
//! descriptors whose classifiers are fused with a whole-image classifier.

// `!(x > 0.0)` is deliberate: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adaptation;
pub mod analysis;
pub mod cache;
pub mod classifier;
pub mod error;
pub mod extractor;
pub mod format;
pub mod fusion;
pub mod image;
pub mod levels;
pub mod manifest;
pub mod occlusion;
pub mod pipeline;
pub mod synth;
pub mod types;

pub use error::{Error, Result};
pub use image::{ImageTensor, SegMask};
pub use types::{DomainnessMap, FeatureVector};
