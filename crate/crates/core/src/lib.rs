//! Federated U-Net segmentation simulator.
//!
//! The crate is layered bottom-up:
//!
//! - [`tensor`]: dense tensors, reverse-mode autodiff and the layer ops.
//! - [`unet`]: the encoder/decoder network, its layer plan, loss and checkpoints.
//! - [`dataset`]: image/mask ingestion, augmentation, synthetic plates, crop export.
//! - [`federation`]: client partitioning, client pipelines and round orchestration.
//! - [`aggregators`]: mean, fixed-clip DP and adaptive-clip DP update combiners.
//! - [`metrics`]: overlap, error, similarity and ranking metrics plus reports.

pub mod aggregators;
pub mod dataset;
pub mod error;
pub mod federation;
pub mod fsio;
pub mod metrics;
pub mod rng;
pub mod tensor;
pub mod unet;
pub mod weights;

pub use error::{Error, ErrorKind, Result};
pub use tensor::Tensor;
