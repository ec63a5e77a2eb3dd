//! Siamese bitemporal change-detection network.
//!
//! A shared ResNet-style encoder produces four feature stages per image.
//! Absolute stage differences are projected to a common decoder width,
//! passed through an atrous pyramid bottleneck, then fused coarse-to-fine by
//! blocks that sum a local convolutional branch and a global transformer
//! branch. Two heads (convolutional and transformer) emit per-pixel change
//! probabilities.

pub mod checkpoint;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod network;
pub mod params;

pub use error::{ModelError, Result};
pub use network::{normalize_images, probabilities, ChangeNet, NetConfig, NetOutput, MAX_ATTENTION_TOKENS};
pub use params::{Fwd, ParamStore};
