//! Capsule-enhanced variational autoencoder for underwater image enhancement.
//!
//! An encoder compresses a degraded image into a small latent code. A capsule
//! layer and two decoders later rebuild the enhanced image from that code alone.

pub mod blocks;
pub mod capsule;
pub mod codec;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod image;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod trainer;

pub use capsule::{CapsuleClustering, CapsuleConfig, CapsuleVectors};
pub use decoder::{CapsuleDecoder, DecoderConfig, EnhancedImage, SpatialDecoder};
pub use encoder::{Encoder, EncoderConfig, LatentCode};
pub use error::{CoreError, Result};
pub use image::Image;
pub use model::{AblationMode, Branches, CeVae, ModelConfig};
