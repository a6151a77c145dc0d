//! The full model: encoder, capsule layer and the two decoders sharing one
//! parameter store.

use std::str::FromStr;
use std::sync::Arc;

use cevae_tensor::{no_grad, Float, Param, ParamStore, Tensor};
use serde::{Deserialize, Serialize};

use crate::capsule::{CapsuleClustering, CapsuleConfig, CapsuleVectors};
use crate::decoder::{CapsuleDecoder, DecoderConfig, EnhancedImage, SpatialDecoder};
use crate::encoder::{Encoder, EncoderConfig, LatentCode};
use crate::error::{CoreError, Result};
use crate::image::Image;

/// Which decoder branches exist.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AblationMode {
    #[default]
    Full,
    NoSpatial,
    NoCapsule,
}

impl AblationMode {
    pub fn has_capsule(self) -> bool {
        self != AblationMode::NoCapsule
    }

    pub fn has_spatial(self) -> bool {
        self != AblationMode::NoSpatial
    }

    pub fn as_str(self) -> &'static str {
        match self {
            AblationMode::Full => "full",
            AblationMode::NoSpatial => "no_spatial",
            AblationMode::NoCapsule => "no_capsule",
        }
    }
}

impl FromStr for AblationMode {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Self::Full),
            "no_spatial" => Ok(Self::NoSpatial),
            "no_capsule" => Ok(Self::NoCapsule),
            other => Err(CoreError::Config(format!(
                "unknown ablation mode '{other}' (expected full, no_spatial or no_capsule)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_size: usize,
    pub encoder: EncoderConfig,
    pub capsule: CapsuleConfig,
    pub decoder: DecoderConfig,
    #[serde(default)]
    pub mode: AblationMode,
}

impl ModelConfig {
    /// 256x256 input, 16x16x256 latent.
    pub fn reference() -> Self {
        Self {
            image_size: 256,
            encoder: EncoderConfig::reference(),
            capsule: CapsuleConfig::reference(),
            decoder: DecoderConfig::reference(),
            mode: AblationMode::Full,
        }
    }

    /// Small enough to train on one CPU core in minutes: 32x32 input, 8x8x32
    /// latent.
    pub fn desk() -> Self {
        Self {
            image_size: 32,
            encoder: EncoderConfig {
                num_blocks: 3,
                channel_schedule: vec![16, 32, 32],
                attention_resolution_threshold: 8,
                attention_everywhere: false,
                latent_channels: 32,
                norm_groups: 8,
            },
            capsule: CapsuleConfig {
                primary_types: 8,
                primary_dim: 8,
                kernel: 4,
                output_capsules: 8,
                output_dim: 8,
                routing_iterations: 3,
                out_channels: 32,
            },
            decoder: DecoderConfig {
                channel_schedule: vec![32, 32, 16],
                norm_groups: 8,
            },
            mode: AblationMode::Full,
        }
    }

    pub fn latent_size(&self) -> usize {
        self.image_size / self.encoder.spatial_factor()
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.capsule.validate()?;
        self.decoder.validate()?;
        let factor = self.encoder.spatial_factor();
        if self.image_size == 0 || !self.image_size.is_multiple_of(factor) {
            return Err(CoreError::Config(format!(
                "image size {} is not divisible by {factor}",
                self.image_size
            )));
        }
        if self.decoder.num_blocks() != self.encoder.downsamples() {
            return Err(CoreError::Config(format!(
                "decoder has {} stages but the encoder halves the resolution {} times",
                self.decoder.num_blocks(),
                self.encoder.downsamples()
            )));
        }
        let latent = self.encoder.latent_channels;
        if self.decoder.channel_schedule[0] != latent || self.capsule.out_channels != latent {
            return Err(CoreError::Config(format!(
                "decoder input ({}) and capsule output ({}) must match the {latent} latent channels",
                self.decoder.channel_schedule[0], self.capsule.out_channels
            )));
        }
        if self.latent_size() < self.capsule.kernel {
            return Err(CoreError::Config(format!(
                "latent grid {} is smaller than the capsule kernel {}",
                self.latent_size(),
                self.capsule.kernel
            )));
        }
        Ok(())
    }
}

/// Outputs of the two branches before summation.
#[derive(Clone, Debug)]
pub struct Branches<T: Float> {
    pub capsule: Option<Tensor<T>>,
    pub spatial: Option<Tensor<T>>,
}

impl<T: Float> Branches<T> {
    /// Unclamped element-wise sum of the branches that exist.
    pub fn sum(&self) -> Tensor<T> {
        match (&self.capsule, &self.spatial) {
            (Some(c), Some(s)) => c + s,
            (Some(c), None) => c.clone(),
            (None, Some(s)) => s.clone(),
            (None, None) => unreachable!("a model always has at least one branch"),
        }
    }
}

pub struct CeVae<T: Float> {
    cfg: ModelConfig,
    store: ParamStore<T>,
    encoder: Encoder<T>,
    capsules: Option<CapsuleClustering<T>>,
    capsule_decoder: Option<CapsuleDecoder<T>>,
    spatial_decoder: Option<SpatialDecoder<T>>,
}

// Each module draws its initial weights from its own stream, so a branch has
// the same weights whether or not the other branch was built.
fn module_seed(seed: u64, module: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(module)
}

impl<T: Float> CeVae<T> {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let store = ParamStore::new(seed);
        let root = store.root();
        store.reseed(module_seed(seed, 0));
        let encoder = Encoder::new(&root.pp("encoder"), cfg.encoder.clone(), cfg.image_size)?;
        let (capsules, capsule_decoder) = if cfg.mode.has_capsule() {
            store.reseed(module_seed(seed, 1));
            let caps = CapsuleClustering::new(
                &root.pp("capsule"),
                cfg.capsule.clone(),
                cfg.encoder.latent_channels,
            )?;
            store.reseed(module_seed(seed, 2));
            let dec = CapsuleDecoder::new(&root.pp("capsule_decoder"), cfg.decoder.clone())?;
            (Some(caps), Some(dec))
        } else {
            (None, None)
        };
        let spatial_decoder = if cfg.mode.has_spatial() {
            store.reseed(module_seed(seed, 3));
            Some(SpatialDecoder::new(
                &root.pp("spatial_decoder"),
                cfg.decoder.clone(),
            )?)
        } else {
            None
        };
        Ok(Self {
            cfg,
            store,
            encoder,
            capsules,
            capsule_decoder,
            spatial_decoder,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn mode(&self) -> AblationMode {
        self.cfg.mode
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn encoder(&self) -> &Encoder<T> {
        &self.encoder
    }

    pub fn capsules(&self) -> Option<&CapsuleClustering<T>> {
        self.capsules.as_ref()
    }

    pub fn capsule_decoder(&self) -> Option<&CapsuleDecoder<T>> {
        self.capsule_decoder.as_ref()
    }

    pub fn spatial_decoder(&self) -> Option<&SpatialDecoder<T>> {
        self.spatial_decoder.as_ref()
    }

    /// Switches batch-norm layers between batch statistics and running
    /// estimates.
    pub fn set_training(&self, training: bool) {
        self.encoder.set_training(training);
    }

    /// Last convolution weight of the capsule decoder, or of the spatial
    /// decoder when the capsule branch is absent.
    pub fn last_layer(&self) -> &Arc<Param<T>> {
        match (&self.capsule_decoder, &self.spatial_decoder) {
            (Some(d), _) => d.last_layer(),
            (None, Some(d)) => d.last_layer(),
            (None, None) => unreachable!("a model always has at least one branch"),
        }
    }

    pub fn encode(&self, images: &Tensor<T>) -> Result<LatentCode<T>> {
        self.encoder.encode(images)
    }

    pub fn capsule_vectors(&self, x: &LatentCode<T>) -> Result<CapsuleVectors<T>> {
        self.capsules
            .as_ref()
            .ok_or_else(|| CoreError::Config("model was built without the capsule branch".into()))?
            .capsule_vectors(x)
    }

    pub fn branches(&self, x: &LatentCode<T>) -> Result<Branches<T>> {
        let want = [
            self.cfg.encoder.latent_channels,
            self.cfg.latent_size(),
            self.cfg.latent_size(),
        ];
        if x.shape() != want {
            return Err(CoreError::Input(format!(
                "latent code is {:?} but this model decodes {want:?}",
                x.shape()
            )));
        }
        let capsule = match &self.capsule_decoder {
            Some(dec) => Some(dec.decode_capsule(&self.capsule_vectors(x)?)?),
            None => None,
        };
        let spatial = match &self.spatial_decoder {
            Some(dec) => Some(dec.decode_spatial(x)?),
            None => None,
        };
        Ok(Branches { capsule, spatial })
    }

    /// Unclamped decoder output; this is what the losses see.
    pub fn decode_raw(&self, x: &LatentCode<T>) -> Result<Tensor<T>> {
        let out = self.branches(x)?.sum();
        if !out.all_finite() {
            return Err(CoreError::Numeric(
                "non-finite values in decoder output".into(),
            ));
        }
        Ok(out)
    }

    /// Images through the whole model, unclamped and recording gradients.
    pub fn forward(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        self.decode_raw(&self.encode(images)?)
    }

    /// Inference from a latent code alone, clamped to `[-1, 1]`.
    pub fn enhance(&self, x: &LatentCode<T>) -> Result<EnhancedImage<T>> {
        let _guard = no_grad();
        Ok(EnhancedImage::from_raw(&self.decode_raw(x)?))
    }

    pub fn enhance_image(&self, img: &Image) -> Result<Image> {
        let x = {
            let _guard = no_grad();
            self.encode(&img.to_tensor())?
        };
        Image::from_tensor(self.enhance(&x)?.tensor(), 0)
    }

    /// A model with the named branch removed, sharing this model's weights
    /// for everything it keeps.
    pub fn ablation_variant(&self, mode: AblationMode) -> Result<Self> {
        let mut cfg = self.cfg.clone();
        cfg.mode = mode;
        let variant = Self::new(cfg, 0)?;
        for p in variant.store.all() {
            let src = self.store.get(p.name()).ok_or_else(|| {
                CoreError::Contract(format!("parameter {} missing from source model", p.name()))
            })?;
            p.set(src.tensor().to_vec());
        }
        Ok(variant)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        ModelConfig::reference().validate().unwrap();
        ModelConfig::desk().validate().unwrap();
        assert_eq!(ModelConfig::reference().latent_size(), 16);
        assert_eq!(ModelConfig::reference().decoder.num_blocks(), 4);
    }

    #[test]
    fn mode_parsing() {
        assert_eq!(
            "no_spatial".parse::<AblationMode>().unwrap(),
            AblationMode::NoSpatial
        );
        assert!(matches!(
            "no_decoder".parse::<AblationMode>(),
            Err(CoreError::Config(_))
        ));
    }

    #[test]
    fn branch_weights_independent_of_other_branch() {
        let full = CeVae::<f32>::new(ModelConfig::desk(), 5).unwrap();
        let mut cfg = ModelConfig::desk();
        cfg.mode = AblationMode::NoCapsule;
        let spatial_only = CeVae::<f32>::new(cfg, 5).unwrap();
        for p in spatial_only.store().all() {
            assert_eq!(
                p.tensor().to_vec(),
                full.store().get(p.name()).unwrap().tensor().to_vec()
            );
        }
        assert!(spatial_only.capsules().is_none());
    }

    #[test]
    fn desk_round_trip_shape() {
        let m = CeVae::<f32>::new(ModelConfig::desk(), 1).unwrap();
        let out = m.enhance_image(&Image::filled(32, 32, 0.0)).unwrap();
        assert_eq!((out.height(), out.width()), (32, 32));
        assert!(out.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }
}
