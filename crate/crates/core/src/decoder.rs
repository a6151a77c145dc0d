//! Offline phase decoders. The capsule decoder reads capsule vectors, the
//! spatial decoder reads the latent code; neither ever sees the raw image.

use cevae_tensor::{Float, Param, ParamBuilder, Tensor};
use serde::{Deserialize, Serialize};
use std::sync::Arc;

use crate::blocks::{
    check_nchw, BlockConfig, Conv2d, ConvTranspose2d, GroupNorm, ResBlock, UpsampleBlock,
};
use crate::capsule::CapsuleVectors;
use crate::encoder::LatentCode;
use crate::error::{CoreError, Result};
use crate::image::CHANNELS;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderConfig {
    /// Channels entering each stage followed by the channels of the last
    /// stage; `len - 1` upsampling stages.
    pub channel_schedule: Vec<usize>,
    pub norm_groups: usize,
}

impl DecoderConfig {
    /// `[256, 256, 128, 128, 64]`: four stages, 16 -> 256 pixels.
    pub fn reference() -> Self {
        Self {
            channel_schedule: vec![256, 256, 128, 128, 64],
            norm_groups: 32,
        }
    }

    pub fn num_blocks(&self) -> usize {
        self.channel_schedule.len().saturating_sub(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channel_schedule.len() < 2
            || self.channel_schedule.contains(&0)
            || self.norm_groups == 0
        {
            return Err(CoreError::Config(format!(
                "invalid decoder config {self:?}"
            )));
        }
        Ok(())
    }
}

/// Decoder output clamped to `[-1, 1]`, `N x 3 x H x W`.
#[derive(Clone, Debug)]
pub struct EnhancedImage<T: Float>(Tensor<T>);

impl<T: Float> EnhancedImage<T> {
    pub fn from_raw(raw: &Tensor<T>) -> Self {
        Self(raw.detach().clamp(-1.0, 1.0))
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.0
    }
}

/// Group norm, swish, then a 3x3 convolution to RGB with no output activation.
struct OutputHead<T: Float> {
    norm: GroupNorm<T>,
    conv: Conv2d<T>,
}

impl<T: Float> OutputHead<T> {
    fn new(pb: &ParamBuilder<'_, T>, channels: usize, groups: usize) -> Self {
        Self {
            norm: GroupNorm::new(&pb.pp("norm"), channels, groups),
            conv: Conv2d::new(&pb.pp("conv"), channels, CHANNELS, 3, 1, 1),
        }
    }

    fn forward(&self, h: &Tensor<T>) -> Tensor<T> {
        self.conv.forward(&self.norm.forward(h).silu())
    }
}

/// `D_C`: repeated (residual block, 2x upsample block), then the RGB head.
pub struct CapsuleDecoder<T: Float> {
    cfg: DecoderConfig,
    stages: Vec<(ResBlock<T>, UpsampleBlock<T>)>,
    head: OutputHead<T>,
}

impl<T: Float> CapsuleDecoder<T> {
    pub fn new(pb: &ParamBuilder<'_, T>, cfg: DecoderConfig) -> Result<Self> {
        cfg.validate()?;
        let mut stages = Vec::new();
        for (k, pair) in cfg.channel_schedule.windows(2).enumerate() {
            let sp = pb.pp(format!("stage{k}"));
            let block = BlockConfig::new(pair[0], pair[1]).with_groups(cfg.norm_groups);
            let up = BlockConfig::new(pair[1], pair[1]).with_groups(cfg.norm_groups);
            stages.push((
                ResBlock::new(&sp.pp("res"), block)?,
                UpsampleBlock::new(&sp.pp("up"), up)?,
            ));
        }
        let last = *cfg.channel_schedule.last().expect("validated");
        let head = OutputHead::new(&pb.pp("head"), last, cfg.norm_groups);
        Ok(Self { cfg, stages, head })
    }

    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    /// Weight of the final convolution (the layer the adaptive GAN weight
    /// measures gradients at).
    pub fn last_layer(&self) -> &Arc<Param<T>> {
        &self.head.conv.weight
    }

    pub fn decode_capsule(&self, c: &CapsuleVectors<T>) -> Result<Tensor<T>> {
        check_nchw(c.tensor(), self.cfg.channel_schedule[0], "capsule decoder")
            .map_err(as_input)?;
        let mut h = c.tensor().clone();
        for (res, up) in &self.stages {
            h = up.forward(&res.forward(&h)?)?;
        }
        Ok(self.head.forward(&h))
    }
}

/// `D_S`: repeated (4x4 stride-2 transposed convolution, residual block),
/// then the RGB head.
pub struct SpatialDecoder<T: Float> {
    cfg: DecoderConfig,
    stages: Vec<(ConvTranspose2d<T>, ResBlock<T>)>,
    head: OutputHead<T>,
}

impl<T: Float> SpatialDecoder<T> {
    pub fn new(pb: &ParamBuilder<'_, T>, cfg: DecoderConfig) -> Result<Self> {
        cfg.validate()?;
        let mut stages = Vec::new();
        for (k, pair) in cfg.channel_schedule.windows(2).enumerate() {
            let sp = pb.pp(format!("stage{k}"));
            let up = ConvTranspose2d::new(&sp.pp("up"), pair[0], pair[1], 4, 2, 1);
            let block = BlockConfig::new(pair[1], pair[1]).with_groups(cfg.norm_groups);
            stages.push((up, ResBlock::new(&sp.pp("res"), block)?));
        }
        let last = *cfg.channel_schedule.last().expect("validated");
        let head = OutputHead::new(&pb.pp("head"), last, cfg.norm_groups);
        Ok(Self { cfg, stages, head })
    }

    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    pub fn last_layer(&self) -> &Arc<Param<T>> {
        &self.head.conv.weight
    }

    pub fn decode_spatial(&self, x: &LatentCode<T>) -> Result<Tensor<T>> {
        check_nchw(x.tensor(), self.cfg.channel_schedule[0], "spatial decoder")
            .map_err(as_input)?;
        let mut h = x.tensor().clone();
        for (up, res) in &self.stages {
            h = res.forward(&up.forward(&h))?;
        }
        Ok(self.head.forward(&h))
    }
}

fn as_input(e: CoreError) -> CoreError {
    match e {
        CoreError::Config(m) => CoreError::Input(m),
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use cevae_tensor::ParamStore;

    fn small() -> DecoderConfig {
        DecoderConfig {
            channel_schedule: vec![8, 4],
            norm_groups: 2,
        }
    }

    #[test]
    fn stages_double_resolution() {
        let store = ParamStore::<f32>::new(0);
        let dc = CapsuleDecoder::new(
            &store.root().pp("dc"),
            DecoderConfig {
                channel_schedule: vec![8, 8, 4],
                norm_groups: 2,
            },
        )
        .unwrap();
        let ds = SpatialDecoder::new(
            &store.root().pp("ds"),
            DecoderConfig {
                channel_schedule: vec![8, 8, 4],
                norm_groups: 2,
            },
        )
        .unwrap();
        assert_eq!((dc.num_stages(), ds.num_stages()), (2, 2));
        let x = LatentCode::new(Tensor::zeros(&[1, 8, 3, 3])).unwrap();
        assert_eq!(ds.decode_spatial(&x).unwrap().dims(), &[1, 3, 12, 12]);
    }

    #[test]
    fn wrong_channels_is_input_error() {
        let store = ParamStore::<f32>::new(0);
        let ds = SpatialDecoder::new(&store.root(), small()).unwrap();
        let x = LatentCode::new(Tensor::zeros(&[1, 5, 2, 2])).unwrap();
        assert!(matches!(ds.decode_spatial(&x), Err(CoreError::Input(_))));
    }

    #[test]
    fn zero_weights_give_bias_image() {
        let store = ParamStore::<f64>::new(0);
        let ds = SpatialDecoder::new(&store.root(), small()).unwrap();
        for p in store.all() {
            if !p.name().starts_with("head.conv.bias") {
                p.fill(0.0);
            }
        }
        let bias = store.get("head.conv.bias").unwrap().tensor().to_vec();
        let x = LatentCode::new(Tensor::full(&[1, 8, 2, 2], 0.7)).unwrap();
        let y = ds.decode_spatial(&x).unwrap();
        for c in 0..3 {
            assert!(y.data()[c * 16..(c + 1) * 16].iter().all(|&v| v == bias[c]));
        }
    }
}
