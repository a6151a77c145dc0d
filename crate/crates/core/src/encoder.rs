//! Online phase: project a degraded image onto the compact latent code.

use std::time::Instant;

use cevae_tensor::{no_grad, Float, ParamBuilder, Tensor};
use serde::{Deserialize, Serialize};

use crate::blocks::{
    BatchNorm, BlockConfig, Conv2d, Downsample, FeatureMap, ResBlock, SelfAttention,
};
use crate::error::{CoreError, Result};
use crate::image::{Image, CHANNELS};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub num_blocks: usize,
    pub channel_schedule: Vec<usize>,
    /// Blocks running at or below this resolution get self-attention.
    pub attention_resolution_threshold: usize,
    /// Apply attention in every block regardless of resolution.
    pub attention_everywhere: bool,
    pub latent_channels: usize,
    pub norm_groups: usize,
}

impl EncoderConfig {
    /// Five blocks, `[64, 128, 128, 256, 256]`, 256 latent channels.
    pub fn reference() -> Self {
        Self {
            num_blocks: 5,
            channel_schedule: vec![64, 128, 128, 256, 256],
            attention_resolution_threshold: 32,
            attention_everywhere: false,
            latent_channels: 256,
            norm_groups: 32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_blocks == 0 {
            return Err(CoreError::Config("encoder needs at least one block".into()));
        }
        if self.channel_schedule.len() != self.num_blocks {
            return Err(CoreError::Config(format!(
                "channel schedule has {} entries for {} blocks",
                self.channel_schedule.len(),
                self.num_blocks
            )));
        }
        if self.channel_schedule.contains(&0) || self.latent_channels == 0 {
            return Err(CoreError::Config("channel counts must be positive".into()));
        }
        Ok(())
    }

    /// Number of resolution halvings, one between every two blocks.
    pub fn downsamples(&self) -> usize {
        self.num_blocks - 1
    }

    pub fn spatial_factor(&self) -> usize {
        1 << self.downsamples()
    }
}

/// The encoder output: the only data kept on the device and handed to the
/// decoders. Shape `N x C_X x H_X x W_X`.
#[derive(Clone, Debug)]
pub struct LatentCode<T: Float>(Tensor<T>);

impl<T: Float> LatentCode<T> {
    pub fn new(t: Tensor<T>) -> Result<Self> {
        if t.rank() != 4 || t.dims().contains(&0) {
            return Err(CoreError::Input(format!(
                "latent code must be N x C x H x W, got {:?}",
                t.dims()
            )));
        }
        Ok(Self(t))
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.0
    }

    pub fn batch(&self) -> usize {
        self.0.dim(0)
    }

    /// `(C, H, W)` of one code.
    pub fn shape(&self) -> [usize; 3] {
        [self.0.dim(1), self.0.dim(2), self.0.dim(3)]
    }

    /// Code `index` of the batch as its own single-item latent.
    pub fn item(&self, index: usize) -> Result<Self> {
        if index >= self.batch() {
            return Err(CoreError::Input(format!(
                "latent index {index} out of {}",
                self.batch()
            )));
        }
        Self::new(self.0.narrow(0, index, 1))
    }
}

struct EncodingBlock<T: Float> {
    res: ResBlock<T>,
    attention: Option<SelfAttention<T>>,
    down: Option<Downsample<T>>,
}

pub struct Encoder<T: Float> {
    cfg: EncoderConfig,
    stem: Conv2d<T>,
    blocks: Vec<EncodingBlock<T>>,
    out_norm: BatchNorm<T>,
    out_conv: Conv2d<T>,
}

impl<T: Float> Encoder<T> {
    /// `image_size` is the design resolution used to decide which blocks get
    /// self-attention.
    pub fn new(pb: &ParamBuilder<'_, T>, cfg: EncoderConfig, image_size: usize) -> Result<Self> {
        cfg.validate()?;
        let first = cfg.channel_schedule[0];
        let stem = Conv2d::new(&pb.pp("stem"), CHANNELS, first, 3, 1, 1);
        let mut blocks = Vec::with_capacity(cfg.num_blocks);
        let mut cin = first;
        let mut resolution = image_size;
        for (l, &cout) in cfg.channel_schedule.iter().enumerate() {
            let bp = pb.pp(format!("block{l}"));
            let res = ResBlock::new(
                &bp.pp("res"),
                BlockConfig::new(cin, cout).with_groups(cfg.norm_groups),
            )?;
            let attention = (cfg.attention_everywhere
                || resolution <= cfg.attention_resolution_threshold)
                .then(|| SelfAttention::new(&bp.pp("attn"), cout, cfg.norm_groups));
            let down = (l + 1 < cfg.num_blocks).then(|| Downsample::new(&bp.pp("down"), cout));
            blocks.push(EncodingBlock {
                res,
                attention,
                down,
            });
            cin = cout;
            resolution = resolution.div_ceil(2);
        }
        let out_norm = BatchNorm::new(&pb.pp("out_norm"), cin);
        let out_conv = Conv2d::new(&pb.pp("out_conv"), cin, cfg.latent_channels, 3, 1, 1);
        Ok(Self {
            cfg,
            stem,
            blocks,
            out_norm,
            out_conv,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    /// Which blocks carry a self-attention term.
    pub fn attention_blocks(&self) -> Vec<bool> {
        self.blocks.iter().map(|b| b.attention.is_some()).collect()
    }

    pub fn num_downsamples(&self) -> usize {
        self.blocks.iter().filter(|b| b.down.is_some()).count()
    }

    pub fn set_training(&self, training: bool) {
        self.out_norm.set_training(training);
        for b in &self.blocks {
            b.res.set_training(training);
        }
    }

    /// First 3x3 convolution on an `N x 3 x H x W` batch.
    pub fn stem(&self, images: &Tensor<T>) -> Result<FeatureMap<T>> {
        match images.dims() {
            &[_, c, h, w] if h > 0 && w > 0 => {
                if c != CHANNELS {
                    return Err(CoreError::Input(format!(
                        "expected 3 image channels, got {c}"
                    )));
                }
            }
            d => {
                return Err(CoreError::Input(format!(
                    "expected N x 3 x H x W images, got {d:?}"
                )))
            }
        }
        Ok(self.stem.forward(images))
    }

    /// One encoding block: residual block, optional attention, optional downsample.
    pub fn block(&self, index: usize, h: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        let b = self
            .blocks
            .get(index)
            .ok_or_else(|| CoreError::Config(format!("encoder has no block {index}")))?;
        let mut h = b.res.forward(h)?;
        if let Some(attn) = &b.attention {
            h = attn.forward(&h)?;
        }
        if let Some(down) = &b.down {
            h = down.forward(&h)?;
        }
        Ok(h)
    }

    pub fn encode(&self, images: &Tensor<T>) -> Result<LatentCode<T>> {
        let mut h = self.stem(images)?;
        let factor = self.cfg.spatial_factor();
        let (height, width) = (images.dim(2), images.dim(3));
        if height % factor != 0 || width % factor != 0 {
            return Err(CoreError::Input(format!(
                "image size {height}x{width} is not divisible by {factor} ({} halvings)",
                self.cfg.downsamples()
            )));
        }
        for l in 0..self.blocks.len() {
            h = self.block(l, &h)?;
        }
        let x = self.out_conv.forward(&self.out_norm.forward(&h).silu());
        if !x.all_finite() {
            return Err(CoreError::Numeric(
                "non-finite values in latent code".into(),
            ));
        }
        LatentCode::new(x)
    }

    pub fn encode_image(&self, img: &Image) -> Result<LatentCode<T>> {
        self.encode(&img.to_tensor())
    }

    /// Encodes `repeats` times without recording gradients and reports the
    /// median wall-clock duration in seconds.
    pub fn encode_timed(&self, img: &Image, repeats: usize) -> Result<(LatentCode<T>, f64)> {
        let _guard = no_grad();
        let input = img.to_tensor();
        let mut times = Vec::with_capacity(repeats.max(1));
        let mut latent = None;
        for _ in 0..repeats.max(1) {
            let start = Instant::now();
            latent = Some(self.encode(&input)?);
            times.push(start.elapsed().as_secs_f64().max(f64::MIN_POSITIVE));
        }
        times.sort_by(|a, b| a.total_cmp(b));
        let n = times.len();
        let median = if n % 2 == 1 {
            times[n / 2]
        } else {
            0.5 * (times[n / 2 - 1] + times[n / 2])
        };
        Ok((latent.expect("at least one repeat"), median))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use cevae_tensor::ParamStore;

    fn small_cfg() -> EncoderConfig {
        EncoderConfig {
            num_blocks: 3,
            channel_schedule: vec![4, 8, 8],
            attention_resolution_threshold: 4,
            attention_everywhere: false,
            latent_channels: 6,
            norm_groups: 2,
        }
    }

    #[test]
    fn reference_schedule_structure() {
        let cfg = EncoderConfig::reference();
        assert_eq!(cfg.downsamples(), 4);
        assert_eq!(256 / cfg.spatial_factor(), 16);
    }

    #[test]
    fn small_encoder_shapes_and_attention_placement() {
        let store = ParamStore::<f32>::new(0);
        let enc = Encoder::new(&store.root(), small_cfg(), 16).unwrap();
        assert_eq!(enc.attention_blocks(), vec![false, false, true]);
        assert_eq!(enc.num_downsamples(), 2);
        let x = enc.encode(&Tensor::zeros(&[2, 3, 16, 16])).unwrap();
        assert_eq!(x.tensor().dims(), &[2, 6, 4, 4]);
    }

    #[test]
    fn stem_checks_channels() {
        let store = ParamStore::<f32>::new(0);
        let enc = Encoder::new(&store.root(), small_cfg(), 16).unwrap();
        assert!(matches!(
            enc.stem(&Tensor::zeros(&[1, 4, 8, 8])),
            Err(CoreError::Input(_))
        ));
        assert_eq!(
            enc.stem(&Tensor::zeros(&[1, 3, 8, 8])).unwrap().dims(),
            &[1, 4, 8, 8]
        );
    }

    #[test]
    fn indivisible_size_rejected() {
        let store = ParamStore::<f32>::new(0);
        let enc = Encoder::new(&store.root(), small_cfg(), 16).unwrap();
        assert!(matches!(
            enc.encode(&Tensor::zeros(&[1, 3, 18, 16])),
            Err(CoreError::Input(_))
        ));
    }

    #[test]
    fn schedule_length_validated() {
        let mut cfg = small_cfg();
        cfg.channel_schedule.pop();
        assert!(matches!(cfg.validate(), Err(CoreError::Config(_))));
    }

    #[test]
    fn timed_encode_reports_positive_median() {
        let store = ParamStore::<f32>::new(0);
        let enc = Encoder::new(&store.root(), small_cfg(), 16).unwrap();
        let (x, secs) = enc.encode_timed(&Image::filled(16, 16, 0.1), 3).unwrap();
        assert!(secs > 0.0);
        assert_eq!(x.shape(), [6, 4, 4]);
    }
}
