use cevae_tensor::{Float, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};

/// Maps an image batch to a list of feature maps. Implementations must be
/// deterministic and must not change during training.
pub trait FeatureExtractor<T: Float>: Send + Sync {
    fn features(&self, images: &Tensor<T>) -> Result<Vec<Tensor<T>>>;
}

struct Stage<T: Float> {
    weight: Tensor<T>,
    bias: Tensor<T>,
    stride: usize,
}

/// Frozen five-stage convolution pyramid with seeded random weights. Used
/// when no pretrained extractor is available; `load_weights` swaps in
/// external weights of the same layout.
pub struct RandomPyramid<T: Float> {
    stages: Vec<Stage<T>>,
}

pub const PYRAMID_CHANNELS: [usize; 5] = [16, 32, 64, 64, 64];
pub const PYRAMID_SEED: u64 = 0x1EE7;
const PYRAMID_SLOPE: f64 = 0.2;

impl<T: Float> RandomPyramid<T> {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cin = 3;
        let mut stages = Vec::new();
        for (k, &cout) in PYRAMID_CHANNELS.iter().enumerate() {
            let fan_in = cin * 9;
            let std = (2.0 / fan_in as f64).sqrt();
            stages.push(Stage {
                weight: Tensor::randn(&[cout, cin, 3, 3], std, &mut rng),
                bias: Tensor::zeros(&[cout]),
                stride: if k == 0 { 1 } else { 2 },
            });
            cin = cout;
        }
        Self { stages }
    }

    /// Number of values `load_weights` expects.
    pub fn num_values(&self) -> usize {
        self.stages
            .iter()
            .map(|s| s.weight.numel() + s.bias.numel())
            .sum()
    }

    /// Reads little-endian `f32` values, stage by stage, weight then bias.
    pub fn load_weights(&mut self, blob: &[u8]) -> Result<()> {
        let expected = self.num_values() * 4;
        if blob.len() != expected {
            return Err(CoreError::Dependency(format!(
                "extractor weights hold {} bytes, expected {expected}",
                blob.len()
            )));
        }
        let mut values = blob
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64);
        if let Some(v) = values.clone().find(|v| !v.is_finite()) {
            return Err(CoreError::Dependency(format!(
                "extractor weights contain {v}"
            )));
        }
        for s in &mut self.stages {
            let w: Vec<f64> = values.by_ref().take(s.weight.numel()).collect();
            let b: Vec<f64> = values.by_ref().take(s.bias.numel()).collect();
            s.weight = Tensor::from_f64(&w, s.weight.dims());
            s.bias = Tensor::from_f64(&b, s.bias.dims());
        }
        Ok(())
    }
}

impl<T: Float> Default for RandomPyramid<T> {
    fn default() -> Self {
        Self::new(PYRAMID_SEED)
    }
}

impl<T: Float> FeatureExtractor<T> for RandomPyramid<T> {
    fn features(&self, images: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        if images.rank() != 4 || images.dim(1) != 3 {
            return Err(CoreError::Dependency(format!(
                "extractor expects N x 3 x H x W, got {:?}",
                images.dims()
            )));
        }
        let mut h = images.clone();
        let mut out = Vec::with_capacity(self.stages.len());
        for s in &self.stages {
            h = h
                .conv2d(&s.weight, Some(&s.bias), s.stride, 1)
                .leaky_relu(PYRAMID_SLOPE);
            out.push(h.clone());
        }
        Ok(out)
    }
}

/// `sqrt(sum_s mean((phi_s(a) - phi_s(b))^2))` over the extractor's taps.
pub fn lpips_loss<T: Float>(
    gt: &Tensor<T>,
    pred: &Tensor<T>,
    phi: &dyn FeatureExtractor<T>,
) -> Result<Tensor<T>> {
    super::same_shape(gt, pred)?;
    let fa = phi.features(gt)?;
    let fb = phi.features(pred)?;
    if fa.len() != fb.len() || fa.is_empty() {
        return Err(CoreError::Dependency(
            "extractor returned inconsistent feature lists".into(),
        ));
    }
    let mut total: Option<Tensor<T>> = None;
    for (a, b) in fa.iter().zip(&fb) {
        let d = (a - b).sqr().mean_all();
        total = Some(match total {
            Some(t) => t + d,
            None => d,
        });
    }
    Ok(total.expect("non-empty").sqrt())
}
