use cevae_tensor::{Float, ParamBuilder, Tensor};
use serde::{Deserialize, Serialize};

use crate::blocks::{Conv2d, GroupNorm};
use crate::error::{CoreError, Result};

const SLOPE: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    pub base_channels: usize,
    /// Number of 4x4 stride-2 convolutions.
    pub layers: usize,
    pub norm_groups: usize,
}

impl DiscriminatorConfig {
    pub fn reference() -> Self {
        Self {
            base_channels: 64,
            layers: 4,
            norm_groups: 32,
        }
    }

    pub fn desk() -> Self {
        Self {
            base_channels: 16,
            layers: 2,
            norm_groups: 8,
        }
    }

    /// Side of the input window seen by one output logit.
    pub fn receptive_field(&self) -> usize {
        // final 3x3 stride-1 convolution, then back through each 4x4 stride 2
        (0..self.layers).fold(3, |r, _| (r - 1) * 2 + 4)
    }

    pub fn validate(&self, image_size: usize) -> Result<()> {
        if self.base_channels == 0 || self.layers == 0 || self.norm_groups == 0 {
            return Err(CoreError::Config(format!(
                "invalid discriminator config {self:?}"
            )));
        }
        if self.receptive_field() >= image_size {
            return Err(CoreError::Config(format!(
                "discriminator receptive field {} is not smaller than the {image_size} pixel image",
                self.receptive_field()
            )));
        }
        Ok(())
    }
}

/// Convolutional classifier emitting one real/fake logit per image patch.
pub struct PatchDiscriminator<T: Float> {
    cfg: DiscriminatorConfig,
    convs: Vec<(Conv2d<T>, Option<GroupNorm<T>>)>,
    head: Conv2d<T>,
}

impl<T: Float> PatchDiscriminator<T> {
    pub fn new(
        pb: &ParamBuilder<'_, T>,
        cfg: DiscriminatorConfig,
        image_size: usize,
    ) -> Result<Self> {
        cfg.validate(image_size)?;
        let mut convs = Vec::new();
        let mut cin = 3;
        for l in 0..cfg.layers {
            let cout = cfg.base_channels << l.min(3);
            let lp = pb.pp(format!("layer{l}"));
            let conv = Conv2d::new(&lp.pp("conv"), cin, cout, 4, 2, 1);
            let norm = (l > 0).then(|| GroupNorm::new(&lp.pp("norm"), cout, cfg.norm_groups));
            convs.push((conv, norm));
            cin = cout;
        }
        let head = Conv2d::new(&pb.pp("head"), cin, 1, 3, 1, 1);
        Ok(Self { cfg, convs, head })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.cfg
    }

    /// `N x 3 x H x W` images to `N x 1 x h x w` patch logits.
    pub fn logits(&self, images: &Tensor<T>) -> Tensor<T> {
        let mut h = images.clone();
        for (conv, norm) in &self.convs {
            h = conv.forward(&h);
            if let Some(norm) = norm {
                h = norm.forward(&h);
            }
            h = h.leaky_relu(SLOPE);
        }
        self.head.forward(&h)
    }
}

/// Binary cross-entropy of the discriminator, summed over the real and fake
/// terms and averaged over patches: `mean softplus(-real) + mean softplus(fake)`.
pub fn discriminator_loss<T: Float>(real_logits: &Tensor<T>, fake_logits: &Tensor<T>) -> Tensor<T> {
    real_logits.neg().softplus().mean_all() + fake_logits.softplus().mean_all()
}

/// Non-saturating generator loss `-mean(log sigmoid(fake))`.
pub fn generator_gan_loss<T: Float>(fake_logits: &Tensor<T>) -> Tensor<T> {
    fake_logits.neg().softplus().mean_all()
}

#[cfg(test)]
mod tests {
    use super::*;
    use cevae_tensor::ParamStore;

    #[test]
    fn receptive_fields() {
        assert_eq!(DiscriminatorConfig::reference().receptive_field(), 78);
        assert_eq!(DiscriminatorConfig::desk().receptive_field(), 18);
        let too_deep = DiscriminatorConfig {
            base_channels: 8,
            layers: 3,
            norm_groups: 4,
        };
        assert!(matches!(too_deep.validate(32), Err(CoreError::Config(_))));
    }

    #[test]
    fn patch_grid_shape() {
        let store = ParamStore::<f32>::new(0);
        let d = PatchDiscriminator::new(&store.root(), DiscriminatorConfig::desk(), 32).unwrap();
        assert_eq!(
            d.logits(&Tensor::zeros(&[2, 3, 32, 32])).dims(),
            &[2, 1, 8, 8]
        );
    }

    #[test]
    fn analytic_values() {
        let zero = Tensor::<f64>::zeros(&[1, 1, 2, 2]);
        assert!((discriminator_loss(&zero, &zero).item() - 4f64.ln()).abs() < 1e-15);
        assert!((generator_gan_loss(&zero).item() - 2f64.ln()).abs() < 1e-15);
        let big = Tensor::<f64>::full(&[1, 1, 2, 2], 60.0);
        assert!(discriminator_loss(&big, &big.neg()).item() < 1e-25);
        assert!(generator_gan_loss(&big).item() < 1e-25);
    }
}
