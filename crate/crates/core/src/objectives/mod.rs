//! Training objective: reconstruction, perceptual, adversarial and
//! structural terms, summed.

mod adversarial;
mod perceptual;
mod ssim;

use std::fmt;
use std::str::FromStr;

use cevae_tensor::{Float, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

pub use adversarial::{
    discriminator_loss, generator_gan_loss, DiscriminatorConfig, PatchDiscriminator,
};
pub use perceptual::{lpips_loss, FeatureExtractor, RandomPyramid, PYRAMID_CHANNELS, PYRAMID_SEED};
pub use ssim::{patch_ssim, ssim_constants, ssim_loss, SSIM_PATCH};

pub const LAMBDA_DELTA: f64 = 1e-6;
pub const LAMBDA_MAX: f64 = 1e4;
/// Model images live in `[-1, 1]`.
pub const IMAGE_RANGE: f64 = 2.0;

pub(crate) fn same_shape<T: Float>(a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(CoreError::Input(format!(
            "shape mismatch {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

/// Mean absolute error.
pub fn rec_loss<T: Float>(gt: &Tensor<T>, pred: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape(gt, pred)?;
    Ok((gt - pred).abs().mean_all())
}

/// `grad_rec / (grad_gan + delta)` clamped to `[0, LAMBDA_MAX]`. The inputs
/// are gradient norms, so the result is a plain number and carries no
/// gradient.
pub fn adaptive_lambda(grad_rec: f64, grad_gan: f64, delta: f64) -> Result<f64> {
    if !(grad_rec >= 0.0 && grad_gan >= 0.0) {
        return Err(CoreError::Contract(format!(
            "gradient norms must be non-negative, got {grad_rec} and {grad_gan}"
        )));
    }
    if !(delta > 0.0) {
        return Err(CoreError::Contract(format!(
            "delta must be positive, got {delta}"
        )));
    }
    Ok((grad_rec / (grad_gan + delta)).clamp(0.0, LAMBDA_MAX))
}

fn grad_norm<T: Float>(loss: &Tensor<T>, at: &Tensor<T>) -> f64 {
    let grads = loss.backward_targets(&[at]);
    grads.get(at).map_or(0.0, |g| {
        g.iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt()
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossToggles {
    pub rec: bool,
    pub lpips: bool,
    pub gan: bool,
    pub ssim: bool,
}

impl LossToggles {
    pub const ALL: Self = Self {
        rec: true,
        lpips: true,
        gan: true,
        ssim: true,
    };

    pub fn validate(&self) -> Result<()> {
        if !(self.rec || self.lpips || self.gan || self.ssim) {
            return Err(CoreError::Config(
                "at least one loss term must be on".into(),
            ));
        }
        Ok(())
    }
}

impl Default for LossToggles {
    fn default() -> Self {
        Self::ALL
    }
}

/// Comma-separated term names, e.g. `rec,ssim`, or `all`.
impl FromStr for LossToggles {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        if s.trim() == "all" {
            return Ok(Self::ALL);
        }
        let mut t = Self {
            rec: false,
            lpips: false,
            gan: false,
            ssim: false,
        };
        for name in s.split(',').map(str::trim).filter(|n| !n.is_empty()) {
            match name {
                "rec" => t.rec = true,
                "lpips" => t.lpips = true,
                "gan" => t.gan = true,
                "ssim" => t.ssim = true,
                other => return Err(CoreError::Config(format!("unknown loss term '{other}'"))),
            }
        }
        t.validate()?;
        Ok(t)
    }
}

impl fmt::Display for LossToggles {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = [
            (self.rec, "rec"),
            (self.lpips, "lpips"),
            (self.gan, "gan"),
            (self.ssim, "ssim"),
        ]
        .iter()
        .filter(|(on, _)| *on)
        .map(|(_, n)| *n)
        .collect();
        f.write_str(&names.join(","))
    }
}

/// Values of each active term. `gan` is the weighted contribution
/// `lambda * gan_raw`; inactive terms read 0.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub rec: f64,
    pub lpips: f64,
    pub gan: f64,
    pub gan_raw: f64,
    pub ssim: f64,
    pub lambda: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [
            self.rec,
            self.lpips,
            self.gan,
            self.gan_raw,
            self.ssim,
            self.lambda,
            self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// What the generator objective needs besides the two images.
pub struct LossContext<'a, T: Float> {
    pub extractor: Option<&'a dyn FeatureExtractor<T>>,
    pub discriminator: Option<&'a PatchDiscriminator<T>>,
    /// Weight at which the gradient norms for the adaptive weight are taken.
    pub lambda_layer: Option<Tensor<T>>,
    pub delta: f64,
}

impl<T: Float> Default for LossContext<'_, T> {
    fn default() -> Self {
        Self {
            extractor: None,
            discriminator: None,
            lambda_layer: None,
            delta: LAMBDA_DELTA,
        }
    }
}

pub struct Objective<T: Float> {
    pub total: Tensor<T>,
    pub breakdown: LossBreakdown,
}

/// Sum of the active terms, with the adversarial term scaled by the adaptive
/// weight.
pub fn combined_loss<T: Float>(
    gt: &Tensor<T>,
    pred: &Tensor<T>,
    toggles: LossToggles,
    ctx: &LossContext<'_, T>,
) -> Result<Objective<T>> {
    toggles.validate()?;
    same_shape(gt, pred)?;
    let mut b = LossBreakdown::default();
    let mut terms: Vec<Tensor<T>> = Vec::new();
    let rec = if toggles.rec || toggles.gan {
        Some(rec_loss(gt, pred)?)
    } else {
        None
    };
    if toggles.rec {
        let r = rec.clone().expect("computed");
        b.rec = r.item().as_f64();
        terms.push(r);
    }
    if toggles.lpips {
        let phi = ctx.extractor.ok_or_else(|| {
            CoreError::Dependency("perceptual term needs a feature extractor".into())
        })?;
        let l = lpips_loss(gt, pred, phi)?;
        b.lpips = l.item().as_f64();
        terms.push(l);
    }
    if toggles.ssim {
        let s = ssim_loss(gt, pred, IMAGE_RANGE)?;
        b.ssim = s.item().as_f64();
        terms.push(s);
    }
    if toggles.gan {
        let disc = ctx
            .discriminator
            .ok_or_else(|| CoreError::Contract("adversarial term needs a discriminator".into()))?;
        let layer = ctx.lambda_layer.as_ref().ok_or_else(|| {
            CoreError::Contract("adversarial term needs the layer for the adaptive weight".into())
        })?;
        let g = generator_gan_loss(&disc.logits(pred));
        let lambda = adaptive_lambda(
            grad_norm(rec.as_ref().expect("computed"), layer),
            grad_norm(&g, layer),
            ctx.delta,
        )?;
        b.gan_raw = g.item().as_f64();
        b.lambda = lambda;
        b.gan = lambda * b.gan_raw;
        terms.push(g.scale(lambda));
    }
    let total = terms
        .into_iter()
        .reduce(|a, t| a + t)
        .expect("at least one term is on");
    b.total = total.item().as_f64();
    Ok(Objective {
        total,
        breakdown: b,
    })
}
