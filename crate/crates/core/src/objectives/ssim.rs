use cevae_tensor::{Float, Tensor};

use crate::error::{CoreError, Result};

pub const SSIM_PATCH: usize = 11;

/// Stabilising constants for values spanning `range`.
pub fn ssim_constants(range: f64) -> (f64, f64) {
    ((0.01 * range).powi(2), (0.03 * range).powi(2))
}

/// Mean SSIM over non-overlapping 11x11 patches of each channel. Pixels past
/// the last full patch on the right and bottom are ignored.
pub fn patch_ssim<T: Float>(gt: &Tensor<T>, pred: &Tensor<T>, range: f64) -> Result<Tensor<T>> {
    super::same_shape(gt, pred)?;
    let &[n, c, h, w] = gt.dims() else {
        return Err(CoreError::Input(format!(
            "expected N x C x H x W images, got {:?}",
            gt.dims()
        )));
    };
    if h < SSIM_PATCH || w < SSIM_PATCH {
        return Err(CoreError::Input(format!(
            "image {h}x{w} is smaller than one {SSIM_PATCH}x{SSIM_PATCH} patch"
        )));
    }
    let (ph, pw) = (h / SSIM_PATCH, w / SSIM_PATCH);
    let patches = |t: &Tensor<T>| {
        t.narrow(2, 0, ph * SSIM_PATCH)
            .narrow(3, 0, pw * SSIM_PATCH)
            .reshape(&[n, c, ph, SSIM_PATCH, pw, SSIM_PATCH])
            .permute(&[0, 1, 2, 4, 3, 5])
            .reshape(&[n, c, ph, pw, SSIM_PATCH * SSIM_PATCH])
    };
    let (x, y) = (patches(gt), patches(pred));
    let mx = x.mean_axes(&[4], true);
    let my = y.mean_axes(&[4], true);
    let dx = &x - &mx;
    let dy = &y - &my;
    let vx = dx.sqr().mean_axes(&[4], false);
    let vy = dy.sqr().mean_axes(&[4], false);
    let cov = (&dx * &dy).mean_axes(&[4], false);
    let (mx, my) = (mx.reshape(&[n, c, ph, pw]), my.reshape(&[n, c, ph, pw]));
    let (k1, k2) = ssim_constants(range);
    let num = (&mx * &my).affine(2.0, k1) * cov.affine(2.0, k2);
    let den = (mx.sqr() + my.sqr()).add_scalar(k1) * (vx + vy).add_scalar(k2);
    Ok((num / den).mean_all())
}

/// `1 - SSIM` so that the term is minimised like the others.
pub fn ssim_loss<T: Float>(gt: &Tensor<T>, pred: &Tensor<T>, range: f64) -> Result<Tensor<T>> {
    Ok(patch_ssim(gt, pred, range)?.affine(-1.0, 1.0))
}
