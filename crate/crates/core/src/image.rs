//! Planar RGB images in the model's `[-1, 1]` value range.

use cevae_tensor::{Float, Tensor};

use crate::error::{CoreError, Result};

/// A 3-channel image stored channel-major (`C x H x W`) with values in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

pub const CHANNELS: usize = 3;

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(CoreError::Input(format!("empty image {height}x{width}")));
        }
        if data.len() != CHANNELS * height * width {
            return Err(CoreError::Input(format!(
                "image data has {} values, expected 3x{height}x{width}",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(CoreError::Numeric(format!("non-finite pixel value {v}")));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self {
            height,
            width,
            data: vec![value; CHANNELS * height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(CHANNELS * height * width);
        for c in 0..CHANNELS {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    /// 8-bit interleaved RGB to `[-1, 1]`: 0 maps to -1, 255 to +1.
    pub fn from_rgb8(width: usize, height: usize, rgb: &[u8]) -> Result<Self> {
        if rgb.len() != width * height * CHANNELS {
            return Err(CoreError::Input(format!(
                "rgb buffer has {} bytes for {width}x{height}",
                rgb.len()
            )));
        }
        Ok(Self::from_fn(height, width, |c, y, x| {
            rgb[(y * width + x) * CHANNELS + c] as f64 / 127.5 - 1.0
        }))
    }

    /// Interleaved 8-bit RGB, clamping to the valid range.
    pub fn to_rgb8(&self) -> Vec<u8> {
        let mut out = vec![0u8; self.height * self.width * CHANNELS];
        for c in 0..CHANNELS {
            for y in 0..self.height {
                for x in 0..self.width {
                    let v = ((self.get(c, y, x) + 1.0) * 127.5)
                        .round()
                        .clamp(0.0, 255.0);
                    out[(y * self.width + x) * CHANNELS + c] = v as u8;
                }
            }
        }
        out
    }

    /// Values mapped from `[-1, 1]` to `[0, 1]`.
    pub fn to_unit_range(&self) -> Vec<f64> {
        self.data.iter().map(|v| (v + 1.0) * 0.5).collect()
    }

    /// Horizontal mirror.
    pub fn flip_horizontal(&self) -> Self {
        Self::from_fn(self.height, self.width, |c, y, x| {
            self.get(c, y, self.width - 1 - x)
        })
    }

    /// The `h x w` window whose top-left corner is `(top, left)`.
    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Result<Self> {
        if h == 0 || w == 0 || top + h > self.height || left + w > self.width {
            return Err(CoreError::Input(format!(
                "crop {h}x{w}+{top}+{left} outside {}x{}",
                self.height, self.width
            )));
        }
        Ok(Self::from_fn(h, w, |c, y, x| {
            self.get(c, top + y, left + x)
        }))
    }

    /// Bilinear resampling with half-pixel centres. Resizing to the current
    /// size returns an identical image.
    pub fn resize_bilinear(&self, height: usize, width: usize) -> Self {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let axis = |out: usize, src: usize| -> Vec<(usize, usize, f64)> {
            let scale = src as f64 / out as f64;
            (0..out)
                .map(|i| {
                    let pos = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
                    let i0 = (pos.floor() as usize).min(src - 1);
                    let i1 = (i0 + 1).min(src - 1);
                    (i0, i1, pos - i0 as f64)
                })
                .collect()
        };
        let ys = axis(height, self.height);
        let xs = axis(width, self.width);
        Self::from_fn(height, width, |c, y, x| {
            let (y0, y1, fy) = ys[y];
            let (x0, x1, fx) = xs[x];
            let top = self.get(c, y0, x0) * (1.0 - fx) + self.get(c, y0, x1) * fx;
            let bottom = self.get(c, y1, x0) * (1.0 - fx) + self.get(c, y1, x1) * fx;
            top * (1.0 - fy) + bottom * fy
        })
    }

    /// Stacks images of equal size into an `N x 3 x H x W` tensor.
    pub fn batch_tensor<T: Float>(images: &[&Image]) -> Result<Tensor<T>> {
        let first = images
            .first()
            .ok_or_else(|| CoreError::Input("empty image batch".into()))?;
        let (h, w) = (first.height, first.width);
        let mut data = Vec::with_capacity(images.len() * CHANNELS * h * w);
        for img in images {
            if img.height != h || img.width != w {
                return Err(CoreError::Input(format!(
                    "batch mixes {h}x{w} with {}x{}",
                    img.height, img.width
                )));
            }
            data.extend(img.data.iter().map(|&v| T::of(v)));
        }
        Ok(Tensor::from_vec(data, &[images.len(), CHANNELS, h, w]))
    }

    pub fn to_tensor<T: Float>(&self) -> Tensor<T> {
        Tensor::from_vec(
            self.data.iter().map(|&v| T::of(v)).collect(),
            &[1, CHANNELS, self.height, self.width],
        )
    }

    /// Image `index` of an `N x 3 x H x W` tensor.
    pub fn from_tensor<T: Float>(t: &Tensor<T>, index: usize) -> Result<Self> {
        let &[n, c, h, w] = t.dims() else {
            return Err(CoreError::Input(format!(
                "expected NCHW tensor, got {:?}",
                t.dims()
            )));
        };
        if c != CHANNELS || index >= n {
            return Err(CoreError::Input(format!(
                "cannot take image {index} of tensor {:?}",
                t.dims()
            )));
        }
        let plane = c * h * w;
        Image::new(
            h,
            w,
            t.data()[index * plane..(index + 1) * plane]
                .iter()
                .map(|v| v.as_f64())
                .collect(),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_range_maps_to_unit_interval() {
        let img = Image::from_rgb8(2, 1, &[0, 0, 0, 255, 255, 255]).unwrap();
        assert_eq!(img.get(0, 0, 0), -1.0);
        assert_eq!(img.get(2, 0, 1), 1.0);
        assert_eq!(img.to_rgb8(), vec![0, 0, 0, 255, 255, 255]);
    }

    #[test]
    fn resize_to_same_size_is_identity() {
        let img = Image::from_fn(5, 7, |c, y, x| (c + y * x) as f64 / 40.0 - 0.5);
        assert_eq!(img.resize_bilinear(5, 7), img);
        let up = img.resize_bilinear(10, 14);
        assert_eq!((up.height(), up.width()), (10, 14));
    }

    #[test]
    fn constant_image_resizes_to_constant() {
        let img = Image::filled(9, 13, 0.25);
        let r = img.resize_bilinear(4, 6);
        assert!(r.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn rejects_wrong_length() {
        assert!(Image::new(2, 2, vec![0.0; 11]).is_err());
        assert!(Image::new(1, 1, vec![0.0, f64::NAN, 0.0]).is_err());
    }
}
