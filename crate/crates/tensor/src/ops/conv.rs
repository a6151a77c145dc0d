use crate::float::{gemm, gemm_ld, MatRef};
use crate::{Float, Tensor};

/// Output extent of a convolution, `None` when the kernel does not fit.
pub fn conv2d_output_size(
    input: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Option<usize> {
    let padded = input + 2 * padding;
    if padded < kernel || stride == 0 {
        None
    } else {
        Some((padded - kernel) / stride + 1)
    }
}

/// Output extent of a transposed convolution, `None` when it would be empty.
pub fn conv_transpose2d_output_size(
    input: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    output_padding: usize,
) -> Option<usize> {
    ((input.max(1) - 1) * stride + kernel + output_padding)
        .checked_sub(2 * padding)
        .filter(|&v| v > 0)
}

const COL_BLOCK_VALUES: usize = 1 << 18;
/// Narrower GEMM blocks repack the weights too often to pay off.
const MIN_BLOCK_COLS: usize = 512;

/// Image rows per im2col block: about `COL_BLOCK_VALUES` column values, but
/// at least `MIN_BLOCK_COLS` columns wide.
fn rows_per_block(col_rows: usize, width: usize, height: usize) -> usize {
    let width = width.max(1);
    (COL_BLOCK_VALUES / (col_rows * width).max(1))
        .max(MIN_BLOCK_COLS.div_ceil(width))
        .clamp(1, height)
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl Geometry {
    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }

    /// Range of output columns `ox` whose source column `ox*stride + kj - pad`
    /// lies inside the image.
    fn valid_ox(&self, kj: usize) -> (usize, usize) {
        let lo = if kj >= self.pad {
            0
        } else {
            (self.pad - kj).div_ceil(self.stride)
        };
        let hi = if self.w + self.pad > kj {
            ((self.w + self.pad - kj - 1) / self.stride + 1).min(self.ow)
        } else {
            0
        };
        (lo.min(hi), hi)
    }
}

fn im2col<T: Float>(x: &[T], g: Geometry, col: &mut [T]) {
    im2col_rows(x, g, 0..g.oh, col);
}

/// Columns for output rows `oys` only; `col` is `rows x (oys.len() * ow)`.
fn im2col_rows<T: Float>(x: &[T], g: Geometry, oys: std::ops::Range<usize>, col: &mut [T]) {
    let cols = oys.len() * g.ow;
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut col[row * cols..(row + 1) * cols];
                let (lo, hi) = g.valid_ox(kj);
                for (r, oy) in oys.clone().enumerate() {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let out_row = &mut dst[r * g.ow..(r + 1) * g.ow];
                    if iy < 0 || iy as usize >= g.h {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    out_row[..lo].fill(T::zero());
                    out_row[hi..].fill(T::zero());
                    if g.stride == 1 {
                        let start = lo + kj - g.pad;
                        out_row[lo..hi].copy_from_slice(&src[start..start + (hi - lo)]);
                    } else {
                        for ox in lo..hi {
                            out_row[ox] = src[ox * g.stride + kj - g.pad];
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Float>(col: &[T], g: Geometry, x: &mut [T]) {
    col2im_rows(col, g, 0..g.oh, x);
}

/// Accumulates the columns of output rows `oys` back into `x`.
fn col2im_rows<T: Float>(col: &[T], g: Geometry, oys: std::ops::Range<usize>, x: &mut [T]) {
    let cols = oys.len() * g.ow;
    for c in 0..g.c {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &col[row * cols..(row + 1) * cols];
                let (lo, hi) = g.valid_ox(kj);
                for (r, oy) in oys.clone().enumerate() {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy as usize >= g.h {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let s = &src[r * g.ow..(r + 1) * g.ow];
                    for ox in lo..hi {
                        dst[ox * g.stride + kj - g.pad] += s[ox];
                    }
                }
            }
        }
    }
}

fn add_bias<T: Float>(out: &mut [T], bias: &[T], n: usize, plane: usize) {
    let ch = bias.len();
    for b in 0..n {
        for (o, &bv) in bias.iter().enumerate() {
            let base = (b * ch + o) * plane;
            for v in &mut out[base..base + plane] {
                *v += bv;
            }
        }
    }
}

fn bias_grad<T: Float>(g: &[T], n: usize, ch: usize, plane: usize) -> Vec<T> {
    let mut gb = vec![T::zero(); ch];
    for b in 0..n {
        for (o, acc) in gb.iter_mut().enumerate() {
            let base = (b * ch + o) * plane;
            *acc += g[base..base + plane].iter().copied().sum::<T>();
        }
    }
    gb
}

impl<T: Float> Tensor<T> {
    /// 2-D convolution of an `N x C x H x W` input with an `O x C x kh x kw`
    /// kernel, symmetric zero padding.
    pub fn conv2d(
        &self,
        weight: &Tensor<T>,
        bias: Option<&Tensor<T>>,
        stride: usize,
        padding: usize,
    ) -> Tensor<T> {
        let &[n, c, h, w] = self.dims() else {
            panic!("conv2d input must be NCHW, got {:?}", self.dims())
        };
        let &[o, wc, kh, kw] = weight.dims() else {
            panic!("conv2d weight must be OCHW, got {:?}", weight.dims())
        };
        assert_eq!(c, wc, "conv2d channel mismatch: input {c}, weight {wc}");
        if let Some(b) = bias {
            assert_eq!(b.dims(), &[o], "conv2d bias shape");
        }
        let oh = conv2d_output_size(h, kh, stride, padding).unwrap_or_else(|| {
            panic!("conv2d kernel {kh} does not fit height {h} (padding {padding})")
        });
        let ow = conv2d_output_size(w, kw, stride, padding).unwrap_or_else(|| {
            panic!("conv2d kernel {kw} does not fit width {w} (padding {padding})")
        });
        let geo = Geometry {
            c,
            h,
            w,
            kh,
            kw,
            stride,
            pad: padding,
            oh,
            ow,
        };
        let pointwise = kh == 1 && kw == 1 && stride == 1 && padding == 0;
        let (rows, cols) = (geo.rows(), geo.cols());
        let x = self.data();
        let wm = MatRef::row_major(weight.data(), o, rows);
        let mut out = vec![T::zero(); n * o * cols];
        let block = rows_per_block(rows, ow, oh);
        let mut col = if pointwise {
            Vec::new()
        } else {
            vec![T::zero(); rows * block * ow]
        };
        for b in 0..n {
            let xb = &x[b * c * h * w..(b + 1) * c * h * w];
            let ob = &mut out[b * o * cols..(b + 1) * o * cols];
            if pointwise {
                gemm(wm, MatRef::row_major(xb, rows, cols), T::zero(), ob);
                continue;
            }
            for oy0 in (0..oh).step_by(block) {
                let oy1 = (oy0 + block).min(oh);
                let bc = (oy1 - oy0) * ow;
                im2col_rows(xb, geo, oy0..oy1, &mut col[..rows * bc]);
                gemm_ld(
                    wm,
                    MatRef::row_major(&col[..rows * bc], rows, bc),
                    T::zero(),
                    &mut ob[oy0 * ow..],
                    cols,
                );
            }
        }
        if let Some(bias) = bias {
            add_bias(&mut out, bias.data(), n, cols);
        }
        let input = self.clone();
        let wt = weight.clone();
        let has_bias = bias.is_some();
        let mut parents = vec![self, weight];
        if let Some(b) = bias {
            parents.push(b);
        }
        Tensor::from_op(out, vec![n, o, oh, ow], &parents, move |g, _| {
            let x = input.data();
            let mut gx = input.requires_grad().then(|| vec![T::zero(); x.len()]);
            let mut gw = wt.requires_grad().then(|| vec![T::zero(); wt.numel()]);
            let wm = MatRef::row_major(wt.data(), o, rows);
            let mut col = if pointwise {
                Vec::new()
            } else {
                vec![T::zero(); rows * cols]
            };
            let mut dcol = if pointwise {
                Vec::new()
            } else {
                vec![T::zero(); rows * cols]
            };
            for b in 0..n {
                let gm = MatRef::row_major(&g[b * o * cols..(b + 1) * o * cols], o, cols);
                let xb = &x[b * c * h * w..(b + 1) * c * h * w];
                if let Some(gw) = gw.as_mut() {
                    let colm = if pointwise {
                        MatRef::row_major(xb, rows, cols)
                    } else {
                        im2col(xb, geo, &mut col);
                        MatRef::row_major(&col, rows, cols)
                    };
                    gemm(gm, colm.t(), T::one(), gw);
                }
                if let Some(gx) = gx.as_mut() {
                    let dst = &mut gx[b * c * h * w..(b + 1) * c * h * w];
                    if pointwise {
                        gemm(wm.t(), gm, T::zero(), dst);
                    } else {
                        gemm(wm.t(), gm, T::zero(), &mut dcol);
                        col2im(&dcol, geo, dst);
                    }
                }
            }
            let mut grads = vec![gx, gw];
            if has_bias {
                grads.push(Some(bias_grad(g, n, o, cols)));
            }
            grads
        })
    }

    /// Transposed 2-D convolution of `N x Cin x H x W` with a
    /// `Cin x Cout x kh x kw` kernel.
    pub fn conv_transpose2d(
        &self,
        weight: &Tensor<T>,
        bias: Option<&Tensor<T>>,
        stride: usize,
        padding: usize,
        output_padding: usize,
    ) -> Tensor<T> {
        let &[n, cin, h, w] = self.dims() else {
            panic!("conv_transpose2d input must be NCHW, got {:?}", self.dims())
        };
        let &[wcin, cout, kh, kw] = weight.dims() else {
            panic!(
                "conv_transpose2d weight must be (Cin, Cout, kh, kw), got {:?}",
                weight.dims()
            )
        };
        assert_eq!(
            cin, wcin,
            "conv_transpose2d channel mismatch: input {cin}, weight {wcin}"
        );
        assert!(
            output_padding < stride.max(1),
            "output_padding must be smaller than stride"
        );
        if let Some(b) = bias {
            assert_eq!(b.dims(), &[cout], "conv_transpose2d bias shape");
        }
        let oh = conv_transpose2d_output_size(h, kh, stride, padding, output_padding)
            .expect("conv_transpose2d output height is empty");
        let ow = conv_transpose2d_output_size(w, kw, stride, padding, output_padding)
            .expect("conv_transpose2d output width is empty");
        // Geometry of the forward convolution mapping the output back onto the input grid.
        let geo = Geometry {
            c: cout,
            h: oh,
            w: ow,
            kh,
            kw,
            stride,
            pad: padding,
            oh: h,
            ow: w,
        };
        let (rows, cols) = (geo.rows(), geo.cols());
        let x = self.data();
        let wm = MatRef::row_major(weight.data(), cin, rows);
        let mut out = vec![T::zero(); n * cout * oh * ow];
        let block = rows_per_block(rows, w, h);
        let mut col = vec![T::zero(); rows * block * w];
        for b in 0..n {
            let xb = &x[b * cin * cols..(b + 1) * cin * cols];
            let ob = &mut out[b * cout * oh * ow..(b + 1) * cout * oh * ow];
            for y0 in (0..h).step_by(block) {
                let y1 = (y0 + block).min(h);
                let bc = (y1 - y0) * w;
                let xm = MatRef {
                    data: &xb[y0 * w..],
                    rows: cin,
                    cols: bc,
                    rs: cols,
                    cs: 1,
                };
                gemm(wm.t(), xm, T::zero(), &mut col[..rows * bc]);
                col2im_rows(&col[..rows * bc], geo, y0..y1, ob);
            }
        }
        if let Some(bias) = bias {
            add_bias(&mut out, bias.data(), n, oh * ow);
        }
        let input = self.clone();
        let wt = weight.clone();
        let has_bias = bias.is_some();
        let mut parents = vec![self, weight];
        if let Some(b) = bias {
            parents.push(b);
        }
        Tensor::from_op(out, vec![n, cout, oh, ow], &parents, move |g, _| {
            let x = input.data();
            let mut gx = input.requires_grad().then(|| vec![T::zero(); x.len()]);
            let mut gw = wt.requires_grad().then(|| vec![T::zero(); wt.numel()]);
            let wm = MatRef::row_major(wt.data(), cin, rows);
            let mut col = vec![T::zero(); rows * cols];
            for b in 0..n {
                im2col(
                    &g[b * cout * oh * ow..(b + 1) * cout * oh * ow],
                    geo,
                    &mut col,
                );
                let colm = MatRef::row_major(&col, rows, cols);
                if let Some(gx) = gx.as_mut() {
                    gemm(
                        wm,
                        colm,
                        T::zero(),
                        &mut gx[b * cin * cols..(b + 1) * cin * cols],
                    );
                }
                if let Some(gw) = gw.as_mut() {
                    let xb = MatRef::row_major(&x[b * cin * cols..(b + 1) * cin * cols], cin, cols);
                    gemm(xb, colm.t(), T::one(), gw);
                }
            }
            let mut grads = vec![gx, gw];
            if has_bias {
                grads.push(Some(bias_grad(g, n, cout, oh * ow)));
            }
            grads
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive_conv(
        x: &[f64],
        (c, h, w): (usize, usize, usize),
        wt: &[f64],
        (o, k): (usize, usize),
        s: usize,
        p: usize,
    ) -> Vec<f64> {
        let oh = (h + 2 * p - k) / s + 1;
        let ow = (w + 2 * p - k) / s + 1;
        let mut out = vec![0.0; o * oh * ow];
        for oc in 0..o {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = 0.0;
                    for ic in 0..c {
                        for ki in 0..k {
                            for kj in 0..k {
                                let iy = (y * s + ki) as isize - p as isize;
                                let ix = (xx * s + kj) as isize - p as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    acc += x[ic * h * w + iy as usize * w + ix as usize]
                                        * wt[((oc * c + ic) * k + ki) * k + kj];
                                }
                            }
                        }
                    }
                    out[oc * oh * ow + y * ow + xx] = acc;
                }
            }
        }
        out
    }

    fn naive_conv_t(
        x: &[f64],
        (c, h, w): (usize, usize, usize),
        wt: &[f64],
        (o, k): (usize, usize),
        s: usize,
        p: usize,
    ) -> Vec<f64> {
        let oh = (h - 1) * s + k - 2 * p;
        let ow = (w - 1) * s + k - 2 * p;
        let mut out = vec![0.0; o * oh * ow];
        for ic in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    for oc in 0..o {
                        for ki in 0..k {
                            for kj in 0..k {
                                let oy = (y * s + ki) as isize - p as isize;
                                let ox = (xx * s + kj) as isize - p as isize;
                                if oy >= 0 && ox >= 0 && (oy as usize) < oh && (ox as usize) < ow {
                                    out[oc * oh * ow + oy as usize * ow + ox as usize] += x
                                        [ic * h * w + y * w + xx]
                                        * wt[((ic * o + oc) * k + ki) * k + kj];
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(c, h, w, o, k, s, p) in &[
            (2, 5, 5, 3, 3, 1, 1),
            (3, 7, 6, 2, 3, 2, 1),
            (2, 9, 9, 4, 8, 1, 0),
            (3, 4, 4, 2, 1, 1, 0),
        ] {
            let x = Tensor::<f64>::randn(&[1, c, h, w], 1.0, &mut rng);
            let wt = Tensor::<f64>::randn(&[o, c, k, k], 1.0, &mut rng);
            let y = x.conv2d(&wt, None, s, p);
            let r = naive_conv(x.data(), (c, h, w), wt.data(), (o, k), s, p);
            for (a, b) in y.data().iter().zip(&r) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_transpose_matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for &(c, h, w, o, k, s, p) in &[
            (2, 3, 3, 3, 4, 2, 1),
            (3, 9, 9, 2, 8, 1, 0),
            (2, 4, 5, 2, 3, 1, 1),
        ] {
            let x = Tensor::<f64>::randn(&[1, c, h, w], 1.0, &mut rng);
            let wt = Tensor::<f64>::randn(&[c, o, k, k], 1.0, &mut rng);
            let y = x.conv_transpose2d(&wt, None, s, p, 0);
            let r = naive_conv_t(x.data(), (c, h, w), wt.data(), (o, k), s, p);
            assert_eq!(y.numel(), r.len());
            for (a, b) in y.data().iter().zip(&r) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    /// Images large enough that the forward pass works in several row blocks.
    #[test]
    fn blocked_passes_match_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        // Every case below spans several blocks.
        assert_eq!(rows_per_block(16 * 9, 60, 40), 30);
        assert_eq!(rows_per_block(64 * 9, 100, 40), 6);
        assert_eq!(rows_per_block(64 * 16, 60, 40), 9);
        for &(c, h, w, o, s) in &[(16, 40, 60, 3, 1), (64, 40, 100, 2, 1)] {
            let x = Tensor::<f64>::randn(&[2, c, h, w], 1.0, &mut rng);
            let wt = Tensor::<f64>::randn(&[o, c, 3, 3], 1.0, &mut rng);
            let y = x.conv2d(&wt, None, s, 1);
            let per = y.numel() / 2;
            for b in 0..2 {
                let r = naive_conv(
                    &x.data()[b * c * h * w..(b + 1) * c * h * w],
                    (c, h, w),
                    wt.data(),
                    (o, 3),
                    s,
                    1,
                );
                assert!(y.data()[b * per..(b + 1) * per]
                    .iter()
                    .zip(&r)
                    .all(|(a, b)| (a - b).abs() < 1e-10));
            }
        }
        let (c, h, w, o) = (64, 40, 60, 8);
        let x = Tensor::<f64>::randn(&[2, c, h, w], 1.0, &mut rng);
        let wt = Tensor::<f64>::randn(&[c, o, 4, 4], 1.0, &mut rng);
        let y = x.conv_transpose2d(&wt, None, 2, 1, 0);
        let per = y.numel() / 2;
        for b in 0..2 {
            let r = naive_conv_t(
                &x.data()[b * c * h * w..(b + 1) * c * h * w],
                (c, h, w),
                wt.data(),
                (o, 4),
                2,
                1,
            );
            assert!(y.data()[b * per..(b + 1) * per]
                .iter()
                .zip(&r)
                .all(|(a, b)| (a - b).abs() < 1e-10));
        }
    }

    #[test]
    fn output_sizes() {
        assert_eq!(conv2d_output_size(17, 3, 2, 1), Some(9));
        assert_eq!(conv2d_output_size(16, 8, 1, 0), Some(9));
        assert_eq!(conv2d_output_size(4, 8, 1, 0), None);
        assert_eq!(conv_transpose2d_output_size(9, 8, 1, 0, 0), Some(16));
        assert_eq!(conv_transpose2d_output_size(16, 4, 2, 1, 0), Some(32));
    }
}
