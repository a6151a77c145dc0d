use super::{broadcast_shape, broadcast_strides, for_each_broadcast2, split_axis, strides_of};
use crate::tensor::numel_of;
use crate::{Float, Tensor};

impl<T: Float> Tensor<T> {
    pub fn reshape(&self, shape: &[usize]) -> Tensor<T> {
        assert_eq!(
            numel_of(shape),
            self.numel(),
            "cannot reshape {:?} into {:?}",
            self.dims(),
            shape
        );
        self.share_with_shape(shape.to_vec())
    }

    /// Collapses every axis from `axis` onwards into one.
    pub fn flatten_from(&self, axis: usize) -> Tensor<T> {
        let mut shape = self.dims()[..axis].to_vec();
        shape.push(self.dims()[axis..].iter().product());
        self.reshape(&shape)
    }

    pub fn permute(&self, perm: &[usize]) -> Tensor<T> {
        let nd = self.rank();
        assert_eq!(perm.len(), nd, "permutation rank");
        let mut seen = vec![false; nd];
        for &p in perm {
            assert!(p < nd && !seen[p], "invalid permutation {:?}", perm);
            seen[p] = true;
        }
        let in_strides = strides_of(self.dims());
        let out_shape: Vec<usize> = perm.iter().map(|&p| self.dims()[p]).collect();
        let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let zeros = vec![0; nd];
        let x = self.data();
        let mut out = vec![T::zero(); x.len()];
        for_each_broadcast2(&out_shape, &src_strides, &zeros, |o, i, _| out[o] = x[i]);
        let shape_bw = out_shape.clone();
        Tensor::from_op(out, out_shape, &[self], move |g, _| {
            let mut gx = vec![T::zero(); g.len()];
            for_each_broadcast2(&shape_bw, &src_strides, &zeros, |o, i, _| gx[i] = g[o]);
            vec![Some(gx)]
        })
    }

    pub fn transpose(&self, a: usize, b: usize) -> Tensor<T> {
        let mut perm: Vec<usize> = (0..self.rank()).collect();
        perm.swap(a, b);
        self.permute(&perm)
    }

    /// The sub-range `start..start+len` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Tensor<T> {
        let (outer, n, inner) = split_axis(self.dims(), axis);
        assert!(
            start + len <= n,
            "narrow {start}+{len} exceeds axis size {n}"
        );
        let x = self.data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * n * inner + start * inner;
            out.extend_from_slice(&x[base..base + len * inner]);
        }
        let mut shape = self.dims().to_vec();
        shape[axis] = len;
        let total = self.numel();
        Tensor::from_op(out, shape, &[self], move |g, _| {
            let mut gx = vec![T::zero(); total];
            for o in 0..outer {
                let base = o * n * inner + start * inner;
                gx[base..base + len * inner]
                    .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(gx)]
        })
    }

    /// Concatenation along `axis`; all other axes must agree.
    pub fn cat(parts: &[Tensor<T>], axis: usize) -> Tensor<T> {
        assert!(!parts.is_empty(), "cat of nothing");
        let first = parts[0].dims();
        for p in parts {
            assert_eq!(p.rank(), first.len(), "cat rank mismatch");
            for (i, (&a, &b)) in p.dims().iter().zip(first).enumerate() {
                assert!(
                    i == axis || a == b,
                    "cat shape mismatch {:?} vs {:?}",
                    p.dims(),
                    first
                );
            }
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let lens: Vec<usize> = parts.iter().map(|p| p.dims()[axis]).collect();
        let total_len: usize = lens.iter().sum();
        let mut out = Vec::with_capacity(outer * total_len * inner);
        for o in 0..outer {
            for (p, &l) in parts.iter().zip(&lens) {
                out.extend_from_slice(&p.data()[o * l * inner..(o + 1) * l * inner]);
            }
        }
        let mut shape = first.to_vec();
        shape[axis] = total_len;
        let refs: Vec<&Tensor<T>> = parts.iter().collect();
        Tensor::from_op(out, shape, &refs, move |g, _| {
            let mut grads: Vec<Vec<T>> = lens
                .iter()
                .map(|&l| Vec::with_capacity(outer * l * inner))
                .collect();
            let mut off = 0;
            for _ in 0..outer {
                for (gp, &l) in grads.iter_mut().zip(&lens) {
                    gp.extend_from_slice(&g[off..off + l * inner]);
                    off += l * inner;
                }
            }
            grads.into_iter().map(Some).collect()
        })
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Tensor<T> {
        assert_eq!(
            broadcast_shape(self.dims(), shape).as_deref(),
            Some(shape),
            "cannot broadcast {:?} to {:?}",
            self.dims(),
            shape
        );
        let src = broadcast_strides(self.dims(), shape);
        let zeros = vec![0; shape.len()];
        let x = self.data();
        let mut out = vec![T::zero(); numel_of(shape)];
        for_each_broadcast2(shape, &src, &zeros, |o, i, _| out[o] = x[i]);
        let n_in = self.numel();
        let shape_bw = shape.to_vec();
        Tensor::from_op(out, shape.to_vec(), &[self], move |g, _| {
            let mut gx = vec![T::zero(); n_in];
            for_each_broadcast2(&shape_bw, &src, &zeros, |o, i, _| gx[i] += g[o]);
            vec![Some(gx)]
        })
    }

    /// Nearest-neighbour 2x upsampling of an `N x C x H x W` tensor.
    pub fn upsample_nearest2x(&self) -> Tensor<T> {
        let &[n, c, h, w] = self.dims() else {
            panic!("upsample_nearest2x expects NCHW, got {:?}", self.dims())
        };
        let x = self.data();
        let (h2, w2) = (2 * h, 2 * w);
        let mut out = vec![T::zero(); n * c * h2 * w2];
        for p in 0..n * c {
            let src = &x[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * h2 * w2..(p + 1) * h2 * w2];
            for i in 0..h2 {
                let row = &src[(i / 2) * w..(i / 2 + 1) * w];
                for (j, d) in dst[i * w2..(i + 1) * w2].iter_mut().enumerate() {
                    *d = row[j / 2];
                }
            }
        }
        Tensor::from_op(out, vec![n, c, h2, w2], &[self], move |g, _| {
            let mut gx = vec![T::zero(); n * c * h * w];
            for p in 0..n * c {
                for i in 0..h2 {
                    for j in 0..w2 {
                        gx[p * h * w + (i / 2) * w + j / 2] += g[p * h2 * w2 + i * w2 + j];
                    }
                }
            }
            vec![Some(gx)]
        })
    }
}

#[cfg(test)]
mod tests {
    use crate::Tensor;

    #[test]
    fn permute_matches_index_formula() {
        let x = Tensor::<f64>::from_vec((0..24).map(|v| v as f64).collect(), &[2, 3, 4]);
        let y = x.permute(&[2, 0, 1]);
        assert_eq!(y.dims(), &[4, 2, 3]);
        for a in 0..2 {
            for b in 0..3 {
                for c in 0..4 {
                    assert_eq!(y.data()[c * 6 + a * 3 + b], x.data()[a * 12 + b * 4 + c]);
                }
            }
        }
    }

    #[test]
    fn narrow_and_cat_invert() {
        let x = Tensor::<f64>::var((0..12).map(|v| v as f64).collect(), &[2, 6]);
        let a = x.narrow(1, 0, 2);
        let b = x.narrow(1, 2, 4);
        let y = Tensor::cat(&[a, b], 1);
        assert_eq!(y.data(), x.data());
        let g = y.sum_all().backward();
        assert!(g.get(&x).unwrap().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn upsample_constant_stays_constant() {
        let x = Tensor::<f32>::full(&[1, 2, 3, 3], 0.25);
        let y = x.upsample_nearest2x();
        assert_eq!(y.dims(), &[1, 2, 6, 6]);
        assert!(y.data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn broadcast_to_grad_sums() {
        let x = Tensor::<f64>::var(vec![1.0, 2.0], &[2, 1]);
        let y = x.broadcast_to(&[2, 3]);
        assert_eq!(y.data(), &[1., 1., 1., 2., 2., 2.]);
        let g = y.sum_all().backward();
        assert_eq!(g.get(&x).unwrap(), &[3.0, 3.0]);
    }
}
