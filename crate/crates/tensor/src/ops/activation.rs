use super::split_axis;
use crate::{Float, Tensor};

#[inline]
fn sigmoid_scalar<T: Float>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Float> Tensor<T> {
    pub fn sigmoid(&self) -> Tensor<T> {
        self.map_unary(sigmoid_scalar, |_, y| y * (T::one() - y))
    }

    /// Swish / SiLU: `x * sigmoid(x)`.
    pub fn silu(&self) -> Tensor<T> {
        self.map_unary(
            |x| x * sigmoid_scalar(x),
            |x, _| {
                let s = sigmoid_scalar(x);
                s * (T::one() + x * (T::one() - s))
            },
        )
    }

    pub fn tanh(&self) -> Tensor<T> {
        self.map_unary(|x| x.tanh(), |_, y| T::one() - y * y)
    }

    pub fn relu(&self) -> Tensor<T> {
        self.leaky_relu(0.0)
    }

    pub fn leaky_relu(&self, slope: f64) -> Tensor<T> {
        let s = T::of(slope);
        self.map_unary(
            move |x| if x > T::zero() { x } else { s * x },
            move |x, _| if x > T::zero() { T::one() } else { s },
        )
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&self) -> Tensor<T> {
        self.map_unary(
            |x| x.max(T::zero()) + (-x.abs()).exp().ln_1p(),
            |x, _| sigmoid_scalar(x),
        )
    }

    /// Softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Tensor<T> {
        let (outer, n, inner) = split_axis(self.dims(), axis);
        let x = self.data();
        let mut out = vec![T::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * n * inner + i;
                let mut m = T::neg_infinity();
                for k in 0..n {
                    m = m.max(x[base + k * inner]);
                }
                let mut sum = T::zero();
                for k in 0..n {
                    let e = (x[base + k * inner] - m).exp();
                    out[base + k * inner] = e;
                    sum += e;
                }
                for k in 0..n {
                    out[base + k * inner] /= sum;
                }
            }
        }
        Tensor::from_op(out, self.dims().to_vec(), &[self], move |g, y| {
            let mut gx = vec![T::zero(); y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * n * inner + i;
                    let mut dot = T::zero();
                    for k in 0..n {
                        dot += g[base + k * inner] * y[base + k * inner];
                    }
                    for k in 0..n {
                        let p = base + k * inner;
                        gx[p] = y[p] * (g[p] - dot);
                    }
                }
            }
            vec![Some(gx)]
        })
    }

    /// Euclidean norm along `axis` (kept as a size-1 axis). The gradient at a
    /// zero vector is taken as zero.
    pub fn l2_norm(&self, axis: usize) -> Tensor<T> {
        let (outer, n, inner) = split_axis(self.dims(), axis);
        let x = self.data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut s = T::zero();
                for k in 0..n {
                    let v = x[o * n * inner + k * inner + i];
                    s += v * v;
                }
                out[o * inner + i] = s.sqrt();
            }
        }
        let mut shape = self.dims().to_vec();
        shape[axis] = 1;
        let input = self.clone();
        Tensor::from_op(out, shape, &[self], move |g, y| {
            let x = input.data();
            let mut gx = vec![T::zero(); x.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let norm = y[o * inner + i];
                    if norm > T::zero() {
                        let scale = g[o * inner + i] / norm;
                        for k in 0..n {
                            let p = o * n * inner + k * inner + i;
                            gx[p] = scale * x[p];
                        }
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
    fn softmax_rows_sum_to_one() {
        let x = Tensor::<f64>::from_vec(vec![1., 2., 3., -1., 0., 1000.], &[2, 3]);
        let y = x.softmax(1);
        for r in 0..2 {
            let s: f64 = y.data()[r * 3..r * 3 + 3].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        let y0 = x.softmax(0);
        assert!((y0.data()[0] + y0.data()[3] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softplus_is_stable() {
        let x = Tensor::<f64>::from_vec(vec![-800.0, 0.0, 800.0], &[3]);
        let y = x.softplus();
        assert_eq!(y.data()[0], 0.0);
        assert!((y.data()[1] - 2f64.ln()).abs() < 1e-15);
        assert_eq!(y.data()[2], 800.0);
    }

    #[test]
    fn l2_norm_zero_vector_has_zero_grad() {
        let x = Tensor::<f64>::var(vec![0.0, 0.0, 3.0, 4.0], &[2, 2]);
        let n = x.l2_norm(1);
        assert_eq!(n.data(), &[0.0, 5.0]);
        let g = n.sum_all().backward();
        let gx = g.get(&x).unwrap();
        for (a, b) in gx.iter().zip([0.0, 0.0, 0.6, 0.8]) {
            assert!((a - b).abs() < 1e-15);
        }
    }
}
