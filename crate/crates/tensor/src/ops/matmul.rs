use crate::float::{gemm, MatRef};
use crate::{Float, Tensor};

impl<T: Float> Tensor<T> {
    /// Batched matrix product `(.., M, K) x (.., K, N)`. The right operand may
    /// also be a plain `K x N` matrix shared by every batch.
    pub fn matmul(&self, rhs: &Tensor<T>) -> Tensor<T> {
        let (ad, bd) = (self.dims(), rhs.dims());
        assert!(ad.len() >= 2 && bd.len() >= 2, "matmul needs rank >= 2");
        let (m, k) = (ad[ad.len() - 2], ad[ad.len() - 1]);
        let (k2, n) = (bd[bd.len() - 2], bd[bd.len() - 1]);
        assert_eq!(k, k2, "matmul inner dims {:?} x {:?}", ad, bd);
        let batch: usize = ad[..ad.len() - 2].iter().product();
        let shared_rhs = bd.len() == 2;
        if !shared_rhs {
            assert_eq!(
                &ad[..ad.len() - 2],
                &bd[..bd.len() - 2],
                "matmul batch dims"
            );
        }
        let rhs_stride = if shared_rhs { 0 } else { k * n };
        let mut out = vec![T::zero(); batch * m * n];
        for b in 0..batch {
            let a = MatRef::row_major(&self.data()[b * m * k..(b + 1) * m * k], m, k);
            let r = MatRef::row_major(&rhs.data()[b * rhs_stride..b * rhs_stride + k * n], k, n);
            gemm(a, r, T::zero(), &mut out[b * m * n..(b + 1) * m * n]);
        }
        let mut shape = ad[..ad.len() - 2].to_vec();
        shape.extend([m, n]);
        let (lhs_c, rhs_c) = (self.clone(), rhs.clone());
        Tensor::from_op(out, shape, &[self, rhs], move |g, _| {
            let ga = lhs_c.requires_grad().then(|| {
                let mut ga = vec![T::zero(); batch * m * k];
                for b in 0..batch {
                    let gm = MatRef::row_major(&g[b * m * n..(b + 1) * m * n], m, n);
                    let r = MatRef::row_major(
                        &rhs_c.data()[b * rhs_stride..b * rhs_stride + k * n],
                        k,
                        n,
                    );
                    gemm(gm, r.t(), T::zero(), &mut ga[b * m * k..(b + 1) * m * k]);
                }
                ga
            });
            let gb = rhs_c.requires_grad().then(|| {
                let mut gb = vec![T::zero(); rhs_c.numel()];
                for b in 0..batch {
                    let gm = MatRef::row_major(&g[b * m * n..(b + 1) * m * n], m, n);
                    let a = MatRef::row_major(&lhs_c.data()[b * m * k..(b + 1) * m * k], m, k);
                    let dst = &mut gb[b * rhs_stride..b * rhs_stride + k * n];
                    let beta = if shared_rhs && b > 0 {
                        T::one()
                    } else {
                        T::zero()
                    };
                    gemm(a.t(), gm, beta, dst);
                }
                gb
            });
            vec![ga, gb]
        })
    }
}

#[cfg(test)]
mod tests {
    use crate::Tensor;

    #[test]
    fn small_product_and_grads() {
        let a = Tensor::<f64>::var(vec![1., 2., 3., 4., 5., 6.], &[2, 3]);
        let b = Tensor::<f64>::var(vec![1., 0., 0., 1., 1., 1.], &[3, 2]);
        let c = a.matmul(&b);
        assert_eq!(c.data(), &[4., 5., 10., 11.]);
        let g = c.sum_all().backward();
        assert_eq!(g.get(&a).unwrap(), &[1., 1., 2., 1., 1., 2.]);
        assert_eq!(g.get(&b).unwrap(), &[5., 5., 7., 7., 9., 9.]);
    }

    #[test]
    fn shared_rhs_accumulates_over_batch() {
        let a = Tensor::<f64>::var(vec![1.0; 2 * 1 * 2], &[2, 1, 2]);
        let b = Tensor::<f64>::var(vec![1.0, 2.0], &[2, 1]);
        let c = a.matmul(&b);
        assert_eq!(c.dims(), &[2, 1, 1]);
        let g = c.sum_all().backward();
        assert_eq!(g.get(&b).unwrap(), &[2.0, 2.0]);
    }
}
