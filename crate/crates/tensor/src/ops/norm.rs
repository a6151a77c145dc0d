use crate::{Float, Tensor};

fn to_f64<T: Float>(v: T) -> f64 {
    v.to_f64().expect("float conversion")
}

impl<T: Float> Tensor<T> {
    /// Group normalization of an `N x C x H x W` tensor, followed by the
    /// per-channel affine `gamma * x_hat + beta`. Statistics are population
    /// moments over each group, accumulated in f64.
    pub fn group_norm(
        &self,
        groups: usize,
        gamma: &Tensor<T>,
        beta: &Tensor<T>,
        eps: f64,
    ) -> Tensor<T> {
        let &[n, c, h, w] = self.dims() else {
            panic!("group_norm expects NCHW, got {:?}", self.dims())
        };
        assert!(
            groups > 0 && c % groups == 0,
            "{c} channels in {groups} groups"
        );
        assert_eq!(gamma.numel(), c, "gamma must have one value per channel");
        assert_eq!(beta.numel(), c, "beta must have one value per channel");
        let cpg = c / groups;
        let plane = h * w;
        let len = cpg * plane;
        let x = self.data();
        let (gm, bt) = (gamma.data(), beta.data());

        let mut mean = vec![0.0f64; n * groups];
        let mut rstd = vec![0.0f64; n * groups];
        let mut out = vec![T::zero(); x.len()];
        for (k, chunk) in x.chunks(len).enumerate() {
            let mut s = 0.0;
            for &v in chunk {
                s += to_f64(v);
            }
            let mu = s / len as f64;
            let mut ss = 0.0;
            for &v in chunk {
                let d = to_f64(v) - mu;
                ss += d * d;
            }
            let r = 1.0 / (ss / len as f64 + eps).sqrt();
            mean[k] = mu;
            rstd[k] = r;
            let (mu_t, r_t) = (T::of(mu), T::of(r));
            let ch0 = (k % groups) * cpg;
            for (j, (src, dst)) in chunk
                .chunks(plane)
                .zip(out[k * len..(k + 1) * len].chunks_mut(plane))
                .enumerate()
            {
                let a = gm[ch0 + j] * r_t;
                let b = bt[ch0 + j] - a * mu_t;
                for (d, &v) in dst.iter_mut().zip(src) {
                    *d = a * v + b;
                }
            }
        }

        let (input, gamma_t) = (self.clone(), gamma.clone());
        Tensor::from_op(
            out,
            self.dims().to_vec(),
            &[self, gamma, beta],
            move |g, _| {
                let x = input.data();
                let gm = gamma_t.data();
                let mut gx = vec![T::zero(); x.len()];
                let mut dgamma = vec![0.0f64; c];
                let mut dbeta = vec![0.0f64; c];
                for k in 0..n * groups {
                    let (mu, r) = (mean[k], rstd[k]);
                    let ch0 = (k % groups) * cpg;
                    let span = k * len..(k + 1) * len;
                    // Sums of dx_hat and dx_hat * x_hat over the group.
                    let (mut s1, mut s2) = (0.0, 0.0);
                    for (j, (xs, gs)) in x[span.clone()]
                        .chunks(plane)
                        .zip(g[span.clone()].chunks(plane))
                        .enumerate()
                    {
                        let gmc = to_f64(gm[ch0 + j]);
                        let (mut db, mut dg) = (0.0, 0.0);
                        for (&xv, &gv) in xs.iter().zip(gs) {
                            let xh = (to_f64(xv) - mu) * r;
                            let gv = to_f64(gv);
                            db += gv;
                            dg += gv * xh;
                        }
                        dbeta[ch0 + j] += db;
                        dgamma[ch0 + j] += dg;
                        s1 += gmc * db;
                        s2 += gmc * dg;
                    }
                    let (m1, m2) = (s1 / len as f64, s2 / len as f64);
                    for (j, ((xs, gs), dst)) in x[span.clone()]
                        .chunks(plane)
                        .zip(g[span.clone()].chunks(plane))
                        .zip(gx[span.clone()].chunks_mut(plane))
                        .enumerate()
                    {
                        let gmc = to_f64(gm[ch0 + j]);
                        for ((&xv, &gv), d) in xs.iter().zip(gs).zip(dst.iter_mut()) {
                            let xh = (to_f64(xv) - mu) * r;
                            *d = T::of(r * (gmc * to_f64(gv) - m1 - xh * m2));
                        }
                    }
                }
                let back = |v: Vec<f64>| Some(v.into_iter().map(T::of).collect());
                vec![Some(gx), back(dgamma), back(dbeta)]
            },
        )
    }
}

#[cfg(test)]
mod tests {
    use crate::Tensor;

    #[test]
    fn matches_the_composed_formula() {
        let x = Tensor::<f64>::from_vec(
            (0..48).map(|v| ((v * 7) % 11) as f64 - 3.0).collect(),
            &[2, 4, 2, 3],
        );
        let gamma = Tensor::from_vec(vec![1.0, -0.5, 2.0, 0.25], &[4]);
        let beta = Tensor::from_vec(vec![0.1, 0.2, -0.3, 0.0], &[4]);
        let y = x.group_norm(2, &gamma, &beta, 1e-6);
        for n in 0..2 {
            for grp in 0..2 {
                let vals: Vec<f64> = (0..2)
                    .flat_map(|j| (0..6).map(move |i| (n * 4 + grp * 2 + j) * 6 + i))
                    .map(|i| x.data()[i])
                    .collect();
                let mu = vals.iter().sum::<f64>() / 12.0;
                let var = vals.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / 12.0;
                for j in 0..2 {
                    let ch = grp * 2 + j;
                    for i in 0..6 {
                        let at = (n * 4 + ch) * 6 + i;
                        let want = (x.data()[at] - mu) / (var + 1e-6).sqrt() * gamma.data()[ch]
                            + beta.data()[ch];
                        assert!((y.data()[at] - want).abs() < 1e-12);
                    }
                }
            }
        }
    }
}
