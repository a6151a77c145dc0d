//! Reference implementations shared by the integration tests.
#![allow(dead_code)]

use std::sync::Arc;

use cevae_core::capsule::Predictions;
use cevae_core::Image;
use cevae_tensor::gradcheck::{central_difference, relative_error, spread_indices};
use cevae_tensor::{Param, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;

/// Routing written out step by step for one position.
/// `u_hat[j][i][d]`; returns `(v[j][d], c[i][j], b[i][j])` after `iters`.
#[allow(clippy::type_complexity)]
pub fn scripted_routing(
    u_hat: &[Vec<Vec<f64>>],
    iters: usize,
) -> (Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let jn = u_hat.len();
    let inn = u_hat[0].len();
    let dn = u_hat[0][0].len();
    let mut b = vec![vec![0.0; jn]; inn];
    let mut c = vec![vec![0.0; jn]; inn];
    let mut v = vec![vec![0.0; dn]; jn];
    for _ in 0..iters {
        for i in 0..inn {
            let m = b[i].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = b[i].iter().map(|x| (x - m).exp()).sum();
            for j in 0..jn {
                c[i][j] = (b[i][j] - m).exp() / z;
            }
        }
        for j in 0..jn {
            let mut s = vec![0.0; dn];
            for i in 0..inn {
                for d in 0..dn {
                    s[d] += c[i][j] * u_hat[j][i][d];
                }
            }
            let sq: f64 = s.iter().map(|x| x * x).sum();
            let norm = (sq + 1e-8).sqrt();
            for d in 0..dn {
                v[j][d] = sq / (1.0 + sq) * s[d] / norm;
            }
        }
        for i in 0..inn {
            for j in 0..jn {
                b[i][j] += (0..dn).map(|d| v[j][d] * u_hat[j][i][d]).sum::<f64>();
            }
        }
    }
    (v, c, b)
}

/// `N x J x I x D x H x W` tensor from a closure.
pub fn predictions(
    n: usize,
    j: usize,
    i: usize,
    d: usize,
    h: usize,
    w: usize,
    mut f: impl FnMut(&[usize; 6]) -> f64,
) -> Predictions<f64> {
    let mut data = Vec::new();
    for a in 0..n {
        for b in 0..j {
            for c in 0..i {
                for e in 0..d {
                    for y in 0..h {
                        for x in 0..w {
                            data.push(f(&[a, b, c, e, y, x]));
                        }
                    }
                }
            }
        }
    }
    Predictions(Tensor::from_vec(data, &[n, j, i, d, h, w]))
}

/// Direct 2-D weighted window statistics at every valid position.
pub fn brute_ssim(a: &Image, b: &Image) -> f64 {
    let (h, w) = (a.height(), a.width());
    let mut kernel = [[0.0f64; 11]; 11];
    let mut total = 0.0;
    for (i, row) in kernel.iter_mut().enumerate() {
        for (j, k) in row.iter_mut().enumerate() {
            let (dy, dx) = (i as f64 - 5.0, j as f64 - 5.0);
            *k = (-(dy * dy + dx * dx) / (2.0 * 1.5 * 1.5)).exp();
            total += *k;
        }
    }
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let (ua, ub) = (a.to_unit_range(), b.to_unit_range());
    let mut sum = 0.0;
    let mut count = 0;
    for c in 0..3 {
        let px = |v: &[f64], y: usize, x: usize| v[(c * h + y) * w + x];
        for y in 0..=h - 11 {
            for x in 0..=w - 11 {
                let (mut ma, mut mb) = (0.0, 0.0);
                for i in 0..11 {
                    for j in 0..11 {
                        let k = kernel[i][j] / total;
                        ma += k * px(&ua, y + i, x + j);
                        mb += k * px(&ub, y + i, x + j);
                    }
                }
                let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
                for i in 0..11 {
                    for j in 0..11 {
                        let k = kernel[i][j] / total;
                        let (da, db) = (px(&ua, y + i, x + j) - ma, px(&ub, y + i, x + j) - mb);
                        va += k * da * da;
                        vb += k * db * db;
                        cov += k * da * db;
                    }
                }
                sum += (2.0 * ma * mb + c1) * (2.0 * cov + c2)
                    / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
    }
    sum / count as f64
}

pub fn input(shape: &[usize], seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::<f64>::randn(shape, 0.5, &mut rng).to_vec()
}

/// Relative error of d loss / d x at up to `count` coordinates.
pub fn input_error(
    shape: &[usize],
    seed: u64,
    count: usize,
    loss: impl Fn(&Tensor<f64>) -> Tensor<f64>,
) -> f64 {
    let x0 = input(shape, seed);
    let xv = Tensor::var(x0.clone(), shape);
    let grads = loss(&xv).backward();
    let full = grads.get(&xv).expect("input gradient").to_vec();
    let idx = spread_indices(x0.len(), count);
    let analytic: Vec<f64> = idx.iter().map(|&i| full[i]).collect();
    let numeric = central_difference(
        |v| loss(&Tensor::from_vec(v.to_vec(), shape)).item(),
        &x0,
        FD_STEP,
        &idx,
    );
    relative_error(&analytic, &numeric)
}

/// Same for a parameter, perturbed in place.
pub fn param_error(p: &Arc<Param<f64>>, count: usize, loss: impl Fn() -> Tensor<f64>) -> f64 {
    let x0 = p.tensor().to_vec();
    let grads = loss().backward();
    let full = grads.get(&p.tensor()).expect("parameter gradient").to_vec();
    let idx = spread_indices(x0.len(), count);
    let analytic: Vec<f64> = idx.iter().map(|&i| full[i]).collect();
    let numeric = central_difference(
        |v| {
            p.set(v.to_vec());
            loss().item()
        },
        &x0,
        FD_STEP,
        &idx,
    );
    p.set(x0);
    relative_error(&analytic, &numeric)
}

/// Scalar probe `sum(w * y)` with fixed random `w`.
pub fn probe(y: &Tensor<f64>, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = Tensor::<f64>::randn(y.dims(), 1.0, &mut rng);
    (y * &w).sum_all()
}
