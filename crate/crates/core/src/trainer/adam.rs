use std::collections::BTreeMap;
use std::sync::Arc;

use cevae_tensor::{Float, GradStore, Param};

pub const ADAM_BETAS: (f64, f64) = (0.5, 0.9);
pub const ADAM_EPS: f64 = 1e-8;

/// First and second moment of one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// Adam with bias correction. Moments are kept in `f64` and keyed by
/// parameter name.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub t: u64,
    pub state: BTreeMap<String, Moments>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            betas: ADAM_BETAS,
            eps: ADAM_EPS,
            t: 0,
            state: BTreeMap::new(),
        }
    }

    /// One update of every parameter that received a gradient.
    pub fn step<T: Float>(&mut self, params: &[Arc<Param<T>>], grads: &GradStore<T>) {
        self.t += 1;
        let (b1, b2) = self.betas;
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for p in params.iter().filter(|p| p.trainable()) {
            let value = p.tensor();
            let Some(g) = grads.get(&value) else { continue };
            let st = self
                .state
                .entry(p.name().to_string())
                .or_insert_with(|| Moments {
                    m: vec![0.0; g.len()],
                    v: vec![0.0; g.len()],
                });
            let mut next = Vec::with_capacity(g.len());
            for (i, (&gi, &x)) in g.iter().zip(value.data()).enumerate() {
                let gi = gi.as_f64();
                st.m[i] = b1 * st.m[i] + (1.0 - b1) * gi;
                st.v[i] = b2 * st.v[i] + (1.0 - b2) * gi * gi;
                let update = self.lr * (st.m[i] / c1) / ((st.v[i] / c2).sqrt() + self.eps);
                next.push(T::of(x.as_f64() - update));
            }
            p.set(next);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use cevae_tensor::{Init, ParamStore};

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let store = ParamStore::<f64>::new(0);
        let p = store.root().param("w", &[2], Init::Const(1.0));
        let loss = (p.tensor() * cevae_tensor::Tensor::from_vec(vec![3.0, -0.5], &[2])).sum_all();
        let grads = loss.backward();
        let mut adam = Adam::new(0.1);
        adam.step(&store.all(), &grads);
        let v = p.tensor().to_vec();
        assert!((v[0] - 0.9).abs() < 1e-7 && (v[1] - 1.1).abs() < 1e-7);
    }

    #[test]
    fn minimises_a_quadratic() {
        let store = ParamStore::<f64>::new(0);
        let p = store.root().param("w", &[1], Init::Const(3.0));
        let mut adam = Adam::new(0.01);
        for _ in 0..1000 {
            let loss = p.tensor().add_scalar(-1.0).sqr().sum_all();
            let grads = loss.backward();
            adam.step(&store.all(), &grads);
        }
        assert!((p.tensor().item() - 1.0).abs() < 2e-2);
    }
}
