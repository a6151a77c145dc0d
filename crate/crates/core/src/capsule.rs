//! Capsule clustering: primary capsules, routing-by-agreement, coupling
//! weighted collapse of the prediction vectors, entity presence norm and a
//! transposed convolution back to the latent grid.
//!
//! Tensor layouts (batch axis first, routing runs independently per position):
//!
//! | value        | shape                                  |
//! |--------------|----------------------------------------|
//! | primary `U`  | `N x types x dim x H x W`              |
//! | predictions  | `N x out_caps x types x out_dim x H x W` |
//! | logits/couplings | `N x out_caps x types x 1 x H x W`  |
//! | activities `v`, collapsed `Û` | `N x out_caps x out_dim x H x W` |

use std::sync::Arc;

use cevae_tensor::{Float, Init, Param, ParamBuilder, Tensor};
use serde::{Deserialize, Serialize};

use crate::blocks::{Conv2d, ConvTranspose2d};
use crate::encoder::LatentCode;
use crate::error::{CoreError, Result};

/// Squared-norm offset keeping squash differentiable at the origin.
pub const SQUASH_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CapsuleConfig {
    pub primary_types: usize,
    pub primary_dim: usize,
    pub kernel: usize,
    pub output_capsules: usize,
    pub output_dim: usize,
    pub routing_iterations: usize,
    pub out_channels: usize,
}

impl CapsuleConfig {
    pub fn reference() -> Self {
        Self {
            primary_types: 32,
            primary_dim: 16,
            kernel: 8,
            output_capsules: 64,
            output_dim: 32,
            routing_iterations: 3,
            out_channels: 256,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.primary_types,
            self.primary_dim,
            self.kernel,
            self.output_capsules,
            self.output_dim,
            self.out_channels,
        ];
        if dims.contains(&0) {
            return Err(CoreError::Config(format!(
                "capsule dimensions must be positive: {self:?}"
            )));
        }
        if self.routing_iterations == 0 {
            return Err(CoreError::Config(
                "routing needs at least one iteration".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct PrimaryCapsules<T: Float>(pub Tensor<T>);

#[derive(Clone, Debug)]
pub struct Predictions<T: Float>(pub Tensor<T>);

#[derive(Clone, Debug)]
pub struct CapsuleVectors<T: Float>(Tensor<T>);

impl<T: Float> CapsuleVectors<T> {
    pub fn new(t: Tensor<T>) -> Self {
        Self(t)
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.0
    }
}

/// Routing logits and couplings, with the per-iteration history.
#[derive(Clone, Debug)]
pub struct RoutingState<T: Float> {
    pub logits: Tensor<T>,
    pub couplings: Tensor<T>,
    /// Iteration (1-based) that produced `couplings`.
    pub couplings_iteration: usize,
    pub iterations: usize,
    pub coupling_history: Vec<Tensor<T>>,
    pub logit_history: Vec<Tensor<T>>,
}

impl<T: Float> RoutingState<T> {
    /// The state as it stood after iteration `k`.
    pub fn snapshot(&self, k: usize) -> Option<Self> {
        if k == 0 || k > self.iterations {
            return None;
        }
        Some(Self {
            logits: self.logit_history[k - 1].clone(),
            couplings: self.coupling_history[k - 1].clone(),
            couplings_iteration: k,
            iterations: self.iterations,
            coupling_history: self.coupling_history[..k].to_vec(),
            logit_history: self.logit_history[..k].to_vec(),
        })
    }
}

#[derive(Clone, Debug)]
pub struct RoutedCapsules<T: Float> {
    pub activities: Tensor<T>,
    pub collapsed: Tensor<T>,
}

/// Every intermediate of one clustering pass.
pub struct CapsuleTrace<T: Float> {
    pub primary: PrimaryCapsules<T>,
    pub predictions: Predictions<T>,
    pub routing: RoutingState<T>,
    pub routed: RoutedCapsules<T>,
    pub presence: Tensor<T>,
    pub vectors: CapsuleVectors<T>,
}

/// `v = (|s|^2 / (1 + |s|^2)) * s / |s|` along `axis`, with `|s|` taken as
/// `sqrt(|s|^2 + SQUASH_EPS)` in the direction term.
pub fn squash<T: Float>(s: &Tensor<T>, axis: usize) -> Tensor<T> {
    let sq = s.sqr().sum_axes(&[axis], true);
    let gain = sq
        .div(&sq.add_scalar(1.0))
        .div(&sq.add_scalar(SQUASH_EPS).sqrt());
    s.mul(&gain)
}

/// `û_{j|i} = W_ij u_i` at every position. `weights` is
/// `types x out_caps x dim x out_dim`.
pub fn predict<T: Float>(u: &PrimaryCapsules<T>, weights: &Tensor<T>) -> Result<Predictions<T>> {
    let &[n, types, dim, h, w] = u.0.dims() else {
        return Err(CoreError::Input(format!(
            "primary capsules must be 5-D, got {:?}",
            u.0.dims()
        )));
    };
    let &[wt, out_caps, wd, out_dim] = weights.dims() else {
        return Err(CoreError::Input(format!(
            "transform weights must be 4-D, got {:?}",
            weights.dims()
        )));
    };
    if wt != types || wd != dim {
        return Err(CoreError::Input(format!(
            "transform weights {:?} do not match capsules {:?}",
            weights.dims(),
            u.0.dims()
        )));
    }
    let positions = n * h * w;
    let u_cols =
        u.0.permute(&[1, 2, 0, 3, 4])
            .reshape(&[types, dim, positions]);
    let w_rows = weights
        .permute(&[0, 1, 3, 2])
        .reshape(&[types, out_caps * out_dim, dim]);
    let pred = w_rows
        .matmul(&u_cols)
        .reshape(&[types, out_caps, out_dim, n, h, w])
        .permute(&[3, 1, 0, 2, 4, 5]);
    Ok(Predictions(pred))
}

/// Routing-by-agreement with logits starting at zero.
pub fn route<T: Float>(
    pred: &Predictions<T>,
    iterations: usize,
) -> Result<(RoutingState<T>, Tensor<T>)> {
    if iterations == 0 {
        return Err(CoreError::Config(
            "routing needs at least one iteration".into(),
        ));
    }
    let &[n, out_caps, types, _, h, w] = pred.0.dims() else {
        return Err(CoreError::Input(format!(
            "predictions must be 6-D, got {:?}",
            pred.0.dims()
        )));
    };
    let u_hat = &pred.0;
    let mut logits = Tensor::zeros(&[n, out_caps, types, 1, h, w]);
    let mut coupling_history = Vec::with_capacity(iterations);
    let mut logit_history = Vec::with_capacity(iterations);
    let mut activities = None;
    for _ in 0..iterations {
        if !logits.all_finite() {
            return Err(CoreError::Numeric("non-finite routing logits".into()));
        }
        let couplings = logits.softmax(1);
        let s = couplings.mul(u_hat).sum_axes(&[2], true);
        let v = squash(&s, 3);
        logits = logits.add(&v.mul(u_hat).sum_axes(&[3], true));
        coupling_history.push(couplings);
        logit_history.push(logits.clone());
        activities = Some(v);
    }
    let v = activities.expect("iterations >= 1");
    let out_dim = v.dim(3);
    let v = v.reshape(&[n, out_caps, out_dim, h, w]);
    let state = RoutingState {
        logits,
        couplings: coupling_history.last().expect("iterations >= 1").clone(),
        couplings_iteration: iterations,
        iterations,
        coupling_history,
        logit_history,
    };
    Ok((state, v))
}

/// `Û[j] = sum_i c_ij û_{j|i}` using the couplings of the final iteration.
pub fn collapse<T: Float>(pred: &Predictions<T>, state: &RoutingState<T>) -> Result<Tensor<T>> {
    if state.couplings_iteration != state.iterations {
        return Err(CoreError::Contract(format!(
            "couplings from iteration {} of {}; collapse needs the last iteration",
            state.couplings_iteration, state.iterations
        )));
    }
    let &[n, out_caps, _, out_dim, h, w] = pred.0.dims() else {
        return Err(CoreError::Input(format!(
            "predictions must be 6-D, got {:?}",
            pred.0.dims()
        )));
    };
    Ok(state
        .couplings
        .mul(&pred.0)
        .sum_axes(&[2], false)
        .reshape(&[n, out_caps, out_dim, h, w]))
}

/// Norm over the output-capsule axis: `N x out_caps x D x H x W -> N x D x H x W`.
pub fn entity_presence<T: Float>(collapsed: &Tensor<T>) -> Tensor<T> {
    let &[n, _, d, h, w] = collapsed.dims() else {
        panic!("collapsed capsules must be 5-D, got {:?}", collapsed.dims())
    };
    collapsed.l2_norm(1).reshape(&[n, d, h, w])
}

pub struct CapsuleClustering<T: Float> {
    cfg: CapsuleConfig,
    in_channels: usize,
    primary: Conv2d<T>,
    transform: Arc<Param<T>>,
    upsample: ConvTranspose2d<T>,
}

impl<T: Float> CapsuleClustering<T> {
    pub fn new(pb: &ParamBuilder<'_, T>, cfg: CapsuleConfig, in_channels: usize) -> Result<Self> {
        cfg.validate()?;
        let primary = Conv2d::new(
            &pb.pp("primary"),
            in_channels,
            cfg.primary_types * cfg.primary_dim,
            cfg.kernel,
            1,
            0,
        );
        let transform = pb.param(
            "transform",
            &[
                cfg.primary_types,
                cfg.output_capsules,
                cfg.primary_dim,
                cfg.output_dim,
            ],
            Init::FanIn(cfg.primary_dim),
        );
        let upsample = ConvTranspose2d::new(
            &pb.pp("upsample"),
            cfg.output_dim,
            cfg.out_channels,
            cfg.kernel,
            1,
            0,
        );
        Ok(Self {
            cfg,
            in_channels,
            primary,
            transform,
            upsample,
        })
    }

    pub fn config(&self) -> &CapsuleConfig {
        &self.cfg
    }

    pub fn transform_weights(&self) -> &Arc<Param<T>> {
        &self.transform
    }

    /// The `types` parallel convolutions, realised as one convolution whose
    /// output channels are split into `types x dim`.
    pub fn primary_capsules(&self, x: &LatentCode<T>) -> Result<PrimaryCapsules<T>> {
        let [c, h, w] = x.shape();
        if c != self.in_channels {
            return Err(CoreError::Input(format!(
                "capsule layer expects {} channels, got {c}",
                self.in_channels
            )));
        }
        if h < self.cfg.kernel || w < self.cfg.kernel {
            return Err(CoreError::Input(format!(
                "latent {h}x{w} is smaller than the {}x{} capsule kernel",
                self.cfg.kernel, self.cfg.kernel
            )));
        }
        let u = self.primary.forward(x.tensor());
        let (oh, ow) = (u.dim(2), u.dim(3));
        Ok(PrimaryCapsules(u.reshape(&[
            x.batch(),
            self.cfg.primary_types,
            self.cfg.primary_dim,
            oh,
            ow,
        ])))
    }

    pub fn predict(&self, u: &PrimaryCapsules<T>) -> Result<Predictions<T>> {
        predict(u, &self.transform.tensor())
    }

    pub fn trace(&self, x: &LatentCode<T>) -> Result<CapsuleTrace<T>> {
        let primary = self.primary_capsules(x)?;
        let predictions = self.predict(&primary)?;
        let (routing, activities) = route(&predictions, self.cfg.routing_iterations)?;
        let collapsed = collapse(&predictions, &routing)?;
        let presence = entity_presence(&collapsed);
        let vectors = CapsuleVectors(self.upsample.forward(&presence));
        Ok(CapsuleTrace {
            primary,
            predictions,
            routing,
            routed: RoutedCapsules {
                activities,
                collapsed,
            },
            presence,
            vectors,
        })
    }

    pub fn capsule_vectors(&self, x: &LatentCode<T>) -> Result<CapsuleVectors<T>> {
        Ok(self.trace(x)?.vectors)
    }
}
