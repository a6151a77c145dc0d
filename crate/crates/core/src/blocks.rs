//! Differentiable building blocks shared by the encoder and both decoders.
//!
//! Every block works on `N x C x H x W` tensors ("feature maps").

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use cevae_tensor::{Float, Init, Param, ParamBuilder, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// An `N x C x H x W` activation tensor.
pub type FeatureMap<T> = Tensor<T>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    Batch,
    Group,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Swish,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub normalization: Normalization,
    pub activation: Activation,
    /// Upper bound on group-norm groups; the largest divisor of the channel
    /// count not exceeding it is used.
    pub norm_groups: usize,
}

impl BlockConfig {
    pub fn new(in_channels: usize, out_channels: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            normalization: Normalization::Group,
            activation: Activation::Swish,
            norm_groups: 32,
        }
    }

    pub fn with_groups(mut self, norm_groups: usize) -> Self {
        self.norm_groups = norm_groups;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 || self.norm_groups == 0 {
            return Err(CoreError::Config(format!("invalid block config {self:?}")));
        }
        Ok(())
    }
}

pub(crate) fn check_nchw<T: Float>(x: &Tensor<T>, channels: usize, what: &str) -> Result<()> {
    match x.dims() {
        &[_, c, h, w] if c == channels && h > 0 && w > 0 => Ok(()),
        d => Err(CoreError::Config(format!(
            "{what} expects N x {channels} x H x W, got {d:?}"
        ))),
    }
}

fn swish<T: Float>(x: &Tensor<T>, act: Activation) -> Tensor<T> {
    match act {
        Activation::Swish => x.silu(),
    }
}

pub struct Conv2d<T: Float> {
    pub weight: Arc<Param<T>>,
    pub bias: Option<Arc<Param<T>>>,
    stride: usize,
    padding: usize,
}

impl<T: Float> Conv2d<T> {
    pub fn new(
        pb: &ParamBuilder<'_, T>,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        let fan_in = cin * kernel * kernel;
        Self {
            weight: pb.param("weight", &[cout, cin, kernel, kernel], Init::FanIn(fan_in)),
            bias: Some(pb.param("bias", &[cout], Init::FanIn(fan_in))),
            stride,
            padding,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let b = self.bias.as_ref().map(|b| b.tensor());
        x.conv2d(&self.weight.tensor(), b.as_ref(), self.stride, self.padding)
    }

    pub fn zero(&self) {
        self.weight.fill(0.0);
        if let Some(b) = &self.bias {
            b.fill(0.0);
        }
    }
}

pub struct ConvTranspose2d<T: Float> {
    pub weight: Arc<Param<T>>,
    pub bias: Option<Arc<Param<T>>>,
    stride: usize,
    padding: usize,
}

impl<T: Float> ConvTranspose2d<T> {
    pub fn new(
        pb: &ParamBuilder<'_, T>,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        let fan_in = cout * kernel * kernel;
        Self {
            weight: pb.param("weight", &[cin, cout, kernel, kernel], Init::FanIn(fan_in)),
            bias: Some(pb.param("bias", &[cout], Init::FanIn(fan_in))),
            stride,
            padding,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let b = self.bias.as_ref().map(|b| b.tensor());
        x.conv_transpose2d(
            &self.weight.tensor(),
            b.as_ref(),
            self.stride,
            self.padding,
            0,
        )
    }

    pub fn zero(&self) {
        self.weight.fill(0.0);
        if let Some(b) = &self.bias {
            b.fill(0.0);
        }
    }
}

fn channel_shape(c: usize) -> [usize; 4] {
    [1, c, 1, 1]
}

pub struct GroupNorm<T: Float> {
    groups: usize,
    gamma: Arc<Param<T>>,
    beta: Arc<Param<T>>,
    eps: f64,
}

impl<T: Float> GroupNorm<T> {
    pub fn new(pb: &ParamBuilder<'_, T>, channels: usize, max_groups: usize) -> Self {
        let groups = (1..=max_groups.min(channels))
            .rev()
            .find(|g| channels.is_multiple_of(*g))
            .unwrap_or(1);
        Self {
            groups,
            gamma: pb.param("weight", &[channels], Init::Const(1.0)),
            beta: pb.param("bias", &[channels], Init::Zeros),
            eps: 1e-6,
        }
    }

    pub fn groups(&self) -> usize {
        self.groups
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        x.group_norm(
            self.groups,
            &self.gamma.tensor(),
            &self.beta.tensor(),
            self.eps,
        )
    }
}

/// Batch normalization with running statistics for evaluation mode.
pub struct BatchNorm<T: Float> {
    gamma: Arc<Param<T>>,
    beta: Arc<Param<T>>,
    running_mean: Arc<Param<T>>,
    running_var: Arc<Param<T>>,
    momentum: f64,
    eps: f64,
    training: AtomicBool,
}

impl<T: Float> BatchNorm<T> {
    pub fn new(pb: &ParamBuilder<'_, T>, channels: usize) -> Self {
        Self {
            gamma: pb.param("weight", &[channels], Init::Const(1.0)),
            beta: pb.param("bias", &[channels], Init::Zeros),
            running_mean: pb.buffer("running_mean", &[channels], Init::Zeros),
            running_var: pb.buffer("running_var", &[channels], Init::Const(1.0)),
            momentum: 0.1,
            eps: 1e-5,
            training: AtomicBool::new(false),
        }
    }

    pub fn set_training(&self, training: bool) {
        self.training.store(training, Ordering::Relaxed);
    }

    pub fn is_training(&self) -> bool {
        self.training.load(Ordering::Relaxed)
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let &[n, c, h, w] = x.dims() else {
            panic!("batch norm expects NCHW")
        };
        let normed = if self.is_training() {
            let mean = x.mean_axes(&[0, 2, 3], true);
            let centered = x.sub(&mean);
            let var = centered.sqr().mean_axes(&[0, 2, 3], true);
            self.update_running(mean.data(), var.data(), n * h * w);
            centered.div(&var.add_scalar(self.eps).sqrt())
        } else {
            let mean = self.running_mean.tensor().reshape(&channel_shape(c));
            let std = self
                .running_var
                .tensor()
                .add_scalar(self.eps)
                .sqrt()
                .reshape(&channel_shape(c));
            x.sub(&mean).div(&std)
        };
        normed
            .mul(&self.gamma.tensor().reshape(&channel_shape(c)))
            .add(&self.beta.tensor().reshape(&channel_shape(c)))
    }

    fn update_running(&self, mean: &[T], var: &[T], count: usize) {
        let m = T::of(self.momentum);
        let unbias = if count > 1 {
            T::of(count as f64 / (count as f64 - 1.0))
        } else {
            T::one()
        };
        let rm = self.running_mean.tensor();
        let rv = self.running_var.tensor();
        self.running_mean.set(
            rm.data()
                .iter()
                .zip(mean)
                .map(|(&r, &b)| (T::one() - m) * r + m * b)
                .collect(),
        );
        self.running_var.set(
            rv.data()
                .iter()
                .zip(var)
                .map(|(&r, &b)| (T::one() - m) * r + m * b * unbias)
                .collect(),
        );
    }
}

/// Either normalization, as selected by [`BlockConfig::normalization`].
pub enum Norm<T: Float> {
    Group(GroupNorm<T>),
    Batch(BatchNorm<T>),
}

impl<T: Float> Norm<T> {
    fn new(pb: &ParamBuilder<'_, T>, channels: usize, cfg: &BlockConfig) -> Self {
        match cfg.normalization {
            Normalization::Group => Norm::Group(GroupNorm::new(pb, channels, cfg.norm_groups)),
            Normalization::Batch => Norm::Batch(BatchNorm::new(pb, channels)),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        match self {
            Norm::Group(n) => n.forward(x),
            Norm::Batch(n) => n.forward(x),
        }
    }

    pub fn set_training(&self, training: bool) {
        if let Norm::Batch(n) = self {
            n.set_training(training);
        }
    }
}

/// `skip(x) + conv(act(norm(conv(act(norm(x))))))` with a 1x1 projection on the
/// skip path when the channel count changes.
pub struct ResBlock<T: Float> {
    cfg: BlockConfig,
    norm1: Norm<T>,
    conv1: Conv2d<T>,
    norm2: Norm<T>,
    conv2: Conv2d<T>,
    skip: Option<Conv2d<T>>,
}

impl<T: Float> ResBlock<T> {
    pub fn new(pb: &ParamBuilder<'_, T>, cfg: BlockConfig) -> Result<Self> {
        cfg.validate()?;
        let (cin, cout) = (cfg.in_channels, cfg.out_channels);
        Ok(Self {
            cfg,
            norm1: Norm::new(&pb.pp("norm1"), cin, &cfg),
            conv1: Conv2d::new(&pb.pp("conv1"), cin, cout, 3, 1, 1),
            norm2: Norm::new(&pb.pp("norm2"), cout, &cfg),
            conv2: Conv2d::new(&pb.pp("conv2"), cout, cout, 3, 1, 1),
            skip: (cin != cout).then(|| Conv2d::new(&pb.pp("skip"), cin, cout, 1, 1, 0)),
        })
    }

    pub fn config(&self) -> &BlockConfig {
        &self.cfg
    }

    pub fn forward(&self, x: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        check_nchw(x, self.cfg.in_channels, "res_block")?;
        let act = self.cfg.activation;
        let h = self.conv1.forward(&swish(&self.norm1.forward(x), act));
        let h = self.conv2.forward(&swish(&self.norm2.forward(&h), act));
        let skip = match &self.skip {
            Some(proj) => proj.forward(x),
            None => x.clone(),
        };
        Ok(skip.add(&h))
    }

    /// Zeroes the last convolution so the block reduces to its skip path.
    pub fn zero_residual_branch(&self) {
        self.conv2.zero();
    }

    pub fn skip_projection(&self) -> Option<&Conv2d<T>> {
        self.skip.as_ref()
    }

    pub fn set_training(&self, training: bool) {
        self.norm1.set_training(training);
        self.norm2.set_training(training);
    }
}

/// Single-head spatial self-attention with 1x1 query/key/value/output
/// projections; returns `x + attention(x)`.
pub struct SelfAttention<T: Float> {
    channels: usize,
    norm: GroupNorm<T>,
    q: Conv2d<T>,
    k: Conv2d<T>,
    v: Conv2d<T>,
    proj: Conv2d<T>,
}

impl<T: Float> SelfAttention<T> {
    pub fn new(pb: &ParamBuilder<'_, T>, channels: usize, norm_groups: usize) -> Self {
        Self {
            channels,
            norm: GroupNorm::new(&pb.pp("norm"), channels, norm_groups),
            q: Conv2d::new(&pb.pp("q"), channels, channels, 1, 1, 0),
            k: Conv2d::new(&pb.pp("k"), channels, channels, 1, 1, 0),
            v: Conv2d::new(&pb.pp("v"), channels, channels, 1, 1, 0),
            proj: Conv2d::new(&pb.pp("proj_out"), channels, channels, 1, 1, 0),
        }
    }

    /// Row-stochastic `N x HW x HW` attention matrix; row `i` holds the
    /// weights query position `i` assigns to every key position.
    pub fn attention_weights(&self, x: &FeatureMap<T>) -> Result<Tensor<T>> {
        check_nchw(x, self.channels, "self_attention")?;
        if !x.all_finite() {
            return Err(CoreError::Numeric(
                "non-finite input to self-attention".into(),
            ));
        }
        Ok(self.weights_and_values(x).0)
    }

    fn weights_and_values(&self, x: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
        let &[n, c, h, w] = x.dims() else {
            unreachable!()
        };
        let hn = self.norm.forward(x);
        let q = self
            .q
            .forward(&hn)
            .reshape(&[n, c, h * w])
            .permute(&[0, 2, 1]);
        let k = self.k.forward(&hn).reshape(&[n, c, h * w]);
        let v = self.v.forward(&hn).reshape(&[n, c, h * w]);
        let weights = q.matmul(&k).scale(1.0 / (c as f64).sqrt()).softmax(2);
        (weights, v)
    }

    pub fn forward(&self, x: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        check_nchw(x, self.channels, "self_attention")?;
        if !x.all_finite() {
            return Err(CoreError::Numeric(
                "non-finite input to self-attention".into(),
            ));
        }
        let &[n, c, h, w] = x.dims() else {
            unreachable!()
        };
        let (weights, v) = self.weights_and_values(x);
        let attended = v
            .matmul(&weights.permute(&[0, 2, 1]))
            .reshape(&[n, c, h, w]);
        Ok(x.add(&self.proj.forward(&attended)))
    }

    pub fn value_projection(&self) -> &Conv2d<T> {
        &self.v
    }

    pub fn output_projection(&self) -> &Conv2d<T> {
        &self.proj
    }
}

/// Strided 3x3 convolution halving the resolution, rounding up on odd sizes.
pub struct Downsample<T: Float> {
    channels: usize,
    conv: Conv2d<T>,
}

impl<T: Float> Downsample<T> {
    pub fn new(pb: &ParamBuilder<'_, T>, channels: usize) -> Self {
        Self {
            channels,
            conv: Conv2d::new(&pb.pp("conv"), channels, channels, 3, 2, 1),
        }
    }

    pub fn forward(&self, x: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        check_nchw(x, self.channels, "downsample")?;
        if x.dim(2) < 2 || x.dim(3) < 2 {
            return Err(CoreError::Input(format!(
                "cannot downsample a {}x{} map",
                x.dim(2),
                x.dim(3)
            )));
        }
        Ok(self.conv.forward(x))
    }
}

/// Nearest-neighbour 2x resize followed by a 3x3 convolution.
pub struct UpsampleBlock<T: Float> {
    cfg: BlockConfig,
    conv: Conv2d<T>,
}

impl<T: Float> UpsampleBlock<T> {
    pub fn new(pb: &ParamBuilder<'_, T>, cfg: BlockConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            conv: Conv2d::new(&pb.pp("conv"), cfg.in_channels, cfg.out_channels, 3, 1, 1),
        })
    }

    pub fn forward(&self, x: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        check_nchw(x, self.cfg.in_channels, "upsample_block")?;
        Ok(self.conv.forward(&x.upsample_nearest2x()))
    }

    pub fn conv(&self) -> &Conv2d<T> {
        &self.conv
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use cevae_tensor::ParamStore;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_map(shape: &[usize], seed: u64) -> Tensor<f64> {
        Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn zero_residual_branch_is_identity() {
        let store = ParamStore::<f64>::new(1);
        let block = ResBlock::new(&store.root(), BlockConfig::new(8, 8).with_groups(4)).unwrap();
        block.zero_residual_branch();
        let x = rand_map(&[2, 8, 5, 5], 2);
        assert_eq!(block.forward(&x).unwrap().data(), x.data());
    }

    #[test]
    fn zero_residual_branch_leaves_projection() {
        let store = ParamStore::<f64>::new(1);
        let block = ResBlock::new(&store.root(), BlockConfig::new(4, 6).with_groups(2)).unwrap();
        block.zero_residual_branch();
        let x = rand_map(&[1, 4, 3, 3], 3);
        let expected = block.skip_projection().unwrap().forward(&x);
        assert_eq!(block.forward(&x).unwrap().data(), expected.data());
    }

    #[test]
    fn res_block_rejects_channel_mismatch() {
        let store = ParamStore::<f32>::new(0);
        let block = ResBlock::new(&store.root(), BlockConfig::new(4, 4)).unwrap();
        let x = Tensor::zeros(&[1, 3, 4, 4]);
        assert!(matches!(block.forward(&x), Err(CoreError::Config(_))));
    }

    #[test]
    fn group_count_divides_channels() {
        let store = ParamStore::<f32>::new(0);
        assert_eq!(GroupNorm::new(&store.root().pp("a"), 64, 32).groups(), 32);
        assert_eq!(GroupNorm::new(&store.root().pp("b"), 12, 32).groups(), 12);
        assert_eq!(GroupNorm::new(&store.root().pp("c"), 12, 8).groups(), 6);
    }

    #[test]
    fn attention_identity_when_output_projection_zero() {
        let store = ParamStore::<f64>::new(4);
        let attn = SelfAttention::new(&store.root(), 4, 2);
        attn.output_projection().zero();
        let x = rand_map(&[1, 4, 3, 3], 5);
        assert_eq!(attn.forward(&x).unwrap().data(), x.data());
    }

    #[test]
    fn attention_identity_when_values_and_output_bias_zero() {
        let store = ParamStore::<f64>::new(4);
        let attn = SelfAttention::new(&store.root(), 4, 2);
        attn.value_projection().zero();
        attn.output_projection().bias.as_ref().unwrap().fill(0.0);
        let x = rand_map(&[1, 4, 3, 3], 6);
        assert_eq!(attn.forward(&x).unwrap().data(), x.data());
    }

    #[test]
    fn attention_on_single_position() {
        let store = ParamStore::<f64>::new(4);
        let attn = SelfAttention::new(&store.root(), 4, 2);
        let w = attn.attention_weights(&rand_map(&[1, 4, 1, 1], 7)).unwrap();
        assert_eq!(w.dims(), &[1, 1, 1]);
        assert_eq!(w.data(), &[1.0]);
    }

    #[test]
    fn attention_rejects_non_finite() {
        let store = ParamStore::<f64>::new(4);
        let attn = SelfAttention::new(&store.root(), 1, 1);
        let x = Tensor::from_vec(vec![0.0, f64::NAN], &[1, 1, 1, 2]);
        assert!(matches!(attn.forward(&x), Err(CoreError::Numeric(_))));
    }

    #[test]
    fn downsample_shapes() {
        let store = ParamStore::<f32>::new(0);
        let down = Downsample::new(&store.root(), 4);
        assert_eq!(
            down.forward(&Tensor::zeros(&[1, 4, 32, 32]))
                .unwrap()
                .dims(),
            &[1, 4, 16, 16]
        );
        assert_eq!(
            down.forward(&Tensor::zeros(&[1, 4, 17, 17]))
                .unwrap()
                .dims(),
            &[1, 4, 9, 9]
        );
        assert!(matches!(
            down.forward(&Tensor::zeros(&[1, 4, 1, 1])),
            Err(CoreError::Input(_))
        ));
    }

    #[test]
    fn batch_norm_eval_uses_running_stats() {
        let store = ParamStore::<f64>::new(0);
        let bn = BatchNorm::new(&store.root(), 2);
        let x = rand_map(&[3, 2, 4, 4], 9);
        // fresh running stats are (0, 1): eval mode is almost the identity
        let y = bn.forward(&x);
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b / (1.0 + 1e-5f64).sqrt()).abs() < 1e-12);
        }
        bn.set_training(true);
        let before = store.fingerprint();
        let y = bn.forward(&x);
        assert_ne!(
            store.fingerprint(),
            before,
            "running stats must move in training mode"
        );
        let mean: f64 = y.data().iter().sum::<f64>() / y.numel() as f64;
        assert!(mean.abs() < 1e-12);
    }
}
