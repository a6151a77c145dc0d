use std::cell::Cell;
use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::Float;

/// Maps the output gradient (and the op's own output values) to one optional
/// gradient per parent, in parent order.
pub(crate) type BackwardFn<T> = Box<dyn Fn(&[T], &[T]) -> Vec<Option<Vec<T>>> + Send + Sync>;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Disables graph recording on the current thread until dropped.
pub struct NoGradGuard {
    prev: bool,
}

impl Drop for NoGradGuard {
    fn drop(&mut self) {
        GRAD_ENABLED.with(|g| g.set(self.prev));
    }
}

pub fn no_grad() -> NoGradGuard {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    NoGradGuard { prev }
}

pub fn is_grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

struct Node<T: Float> {
    id: u64,
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
    requires_grad: bool,
    parents: Vec<Tensor<T>>,
    backward: Option<BackwardFn<T>>,
}

/// An immutable n-dimensional array that records the operations producing it
/// when any of its inputs requires a gradient.
pub struct Tensor<T: Float>(Arc<Node<T>>);

impl<T: Float> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor(Arc::clone(&self.0))
    }
}

impl<T: Float> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("dtype", &T::NAME)
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

pub(crate) fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Float> Tensor<T> {
    fn build(data: Arc<Vec<T>>, shape: Vec<usize>, requires_grad: bool) -> Self {
        assert_eq!(
            data.len(),
            numel_of(&shape),
            "data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Tensor(Arc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data,
            requires_grad,
            parents: Vec::new(),
            backward: None,
        }))
    }

    /// A constant (no gradient) tensor.
    pub fn from_vec(data: Vec<T>, shape: &[usize]) -> Self {
        Self::build(Arc::new(data), shape.to_vec(), false)
    }

    /// A leaf tensor whose gradient is collected by [`Tensor::backward`].
    pub fn var(data: Vec<T>, shape: &[usize]) -> Self {
        Self::build(Arc::new(data), shape.to_vec(), true)
    }

    pub fn from_f64(data: &[f64], shape: &[usize]) -> Self {
        Self::from_vec(data.iter().map(|&v| T::of(v)).collect(), shape)
    }

    pub fn scalar(v: T) -> Self {
        Self::from_vec(vec![v], &[])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        Self::from_vec(vec![v; numel_of(shape)], shape)
    }

    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let data = (0..numel_of(shape))
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                T::of(z * std)
            })
            .collect();
        Self::from_vec(data, shape)
    }

    pub fn rand_uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        let data = (0..numel_of(shape))
            .map(|_| T::of(rng.gen_range(lo..hi)))
            .collect();
        Self::from_vec(data, shape)
    }

    /// Result of an op. The graph edge is recorded only when grad mode is on
    /// and a parent requires a gradient.
    pub(crate) fn from_op(
        data: Vec<T>,
        shape: Vec<usize>,
        parents: &[&Tensor<T>],
        backward: impl Fn(&[T], &[T]) -> Vec<Option<Vec<T>>> + Send + Sync + 'static,
    ) -> Self {
        let track = is_grad_enabled() && parents.iter().any(|p| p.requires_grad());
        if !track {
            return Self::build(Arc::new(data), shape, false);
        }
        assert_eq!(
            data.len(),
            numel_of(&shape),
            "op produced {} values for shape {:?}",
            data.len(),
            shape
        );
        Tensor(Arc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data: Arc::new(data),
            requires_grad: true,
            parents: parents.iter().map(|p| (*p).clone()).collect(),
            backward: Some(Box::new(backward)),
        }))
    }

    /// Same storage, new shape; used by reshape.
    pub(crate) fn share_with_shape(&self, shape: Vec<usize>) -> Self {
        let track = is_grad_enabled() && self.requires_grad();
        if !track {
            return Self::build(Arc::clone(&self.0.data), shape, false);
        }
        Tensor(Arc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data: Arc::clone(&self.0.data),
            requires_grad: true,
            parents: vec![self.clone()],
            backward: Some(Box::new(|g: &[T], _: &[T]| vec![Some(g.to_vec())])),
        }))
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn dims(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.0.shape[axis]
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.0.data.as_ref().clone()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.0.data.iter().map(|v| v.as_f64()).collect()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(
            self.numel(),
            1,
            "item() on tensor of shape {:?}",
            self.dims()
        );
        self.0.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Same values, cut from the graph.
    pub fn detach(&self) -> Self {
        Self::build(Arc::clone(&self.0.data), self.0.shape.clone(), false)
    }

    /// Converts element type; the result is a constant.
    pub fn cast<U: Float>(&self) -> Tensor<U> {
        Tensor::from_vec(
            self.0.data.iter().map(|v| U::of(v.as_f64())).collect(),
            &self.0.shape,
        )
    }

    pub fn all_finite(&self) -> bool {
        self.0.data.iter().all(|v| v.is_finite())
    }

    /// Back-propagates from a one-element tensor.
    pub fn backward(&self) -> GradStore<T> {
        assert_eq!(
            self.numel(),
            1,
            "backward() requires a scalar, got shape {:?}",
            self.dims()
        );
        self.backward_with(vec![T::one()])
    }

    /// Back-propagates a given output gradient. Only leaf gradients are kept.
    pub fn backward_with(&self, seed: Vec<T>) -> GradStore<T> {
        self.backward_impl(seed, None)
    }

    /// Scalar backward that only visits nodes lying on a path to one of
    /// `targets`; the returned store holds gradients for those leaves only.
    pub fn backward_targets(&self, targets: &[&Tensor<T>]) -> GradStore<T> {
        assert_eq!(
            self.numel(),
            1,
            "backward_targets() requires a scalar, got shape {:?}",
            self.dims()
        );
        let ids: HashSet<u64> = targets.iter().map(|t| t.id()).collect();
        self.backward_impl(vec![T::one()], Some(ids))
    }

    fn backward_impl(&self, seed: Vec<T>, targets: Option<HashSet<u64>>) -> GradStore<T> {
        assert_eq!(seed.len(), self.numel(), "seed gradient length");
        let mut store = GradStore {
            grads: HashMap::new(),
        };
        if !self.requires_grad() {
            return store;
        }
        // Ids grow monotonically and parents always predate children, so
        // descending id order is a reverse topological order.
        let mut nodes: BTreeMap<u64, Tensor<T>> = BTreeMap::new();
        let mut stack = vec![self.clone()];
        while let Some(t) = stack.pop() {
            if nodes.contains_key(&t.id()) {
                continue;
            }
            for p in &t.0.parents {
                if p.requires_grad() && !nodes.contains_key(&p.id()) {
                    stack.push(p.clone());
                }
            }
            nodes.insert(t.id(), t);
        }
        // With targets, keep only nodes that have a target among their
        // ancestors (or are one). Parents come first in ascending id order.
        let needed: Option<HashSet<u64>> = targets.map(|targets| {
            let mut needed = HashSet::new();
            for (id, t) in &nodes {
                if targets.contains(id) || t.0.parents.iter().any(|p| needed.contains(&p.id())) {
                    needed.insert(*id);
                }
            }
            needed
        });
        let wanted = |id: &u64| needed.as_ref().is_none_or(|n| n.contains(id));
        let mut pending: HashMap<u64, Vec<T>> = HashMap::new();
        pending.insert(self.id(), seed);
        for (id, t) in nodes.iter().rev() {
            if !wanted(id) {
                continue;
            }
            let Some(g) = pending.remove(id) else {
                continue;
            };
            match &t.0.backward {
                None => {
                    store.grads.insert(*id, g);
                }
                Some(bw) => {
                    let parent_grads = bw(&g, &t.0.data);
                    debug_assert_eq!(parent_grads.len(), t.0.parents.len());
                    for (p, pg) in t.0.parents.iter().zip(parent_grads) {
                        let Some(pg) = pg else { continue };
                        if !p.requires_grad() || !wanted(&p.id()) {
                            continue;
                        }
                        debug_assert_eq!(pg.len(), p.numel());
                        match pending.get_mut(&p.id()) {
                            Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += *b),
                            None => {
                                pending.insert(p.id(), pg);
                            }
                        }
                    }
                }
            }
        }
        store
    }
}

/// Gradients of leaf tensors, keyed by tensor identity.
#[derive(Default)]
pub struct GradStore<T: Float> {
    grads: HashMap<u64, Vec<T>>,
}

impl<T: Float> GradStore<T> {
    pub fn get(&self, t: &Tensor<T>) -> Option<&[T]> {
        self.grads.get(&t.id()).map(|v| v.as_slice())
    }

    /// Gradient as a tensor, zeros when the leaf was not reached.
    pub fn get_or_zeros(&self, t: &Tensor<T>) -> Tensor<T> {
        match self.get(t) {
            Some(g) => Tensor::from_vec(g.to_vec(), t.dims()),
            None => Tensor::zeros(t.dims()),
        }
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}
