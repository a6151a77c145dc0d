use std::collections::HashMap;
use std::hash::{Hash, Hasher};
use std::sync::{Arc, Mutex, RwLock};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::numel_of;
use crate::{Float, Tensor};

/// Initial values of a new parameter.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Const(f64),
    Uniform(f64, f64),
    Normal(f64),
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    FanIn(usize),
}

/// A named, mutable model weight (or a non-trainable buffer such as running
/// normalization statistics).
pub struct Param<T: Float> {
    name: String,
    trainable: bool,
    value: RwLock<Tensor<T>>,
}

impl<T: Float> Param<T> {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn trainable(&self) -> bool {
        self.trainable
    }

    /// Current value. Trainable parameters come back as gradient leaves.
    pub fn tensor(&self) -> Tensor<T> {
        self.value.read().expect("param lock").clone()
    }

    pub fn dims(&self) -> Vec<usize> {
        self.tensor().dims().to_vec()
    }

    /// Replaces the value; the shape must not change.
    pub fn set(&self, data: Vec<T>) {
        let mut guard = self.value.write().expect("param lock");
        let shape = guard.dims().to_vec();
        assert_eq!(
            data.len(),
            numel_of(&shape),
            "param {} size change",
            self.name
        );
        *guard = if self.trainable {
            Tensor::var(data, &shape)
        } else {
            Tensor::from_vec(data, &shape)
        };
    }

    pub fn fill(&self, v: f64) {
        let n = self.tensor().numel();
        self.set(vec![T::of(v); n]);
    }
}

impl<T: Float> std::fmt::Debug for Param<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Param")
            .field("name", &self.name)
            .field("shape", &self.dims())
            .finish()
    }
}

/// Ordered registry of every parameter of a model, with a seeded generator
/// for initialization.
pub struct ParamStore<T: Float> {
    params: RwLock<Vec<Arc<Param<T>>>>,
    index: RwLock<HashMap<String, usize>>,
    rng: Mutex<ChaCha8Rng>,
}

impl<T: Float> ParamStore<T> {
    pub fn new(seed: u64) -> Self {
        Self {
            params: RwLock::new(Vec::new()),
            index: RwLock::new(HashMap::new()),
            rng: Mutex::new(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    /// Restarts the initialization generator, so parameters created next do
    /// not depend on what was created before.
    pub fn reseed(&self, seed: u64) {
        *self.rng.lock().expect("rng lock") = ChaCha8Rng::seed_from_u64(seed);
    }

    pub fn root(&self) -> ParamBuilder<'_, T> {
        ParamBuilder {
            store: self,
            prefix: String::new(),
        }
    }

    fn insert(&self, name: String, shape: &[usize], init: Init, trainable: bool) -> Arc<Param<T>> {
        let mut index = self.index.write().expect("store lock");
        assert!(
            !index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let mut rng = self.rng.lock().expect("rng lock");
        let t = match init {
            Init::Zeros => Tensor::zeros(shape),
            Init::Const(v) => Tensor::full(shape, T::of(v)),
            Init::Uniform(lo, hi) => Tensor::rand_uniform(shape, lo, hi, &mut *rng),
            Init::Normal(std) => Tensor::randn(shape, std, &mut *rng),
            Init::FanIn(fan_in) => {
                let b = 1.0 / (fan_in.max(1) as f64).sqrt();
                Tensor::rand_uniform(shape, -b, b, &mut *rng)
            }
        };
        let value = if trainable {
            Tensor::var(t.to_vec(), shape)
        } else {
            t
        };
        let p = Arc::new(Param {
            name: name.clone(),
            trainable,
            value: RwLock::new(value),
        });
        let mut params = self.params.write().expect("store lock");
        index.insert(name, params.len());
        params.push(Arc::clone(&p));
        p
    }

    pub fn all(&self) -> Vec<Arc<Param<T>>> {
        self.params.read().expect("store lock").clone()
    }

    pub fn trainable(&self) -> Vec<Arc<Param<T>>> {
        self.all().into_iter().filter(|p| p.trainable).collect()
    }

    pub fn get(&self, name: &str) -> Option<Arc<Param<T>>> {
        let idx = *self.index.read().expect("store lock").get(name)?;
        Some(Arc::clone(&self.params.read().expect("store lock")[idx]))
    }

    pub fn len(&self) -> usize {
        self.params.read().expect("store lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_values(&self) -> usize {
        self.all().iter().map(|p| p.tensor().numel()).sum()
    }

    /// Hash over every name and value bit; any mutation changes it.
    pub fn fingerprint(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for p in self.all() {
            p.name.hash(&mut h);
            for v in p.tensor().data() {
                v.as_f64().to_bits().hash(&mut h);
            }
        }
        h.finish()
    }
}

/// Creates parameters under a dotted name prefix.
#[derive(Clone)]
pub struct ParamBuilder<'a, T: Float> {
    store: &'a ParamStore<T>,
    prefix: String,
}

impl<'a, T: Float> ParamBuilder<'a, T> {
    pub fn pp(&self, name: impl AsRef<str>) -> Self {
        let name = name.as_ref();
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        Self {
            store: self.store,
            prefix,
        }
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    pub fn param(&self, name: &str, shape: &[usize], init: Init) -> Arc<Param<T>> {
        self.store.insert(self.full_name(name), shape, init, true)
    }

    pub fn buffer(&self, name: &str, shape: &[usize], init: Init) -> Arc<Param<T>> {
        self.store.insert(self.full_name(name), shape, init, false)
    }

    pub fn store(&self) -> &'a ParamStore<T> {
        self.store
    }
}
