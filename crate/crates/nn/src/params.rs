use std::collections::BTreeMap;

use rand::Rng as _;

use crate::error::{NnError, Result};
use crate::rng::{derive_seed, rng_from};
use crate::tensor::Tensor;

/// How a parameter is filled at creation time.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// Uniform in [-1/sqrt(fan_in), +1/sqrt(fan_in)].
    FanIn(usize),
    Zeros,
    Ones,
    Uniform { lo: f64, hi: f64 },
}

/// Named parameter tensors with deterministic, order-independent
/// initialization: each parameter's values come from a stream derived from
/// (seed, name), so inserting parameters in a different order changes
/// nothing.
#[derive(Debug, Clone)]
pub struct ParameterSet {
    seed: u64,
    params: BTreeMap<String, Tensor>,
}

impl ParameterSet {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            params: BTreeMap::new(),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    /// Create and initialize a parameter. Names must be unique.
    pub fn create(&mut self, name: &str, shape: Vec<usize>, init: Init) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(NnError::DuplicateParameter { name: name.into() });
        }
        let mut rng = rng_from(derive_seed(self.seed, name));
        let numel: usize = shape.iter().product();
        let data: Vec<f64> = match init {
            Init::FanIn(fan_in) => {
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                (0..numel).map(|_| rng.gen_range(-bound..bound)).collect()
            }
            Init::Zeros => vec![0.0; numel],
            Init::Ones => vec![1.0; numel],
            Init::Uniform { lo, hi } => (0..numel).map(|_| rng.gen_range(lo..hi)).collect(),
        };
        self.params.insert(name.to_string(), Tensor::new(shape, data)?);
        Ok(())
    }

    /// Insert a pre-built tensor (checkpoint loading).
    pub fn insert(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(NnError::DuplicateParameter { name: name.into() });
        }
        self.params.insert(name.to_string(), tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| NnError::UnknownParameter { name: name.into() })
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .ok_or_else(|| NnError::UnknownParameter { name: name.into() })
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.params.remove(name)
    }

    /// Iterate in name order (the fixed order used by checkpoints and the
    /// optimizer).
    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn total_values(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }
}
