use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numcore::scalar::Scalar;
use crate::numcore::tensor::Tensor;

/// Named parameters. Enumeration is lexicographic; initial values are drawn in
/// f64 from a seeded ChaCha stream and then cast, so an f32 and an f64 store
/// built from the same seed hold the same values up to rounding.
#[derive(Clone, Debug)]
pub struct ParamStore<T> {
    params: BTreeMap<String, Tensor<T>>,
    seed: u64,
    rng: ChaCha8Rng,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new(seed: u64) -> Self {
        Self {
            params: BTreeMap::new(),
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Inserts or replaces a parameter.
    pub fn set(&mut self, name: &str, value: Tensor<T>) {
        self.params.insert(name.to_string(), value);
    }

    fn insert_new(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(Error::Contract(format!("duplicate parameter {name}")));
        }
        self.params.insert(name.to_string(), value);
        Ok(())
    }

    /// Weight matrix, uniform in ±sqrt(6/(fan_in+fan_out)).
    pub fn xavier(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Result<()> {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| T::of(self.rng.random_range(-bound..=bound)))
            .collect();
        self.insert_new(name, Tensor::new(&[fan_in, fan_out], data)?)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<()> {
        self.insert_new(name, Tensor::zeros(shape))
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> Result<()> {
        self.insert_new(name, Tensor::ones(shape))
    }

    /// Same names and values at another precision.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            seed: self.seed,
            rng: self.rng.clone(),
        }
    }

    /// Sets every parameter whose name starts with `prefix` to zero.
    pub fn zero_prefix(&mut self, prefix: &str) {
        for (name, t) in self.params.iter_mut() {
            if name.starts_with(prefix) {
                *t = Tensor::zeros(t.shape());
            }
        }
    }
}
