use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::tensor::Tensor;

/// Named model parameters, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn into_inner(self) -> BTreeMap<String, Tensor> {
        self.tensors
    }

    pub fn from_map(tensors: BTreeMap<String, Tensor>) -> Self {
        Self { tensors }
    }
}

/// Draws parameter tensors in registration order from one generator.
pub struct Initializer<'a, R: Rng> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut R,
}

impl<R: Rng> Initializer<'_, R> {
    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(self.rng);
                std * z
            })
            .collect();
        self.store.insert(name, Tensor::from_vec(shape, data));
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) {
        self.store.insert(name, Tensor::zeros(shape));
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) {
        self.store.insert(name, Tensor::full(shape, value));
    }

    /// He-normal conv weight `[out, in, k, k]`, scaled by `gain`.
    pub fn conv(&mut self, name: &str, out: usize, inp: usize, k: usize, gain: f64) {
        let std = gain * (2.0 / (inp * k * k) as f64).sqrt();
        self.normal(name, &[out, inp, k, k], std);
    }
}
