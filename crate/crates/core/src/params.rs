use std::collections::BTreeMap;

use rand::Rng;

use crate::tensor::Tensor;

/// Named trainable tensors, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.entries.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }

    /// Adds a conv weight `[cout, cin, k...]` with fan-in scaled uniform init and a zero bias.
    pub fn init_conv<R: Rng + ?Sized>(&mut self, prefix: &str, weight_shape: &[usize], rng: &mut R) {
        let fan_in: usize = weight_shape[1..].iter().product();
        let bound = (6.0 / fan_in as f64).sqrt();
        self.insert(
            format!("{prefix}.w"),
            Tensor::rand_uniform(weight_shape, -bound, bound, rng),
        );
        self.insert(format!("{prefix}.b"), Tensor::zeros(&[weight_shape[0]]));
    }

    /// Adds a zero-initialized conv (weight and bias).
    pub fn init_conv_zero(&mut self, prefix: &str, weight_shape: &[usize]) {
        self.insert(format!("{prefix}.w"), Tensor::zeros(weight_shape));
        self.insert(format!("{prefix}.b"), Tensor::zeros(&[weight_shape[0]]));
    }
}
