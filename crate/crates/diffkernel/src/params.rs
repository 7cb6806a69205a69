use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{KernelError, Result};
use crate::tensor::Tensor;

/// Named parameter tensors with a parallel map of accumulated gradients.
///
/// Iteration order is the lexicographic order of names, which keeps
/// optimizer updates and checkpoints deterministic.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
    grads: BTreeMap<String, Tensor>,
    grads_ready: bool,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(KernelError::Config(format!(
                "duplicate parameter name `{name}`"
            )));
        }
        self.grads
            .insert(name.to_string(), Tensor::zeros(value.shape()));
        self.params.insert(name.to_string(), value);
        Ok(())
    }

    /// Glorot-uniform matrix of shape `[fan_in, fan_out]`.
    pub fn insert_glorot(
        &mut self,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut impl Rng,
    ) -> Result<()> {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-limit..limit))
            .collect();
        self.insert(name, Tensor::new(vec![fan_in, fan_out], data)?)
    }

    pub fn insert_normal(
        &mut self,
        name: &str,
        shape: &[usize],
        std: f64,
        rng: &mut impl Rng,
    ) -> Result<()> {
        let normal = Normal::new(0.0, std).map_err(|e| KernelError::Config(e.to_string()))?;
        let n = shape.iter().product();
        let data = (0..n).map(|_| normal.sample(rng)).collect();
        self.insert(name, Tensor::new(shape.to_vec(), data)?)
    }

    pub fn insert_zeros(&mut self, name: &str, shape: &[usize]) -> Result<()> {
        self.insert(name, Tensor::zeros(shape))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| KernelError::Graph(format!("unknown parameter `{name}`")))
    }

    /// Replaces a parameter value; the shape must not change.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .params
            .get_mut(name)
            .ok_or_else(|| KernelError::Graph(format!("unknown parameter `{name}`")))?;
        if slot.shape() != value.shape() {
            return Err(KernelError::Shape(format!(
                "parameter `{name}` has shape {:?}, new value {:?}",
                slot.shape(),
                value.shape()
            )));
        }
        *slot = value;
        Ok(())
    }

    pub fn grad(&self, name: &str) -> Option<&Tensor> {
        self.grads.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Sum of squares over every parameter entry.
    pub fn sq_norm(&self) -> f64 {
        self.params.values().map(Tensor::sq_norm).sum()
    }

    pub fn grads_ready(&self) -> bool {
        self.grads_ready
    }

    pub fn zero_grads(&mut self) {
        for g in self.grads.values_mut() {
            g.data_mut().fill(0.0);
        }
        self.grads_ready = false;
    }

    pub(crate) fn accumulate_grad(&mut self, name: &str, delta: &Tensor) -> Result<()> {
        let g = self
            .grads
            .get_mut(name)
            .ok_or_else(|| KernelError::Graph(format!("unknown parameter `{name}`")))?;
        if g.shape() != delta.shape() {
            return Err(KernelError::Shape(format!(
                "gradient for `{name}` has shape {:?}, expected {:?}",
                delta.shape(),
                g.shape()
            )));
        }
        for (a, b) in g.data_mut().iter_mut().zip(delta.data()) {
            *a += b;
        }
        g.check_finite("gradient accumulation")?;
        self.grads_ready = true;
        Ok(())
    }

    /// Marks gradients as populated even when every reachable gradient was zero.
    pub(crate) fn mark_grads_ready(&mut self) {
        self.grads_ready = true;
    }

    pub(crate) fn param_and_grad_mut(
        &mut self,
    ) -> impl Iterator<Item = (&str, &mut Tensor, &Tensor)> {
        self.params
            .iter_mut()
            .zip(self.grads.values())
            .map(|((k, p), g)| (k.as_str(), p, g))
    }
}
