use alloc::string::{String, ToString};
use alloc::vec::Vec;
#[cfg(not(feature = "std"))]
use num_traits::Float;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Exec;
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Index of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named, ordered collection of parameter tensors.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { names: Vec::new(), tensors: Vec::new() }
    }

    pub fn add(&mut self, name: impl ToString, t: Tensor<T>) -> ParamId {
        self.names.push(name.to_string());
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Hand every tensor to an executor as a parameter, in store order.
    pub fn bind<E: Exec<T>>(&self, ex: &mut E) -> Vec<E::V> {
        self.tensors.iter().map(|t| ex.param(t)).collect()
    }

    /// Hand every tensor to an executor as a constant.
    pub fn bind_frozen<E: Exec<T>>(&self, ex: &mut E) -> Vec<E::V> {
        self.tensors.iter().map(|t| ex.constant(t.clone())).collect()
    }

    pub fn fill(&mut self, value: T) {
        for t in &mut self.tensors {
            t.data_mut().iter_mut().for_each(|v| *v = value);
        }
    }
}

/// Xavier-normal initialisation scaled by `gain`.
/// `fan_in`/`fan_out` follow the usual convention for `[out, in, k, k]`.
pub fn xavier_normal<T: Real, R: Rng + ?Sized>(shape: &[usize], gain: f64, rng: &mut R) -> Tensor<T> {
    let receptive: usize = shape.iter().skip(2).product();
    let fan_out = shape[0] * receptive;
    let fan_in = shape.get(1).copied().unwrap_or(1) * receptive;
    let std = gain * (2.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::randn(shape, std, rng)
}
