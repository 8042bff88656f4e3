//! Named learnable parameters.

use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry<T> {
    pub name: String,
    pub value: Tensor<T>,
}

/// Flat registry of every learnable tensor of a model, in creation order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self { entries: Vec::new() }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.entries.push(ParamEntry { name: name.into(), value });
        ParamId(self.entries.len() - 1)
    }

    /// Uniform init in `±sqrt(1 / fan_in)`, the usual default for conv and linear layers.
    pub fn add_uniform<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut R,
    ) -> ParamId {
        let t = uniform_tensor(shape, fan_in, rng);
        self.add(name, t)
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn add_full(&mut self, name: impl Into<String>, shape: &[usize], v: f64) -> ParamId {
        self.add(name, Tensor::full(shape, T::lit(v)))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry { name: e.name.clone(), value: e.value.cast() })
                .collect(),
        }
    }

    /// Re-draws every parameter whose name starts with `prefix`, keeping shapes.
    /// Scale tensors (`*.gamma`, `*.temperature`) reset to one, biases to zero.
    pub fn reinitialize_prefix<R: Rng + ?Sized>(&mut self, prefix: &str, rng: &mut R) {
        for e in self.entries.iter_mut().filter(|e| e.name.starts_with(prefix)) {
            let shape = e.value.shape().to_vec();
            e.value = if e.name.ends_with(".gamma") || e.name.ends_with(".temperature") {
                Tensor::full(&shape, T::one())
            } else if e.name.ends_with(".bias") || e.name.ends_with(".beta") {
                Tensor::zeros(&shape)
            } else {
                let fan_in = if shape.len() > 1 { shape[1..].iter().product() } else { shape[0] };
                uniform_tensor(&shape, fan_in, rng)
            };
        }
    }
}

pub(crate) fn uniform_tensor<T: Scalar, R: Rng + ?Sized>(
    shape: &[usize],
    fan_in: usize,
    rng: &mut R,
) -> Tensor<T> {
    let bound = 1.0 / libm::sqrt(fan_in.max(1) as f64);
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    Tensor::from_fn(shape, |_| T::lit(dist.sample(rng)))
}
