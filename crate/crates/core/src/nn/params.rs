use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::tensor::{Scalar, Tensor2};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Named trainable tensors. Gradients live in a separate [`Grads`] so that
/// several items of a batch can be differentiated concurrently against the
/// same parameters.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Tensor2<T>>,
    index: HashMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor2<T>) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.values.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        id
    }

    pub fn add_normal(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        std: f64,
        rng: &mut impl Rng,
    ) -> ParamId {
        let dist = Normal::new(0.0, std).expect("valid std");
        let t = Tensor2::from_fn(rows, cols, |_, _| T::c(dist.sample(rng)));
        self.add(name, t)
    }

    pub fn get(&self, id: ParamId) -> &Tensor2<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor2<T> {
        &mut self.values[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.data().len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor2<T>)> {
        self.names.iter().map(String::as_str).zip(self.values.iter())
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut Tensor2<T>> {
        self.values.iter_mut()
    }

    /// Replace a parameter's contents by name; shape must match.
    pub fn assign(&mut self, name: &str, value: Tensor2<T>) -> Result<()> {
        let id = self
            .id(name)
            .ok_or_else(|| Error::ShapeMismatch(format!("unknown parameter {name}")))?;
        let slot = &mut self.values[id.0];
        if slot.shape() != value.shape() {
            return Err(Error::ShapeMismatch(format!(
                "parameter {name}: {:?} vs {:?}",
                slot.shape(),
                value.shape()
            )));
        }
        *slot = value;
        Ok(())
    }

    pub fn zero_grads(&self) -> Grads<T> {
        Grads {
            tensors: self
                .values
                .iter()
                .map(|v| Tensor2::zeros(v.rows(), v.cols()))
                .collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(Tensor2::cast).collect(),
            index: self.index.clone(),
        }
    }
}

/// Gradient accumulators matching a [`ParamStore`] one to one.
#[derive(Debug, Clone)]
pub struct Grads<T> {
    tensors: Vec<Tensor2<T>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, id: ParamId) -> &Tensor2<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor2<T> {
        &mut self.tensors[id.0]
    }

    pub fn tensors(&self) -> &[Tensor2<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor2<T>] {
        &mut self.tensors
    }

    pub fn add_assign(&mut self, other: &Grads<T>) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, s: T) {
        for t in &mut self.tensors {
            t.scale(s);
        }
    }

    pub fn global_norm(&self) -> T {
        self.tensors.iter().map(Tensor2::sq_norm).sum::<T>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor2::is_finite)
    }
}
