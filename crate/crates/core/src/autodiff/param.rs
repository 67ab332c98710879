use serde::{Deserialize, Serialize};

use super::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// A trainable tensor with its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        Parameter {
            name: name.into(),
            value,
            grad,
        }
    }
}

/// Owns every parameter of a model in registration order.
///
/// Registration order is the canonical order for flattening, checkpoints
/// and the all-reduce gradient vector.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.params.push(Parameter::new(name, value));
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Total number of scalar values across all parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    /// Adds `grads` into every parameter's `grad` (`+=`).
    pub fn accumulate(&mut self, grads: &Gradients) {
        for (p, g) in self.params.iter_mut().zip(&grads.params) {
            if let Some(g) = g {
                p.grad.add_assign(g);
            }
        }
    }

    pub fn flat_values(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_scalars());
        for p in &self.params {
            out.extend_from_slice(p.value.data());
        }
        out
    }

    pub fn flat_grads(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_scalars());
        for p in &self.params {
            out.extend_from_slice(p.grad.data());
        }
        out
    }

    pub fn set_flat_grads(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.num_scalars());
        let mut off = 0;
        for p in &mut self.params {
            let n = p.grad.len();
            p.grad.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
    }
}

/// Gradients produced by one reverse pass, aligned with a [`ParamStore`].
///
/// Parameters that did not take part in the computation hold `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub(crate) params: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn empty(n_params: usize) -> Self {
        Gradients {
            params: vec![None; n_params],
        }
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(id.0).and_then(|g| g.as_ref())
    }

    pub(crate) fn add_param(&mut self, id: ParamId, g: &Tensor) {
        match &mut self.params[id.0] {
            Some(acc) => acc.add_assign(g),
            slot @ None => *slot = Some(g.clone()),
        }
    }

    /// `self += other`, parameter by parameter in registration order.
    pub fn merge(&mut self, other: &Gradients) {
        for (i, g) in other.params.iter().enumerate() {
            if let Some(g) = g {
                self.add_param(ParamId(i), g);
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        for g in self.params.iter_mut().flatten() {
            g.scale_in_place(c);
        }
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = Option<&Tensor>> {
        self.params.iter().map(Option::as_ref)
    }

    /// Euclidean norm over every present entry, summed in registration order.
    pub fn norm(&self) -> f64 {
        self.params
            .iter()
            .flatten()
            .flat_map(|g| g.data())
            .fold(0.0, |acc, x| acc + x * x)
            .sqrt()
    }

    /// Inverse of [`Gradients::flatten`]; every parameter becomes present.
    pub fn from_flat(store: &ParamStore, flat: &[f64]) -> crate::error::Result<Self> {
        if flat.len() != store.num_scalars() {
            return Err(crate::error::Error::shape("gradient vector", &[flat.len()], &[store.num_scalars()]));
        }
        let mut at = 0;
        let params = store
            .iter()
            .map(|p| {
                let n = p.value.len();
                let t = Tensor::new(p.value.shape().to_vec(), flat[at..at + n].to_vec()).expect("shape matches");
                at += n;
                Some(t)
            })
            .collect();
        Ok(Gradients { params })
    }

    /// Flattens into registration order, filling absent parameters with zeros.
    pub fn flatten(&self, store: &ParamStore) -> Vec<f64> {
        let mut out = Vec::with_capacity(store.num_scalars());
        for (p, g) in store.iter().zip(&self.params) {
            match g {
                Some(g) => out.extend_from_slice(g.data()),
                None => out.extend(std::iter::repeat_n(0.0, p.value.len())),
            }
        }
        out
    }
}
