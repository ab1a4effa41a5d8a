use std::collections::HashMap;

use crate::autodiff::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a registered parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Named learnable parameters with gradient buffers.
///
/// Registration order is the canonical iteration order everywhere (reports,
/// checkpoints, optimizer), so runs are reproducible regardless of hash-map
/// seeding. Each name registers exactly once.
#[derive(Clone, Debug)]
pub struct ParamStore<S> {
    names: Vec<String>,
    values: Vec<Tensor<S>>,
    grads: Vec<Tensor<S>>,
    by_name: HashMap<String, usize>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            grads: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn register(&mut self, name: &str, value: Tensor<S>) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(Error::Contract(format!("parameter '{name}' registered twice")));
        }
        let id = self.names.len();
        self.by_name.insert(name.to_string(), id);
        self.names.push(name.to_string());
        self.grads.push(Tensor::zeros(value.rows(), value.cols()));
        self.values.push(value);
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<S> {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &Tensor<S> {
        &self.grads[id.0]
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.grads[id.0]
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            for v in g.data_mut() {
                *v = S::zero();
            }
        }
    }

    /// Iterate `(id, name, value)` in registration order.
    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<S>)> {
        self.names
            .iter()
            .enumerate()
            .map(|(i, n)| (ParamId(i), n.as_str(), &self.values[i]))
    }

    pub fn total_scalars(&self) -> usize {
        self.values.iter().map(|v| v.numel()).sum()
    }
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_registration_rejected() {
        let mut s: ParamStore<f64> = ParamStore::new();
        s.register("a/w", Tensor::zeros(2, 2)).unwrap();
        assert!(s.register("a/w", Tensor::zeros(2, 2)).is_err());
    }

    #[test]
    fn iteration_follows_registration_order() {
        let mut s: ParamStore<f64> = ParamStore::new();
        s.register("z", Tensor::zeros(1, 1)).unwrap();
        s.register("a", Tensor::zeros(1, 1)).unwrap();
        let order: Vec<&str> = s.iter().map(|(_, n, _)| n).collect();
        assert_eq!(order, vec!["z", "a"]);
    }
}
