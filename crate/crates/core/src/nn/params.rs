use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameter tensors in creation order.
///
/// Creation order is part of the model definition: the optimizer state, the
/// checkpoint layout and the gradient-check sampling all key off it.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Params {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor. Panics on a duplicate name, since that is a
    /// model-construction bug rather than a runtime condition.
    pub fn push(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter {name}"
        );
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Sets every parameter value to `v`.
    pub fn fill(&mut self, v: f64) {
        for t in &mut self.tensors {
            t.data_mut().iter_mut().for_each(|x| *x = v);
        }
    }

    /// Places every parameter on `g`. Trainable bindings accumulate gradient.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect();
        Bound(vars)
    }
}

/// The graph handles of a [`Params`] set, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    /// Wraps handles that were placed on a graph in [`Params`] order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self(vars)
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

/// Deterministic parameter initializer.
///
/// Weights are uniform in `±sqrt(1/fan_in)`; biases start at zero.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn uniform(&mut self, shape: &[usize], fan_in: usize) -> Tensor {
        let bound = (1.0 / fan_in as f64).sqrt();
        Tensor::from_fn(shape.to_vec(), |_| self.rng.random_range(-bound..bound))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_values() {
        let a = Init::new(3).uniform(&[4, 5], 5);
        let b = Init::new(3).uniform(&[4, 5], 5);
        assert_eq!(a, b);
        let c = Init::new(4).uniform(&[4, 5], 5);
        assert_ne!(a, c);
    }

    #[test]
    fn uniform_respects_bound_and_centers() {
        let t = Init::new(11).uniform(&[16, 16], 16);
        let bound = 0.25;
        assert!(t.data().iter().all(|v| v.abs() <= bound));
        // U(-a, a) has sigma a/sqrt(3)
        let n = t.len() as f64;
        let mean = t.data().iter().sum::<f64>() / n;
        let sigma = bound / 3f64.sqrt();
        assert!(mean.abs() < 3.0 * sigma / n.sqrt(), "mean {mean}");
    }

    #[test]
    #[should_panic(expected = "duplicate parameter")]
    fn duplicate_names_panic() {
        let mut p = Params::new();
        p.push("w", Tensor::zeros([1]));
        p.push("w", Tensor::zeros([1]));
    }

    #[test]
    fn bind_respects_trainable_flag() {
        let mut p = Params::new();
        let id = p.push("w", Tensor::ones([2]));
        let mut g = Graph::new();
        let b = p.bind(&mut g, false);
        assert!(!g.requires_grad(b.var(id)));
        let b = p.bind(&mut g, true);
        assert!(g.requires_grad(b.var(id)));
        assert_eq!(p.find("w"), Some(id));
        assert_eq!(p.numel(), 2);
    }
}
