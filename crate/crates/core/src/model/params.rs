//! Named parameter storage and per-forward binding onto a graph.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Which part of the network a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Backbone,
    Adapter,
    Head,
}

impl ParamGroup {
    pub fn as_u8(self) -> u8 {
        match self {
            ParamGroup::Backbone => 0,
            ParamGroup::Adapter => 1,
            ParamGroup::Head => 2,
        }
    }

    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(ParamGroup::Backbone),
            1 => Some(ParamGroup::Adapter),
            2 => Some(ParamGroup::Head),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Normal with the given std, resampled outside two standard deviations.
    TruncNormal(f64),
    /// Depthwise kernels with a single 1 at the centre.
    Delta,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
    pub group: ParamGroup,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: impl Into<Vec<usize>>, init: Init, group: ParamGroup) -> Self {
        ParamSpec {
            name: name.into(),
            shape: shape.into(),
            init,
            group,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn materialize<R: Rng + ?Sized>(&self, rng: &mut R) -> Tensor {
        match self.init {
            Init::Zeros => Tensor::zeros(self.shape.clone()),
            Init::Ones => Tensor::ones(self.shape.clone()),
            Init::TruncNormal(std) => {
                let normal = Normal::new(0.0, std).expect("std is positive");
                Tensor::from_fn(self.shape.clone(), |_| loop {
                    let v: f64 = normal.sample(rng);
                    if v.abs() <= 2.0 * std {
                        break v;
                    }
                })
            }
            Init::Delta => {
                let mut t = Tensor::zeros(self.shape.clone());
                let (k1, k2) = (self.shape[1], self.shape[2]);
                let centre = (k1 / 2) * k2 + k2 / 2;
                for c in 0..self.shape[0] {
                    t.data_mut()[c * k1 * k2 + centre] = 1.0;
                }
                t
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub trainable: bool,
    pub group: ParamGroup,
}

/// Parameters keyed by dotted path, iterated in name order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Materialise `specs` in order from a single random stream.
    pub fn from_specs<R: Rng + ?Sized>(specs: &[ParamSpec], rng: &mut R) -> Self {
        let mut store = ParamStore::new();
        store.extend_from_specs(specs, rng);
        store
    }

    pub fn extend_from_specs<R: Rng + ?Sized>(&mut self, specs: &[ParamSpec], rng: &mut R) {
        for spec in specs {
            let value = spec.materialize(rng);
            self.insert(spec.name.clone(), value, spec.group);
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, group: ParamGroup) {
        self.entries.insert(
            name.into(),
            Param {
                value,
                trainable: true,
                group,
            },
        );
    }

    pub fn insert_param(&mut self, name: impl Into<String>, param: Param) {
        self.entries.insert(name.into(), param);
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.entries.get_mut(name)
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param)> {
        self.entries.iter_mut()
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

    pub fn numel(&self) -> usize {
        self.entries.values().map(|p| p.value.len()).sum()
    }

    pub fn trainable_numel(&self) -> usize {
        self.entries
            .values()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }

    pub fn has_group(&self, group: ParamGroup) -> bool {
        self.entries.values().any(|p| p.group == group)
    }

    /// Mark exactly the parameters of the listed groups as trainable.
    pub fn set_trainable_groups(&mut self, groups: &[ParamGroup]) {
        for p in self.entries.values_mut() {
            p.trainable = groups.contains(&p.group);
        }
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        for p in self.entries.values_mut() {
            p.trainable = trainable;
        }
    }
}

/// A graph plus the parameters bound onto it for one forward pass.
///
/// Each parameter is placed on the tape the first time it is requested:
/// trainable ones as gradient leaves, frozen ones as constants. Callers may
/// pre-bind names to existing nodes, which is how gradient checks route
/// perturbed values through the model code.
pub struct Session<'a> {
    pub graph: &'a mut Graph,
    store: &'a ParamStore,
    bound: BTreeMap<String, Var>,
}

impl<'a> Session<'a> {
    pub fn new(graph: &'a mut Graph, store: &'a ParamStore) -> Self {
        Session {
            graph,
            store,
            bound: BTreeMap::new(),
        }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn bind(&mut self, name: impl Into<String>, var: Var) {
        self.bound.insert(name.into(), var);
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let p = self
            .store
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))?;
        let v = self.graph.input(p.value.clone(), p.trainable);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn has_param(&self, name: &str) -> bool {
        self.bound.contains_key(name) || self.store.contains(name)
    }

    /// Run the reverse sweep and collect gradients of trainable parameters
    /// that took part in the forward pass.
    pub fn backward(&mut self, loss: Var) -> Result<BTreeMap<String, Tensor>> {
        let mut grads = self.graph.backward(loss)?;
        let mut out = BTreeMap::new();
        for (name, &var) in &self.bound {
            let trainable = self.store.get(name).map_or(false, |p| p.trainable);
            if trainable {
                if let Some(g) = grads.take(var) {
                    out.insert(name.clone(), g);
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn trunc_normal_stays_in_two_sigma() {
        let spec = ParamSpec::new("w", [64, 64], Init::TruncNormal(0.02), ParamGroup::Backbone);
        let t = spec.materialize(&mut ChaCha8Rng::seed_from_u64(1));
        assert!(t.data().iter().all(|v| v.abs() <= 0.04));
        let mean = t.data().iter().sum::<f64>() / t.len() as f64;
        assert!(mean.abs() < 2e-3);
    }

    #[test]
    fn delta_kernel_centre() {
        let spec = ParamSpec::new("k", [2, 3, 3], Init::Delta, ParamGroup::Adapter);
        let t = spec.materialize(&mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(t.at(&[1, 1, 1]), 1.0);
        assert_eq!(t.data().iter().sum::<f64>(), 2.0);
    }

    #[test]
    fn frozen_params_bind_as_constants() {
        let mut store = ParamStore::new();
        store.insert("a", Tensor::ones([2]), ParamGroup::Backbone);
        store.insert("b", Tensor::ones([2]), ParamGroup::Adapter);
        store.set_trainable_groups(&[ParamGroup::Adapter]);
        let mut g = Graph::new();
        let mut s = Session::new(&mut g, &store);
        let a = s.param("a").unwrap();
        let b = s.param("b").unwrap();
        let ab = s.graph.mul(a, b).unwrap();
        let loss = s.graph.sum(ab);
        let grads = s.backward(loss).unwrap();
        assert_eq!(grads.keys().collect::<Vec<_>>(), vec!["b"]);
        assert!(s.param("missing").is_err());
    }
}
