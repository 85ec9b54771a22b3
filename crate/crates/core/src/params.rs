//! Named parameter storage and the per-pass [`Session`] that binds
//! parameters onto a fresh [`Graph`].

use std::collections::HashMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

use crate::error::{Error, Result};
use crate::format::Container;
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, uniquely named collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        self.index.insert(name.clone(), self.values.len());
        self.names.push(name);
        self.values.push(value);
        Ok(ParamId(self.values.len() - 1))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    pub fn to_container(&self, meta: Value) -> Container {
        let mut c = Container::new("checkpoint", meta);
        for (_, name, value) in self.iter() {
            c.push(name, value.clone());
        }
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        c.expect_kind("checkpoint")?;
        let mut store = Self::new();
        for s in &c.sections {
            store
                .insert(s.name.clone(), s.tensor.clone())
                .map_err(|e| Error::Load(e.to_string()))?;
        }
        Ok(store)
    }
}

/// Parameter initializer drawing from a seeded stream.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Uniform in `±1/sqrt(fan_in)`.
    pub fn fan_in(&mut self, shape: &[usize], fan_in: usize) -> Tensor {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        self.uniform(shape, bound)
    }

    pub fn uniform(&mut self, shape: &[usize], bound: f64) -> Tensor {
        let mut t = Tensor::zeros(shape.to_vec());
        for v in t.data_mut() {
            *v = self.rng.random_range(-bound..=bound);
        }
        t
    }

    pub fn normal(&mut self, shape: &[usize], std: f64) -> Tensor {
        let mut t = Tensor::zeros(shape.to_vec());
        for v in t.data_mut() {
            let n: f64 = self.rng.sample(rand_distr::StandardNormal);
            *v = n * std;
        }
        t
    }
}

/// One forward (and optionally backward) pass over a parameter store.
///
/// Each parameter is bound to at most one graph leaf, so a parameter used in
/// several places accumulates its gradient on that single leaf.
pub struct Session<'p> {
    pub graph: Graph,
    params: &'p ParamStore,
    bound: Vec<Option<Var>>,
    training: bool,
    rng: ChaCha8Rng,
}

impl<'p> Session<'p> {
    /// `training` enables dropout, drawn from a stream seeded by `seed`.
    pub fn new(params: &'p ParamStore, training: bool, seed: u64) -> Self {
        Self {
            graph: Graph::new(),
            params,
            bound: vec![None; params.len()],
            training,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn inference(params: &'p ParamStore) -> Self {
        Self::new(params, false, 0)
    }

    pub fn training(&self) -> bool {
        self.training
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.graph.leaf(self.params.get(id).clone());
        self.bound[id.0] = Some(v);
        v
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.graph.constant(t)
    }

    /// Inverted dropout; identity outside training.
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        if !self.training || p <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let shape = self.graph.shape(x).to_vec();
        let mut mask = Tensor::zeros(shape);
        for m in mask.data_mut() {
            *m = if self.rng.random::<f64>() < p { 0.0 } else { keep };
        }
        let m = self.graph.constant(mask);
        self.graph.mul(x, m)
    }

    /// Gradient for every parameter (zeros for unused ones) after `backward`.
    pub fn param_grads(&self) -> Vec<Vec<f64>> {
        self.params
            .ids()
            .map(|id| match self.bound[id.0].and_then(|v| self.graph.grad(v)) {
                Some(g) => g.to_vec(),
                None => vec![0.0; self.params.get(id).numel()],
            })
            .collect()
    }
}
