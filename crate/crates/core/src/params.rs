//! Named parameter storage and the per-step forward context.

use std::collections::HashMap;

use omg_tensor::{Graph, Real, Tensor, Var};
use rand::Rng;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// Trainable weight, or a buffer such as batch-norm running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Buffer,
}

/// Ordered, named parameter table. Ids are insertion indices.
#[derive(Clone, Debug)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    kinds: Vec<ParamKind>,
    trainable: Vec<bool>,
    index: HashMap<String, usize>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { names: Vec::new(), values: Vec::new(), kinds: Vec::new(), trainable: Vec::new(), index: HashMap::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, kind: ParamKind) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter name {name}");
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.values.push(value);
        self.kinds.push(kind);
        self.trainable.push(kind == ParamKind::Weight);
        ParamId(self.names.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.names.len()).map(ParamId)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn kind(&self, id: ParamId) -> ParamKind {
        self.kinds[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.trainable[id.0]
    }

    /// Freezes (or unfreezes) a weight. Buffers are never trainable.
    pub fn set_trainable(&mut self, id: ParamId, on: bool) {
        self.trainable[id.0] = on && self.kinds[id.0] == ParamKind::Weight;
    }

    pub fn freeze_all(&mut self) {
        self.trainable.iter_mut().for_each(|t| *t = false);
    }

    /// Number of scalar weights (buffers excluded).
    pub fn weight_count(&self) -> usize {
        self.ids().filter(|&id| self.kind(id) == ParamKind::Weight).map(|id| self.get(id).len()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(|t| t.cast()).collect(),
            kinds: self.kinds.clone(),
            trainable: self.trainable.clone(),
            index: self.index.clone(),
        }
    }

    /// Overwrites the value of `name`; the shape must match.
    pub fn set_by_name(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let id = self.id(name).ok_or_else(|| Error::Config(format!("unknown parameter {name}")))?;
        if self.values[id.0].shape() != value.shape() {
            return Err(Error::Config(format!(
                "parameter {name}: shape {:?} does not match stored {:?}",
                value.shape(),
                self.values[id.0].shape()
            )));
        }
        self.values[id.0] = value;
        Ok(())
    }
}

/// Builds a [`ParamStore`] with scoped names and seeded initialization.
pub struct ParamBuilder<'r, R: Rng> {
    pub store: ParamStore<f32>,
    pub rng: &'r mut R,
}

impl<'r, R: Rng> ParamBuilder<'r, R> {
    pub fn new(rng: &'r mut R) -> Self {
        ParamBuilder { store: ParamStore::new(), rng }
    }

    /// Uniform `[-b, b]` with `b = sqrt(6 / (fan_in + fan_out))`.
    pub fn xavier(&mut self, name: impl Into<String>, shape: &[usize], fan_in: usize, fan_out: usize) -> ParamId {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt() as f32;
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.gen_range(-bound..bound)).collect();
        self.store.add(name, Tensor::new(shape.to_vec(), data).unwrap(), ParamKind::Weight)
    }

    /// He-uniform for ReLU-fed convolutions.
    pub fn kaiming(&mut self, name: impl Into<String>, shape: &[usize], fan_in: usize) -> ParamId {
        let bound = (6.0 / fan_in as f64).sqrt() as f32;
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.gen_range(-bound..bound)).collect();
        self.store.add(name, Tensor::new(shape.to_vec(), data).unwrap(), ParamKind::Weight)
    }

    /// Approximately normal with the given standard deviation (sum of uniforms).
    pub fn normal(&mut self, name: impl Into<String>, shape: &[usize], std: f32) -> ParamId {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let s: f32 = (0..12).map(|_| self.rng.gen::<f32>()).sum();
                (s - 6.0) * std
            })
            .collect();
        self.store.add(name, Tensor::new(shape.to_vec(), data).unwrap(), ParamKind::Weight)
    }

    pub fn constant(&mut self, name: impl Into<String>, shape: &[usize], v: f32) -> ParamId {
        self.store.add(name, Tensor::full(shape.to_vec(), v), ParamKind::Weight)
    }

    pub fn buffer(&mut self, name: impl Into<String>, shape: &[usize], v: f32) -> ParamId {
        self.store.add(name, Tensor::full(shape.to_vec(), v), ParamKind::Buffer)
    }
}

/// Forward/backward context for one step: a fresh graph plus lazily
/// registered parameter leaves.
pub struct Ctx<'a, T: Real> {
    pub g: Graph<T>,
    store: &'a ParamStore<T>,
    leaves: Vec<Option<Var>>,
    pub train: bool,
    buffer_updates: Vec<(ParamId, Tensor<T>)>,
}

impl<'a, T: Real> Ctx<'a, T> {
    pub fn new(store: &'a ParamStore<T>, train: bool) -> Self {
        Ctx { g: Graph::new(), store, leaves: vec![None; store.len()], train, buffer_updates: Vec::new() }
    }

    /// Uses an existing graph and pre-made leaves, one per parameter in id
    /// order. Lets an outside caller own the leaves, as a gradient check does.
    pub fn with_leaves(g: Graph<T>, store: &'a ParamStore<T>, leaves: &[Var], train: bool) -> Result<Self> {
        if leaves.len() != store.len() {
            return Err(Error::Invariant(format!("{} leaves for {} parameters", leaves.len(), store.len())));
        }
        Ok(Ctx { g, store, leaves: leaves.iter().map(|&v| Some(v)).collect(), train, buffer_updates: Vec::new() })
    }

    pub fn into_graph(self) -> Graph<T> {
        self.g
    }

    pub fn store(&self) -> &'a ParamStore<T> {
        self.store
    }

    /// The graph leaf for a parameter; frozen parameters enter as constants.
    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.leaves[id.0] {
            return v;
        }
        let value = self.store.get(id).clone();
        let v = self.g.leaf(value, self.store.is_trainable(id));
        self.leaves[id.0] = Some(v);
        v
    }

    pub(crate) fn push_buffer_update(&mut self, id: ParamId, value: Tensor<T>) {
        self.buffer_updates.push((id, value));
    }

    pub fn take_buffer_updates(&mut self) -> Vec<(ParamId, Tensor<T>)> {
        std::mem::take(&mut self.buffer_updates)
    }

    /// Gradients of all trainable parameters that took part in the graph.
    pub fn param_grads(&mut self) -> Vec<(ParamId, Tensor<T>)> {
        let mut out = Vec::new();
        for (i, leaf) in self.leaves.iter().enumerate() {
            if let Some(v) = leaf {
                if let Some(g) = self.g.take_grad(*v) {
                    out.push((ParamId(i), g));
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn frozen_parameters_get_no_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut b = ParamBuilder::new(&mut rng);
        let a = b.constant("a", &[2], 1.0);
        let c = b.constant("c", &[2], 2.0);
        let mut store = b.store;
        store.set_trainable(c, false);
        let mut ctx = Ctx::new(&store, true);
        let (va, vc) = (ctx.p(a), ctx.p(c));
        let m = ctx.g.mul(va, vc).unwrap();
        let s = ctx.g.sum(m);
        ctx.g.backward(s).unwrap();
        let grads = ctx.param_grads();
        assert_eq!(grads.len(), 1);
        assert_eq!(grads[0].0, a);
        assert_eq!(grads[0].1.data(), &[2.0, 2.0]);
    }

    #[test]
    fn buffers_are_never_trainable() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut b = ParamBuilder::new(&mut rng);
        let id = b.buffer("running_mean", &[3], 0.0);
        let mut store = b.store;
        store.set_trainable(id, true);
        assert!(!store.is_trainable(id));
        assert_eq!(store.weight_count(), 0);
    }

    #[test]
    fn set_by_name_checks_shape() {
        let mut store = ParamStore::<f32>::new();
        store.add("w", Tensor::zeros(vec![2, 2]), ParamKind::Weight);
        assert!(store.set_by_name("w", Tensor::zeros(vec![4])).is_err());
        assert!(store.set_by_name("nope", Tensor::zeros(vec![2, 2])).is_err());
        store.set_by_name("w", Tensor::full(vec![2, 2], 1.0)).unwrap();
        assert_eq!(store.by_name("w").unwrap().sum(), 4.0);
    }
}
