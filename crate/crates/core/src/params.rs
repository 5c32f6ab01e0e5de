//! Named parameter storage shared by every model component.

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{relative_error, Graph, Result, Tensor, TensorError, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
struct Param {
    name: String,
    value: Arc<Tensor>,
}

/// Ordered set of named, learnable tensors.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.params.push(Param {
            name,
            value: Arc::new(value),
        });
        ParamId(self.params.len() - 1)
    }

    /// Uniform Glorot initialisation for a `fan_in × fan_out` matrix.
    pub fn add_glorot<R: Rng>(
        &mut self,
        name: impl Into<String>,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> ParamId {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| rng.gen_range(-limit..limit))
            .collect();
        self.add(
            name,
            Tensor::new(&[fan_in, fan_out], data).expect("positive dims"),
        )
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn add_normal<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        std: f64,
        rng: &mut R,
    ) -> ParamId {
        let dist = Normal::new(0.0, std).expect("finite std");
        let n = shape.iter().product();
        let data = (0..n).map(|_| dist.sample(rng)).collect();
        self.add(name, Tensor::new(shape, data).expect("positive dims"))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn shared(&self, id: ParamId) -> Arc<Tensor> {
        Arc::clone(&self.params[id.0].value)
    }

    /// Mutable access; clones the tensor if a graph still holds it.
    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        Arc::make_mut(&mut self.params[id.0].value)
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) {
        self.params[id.0].value = Arc::new(value);
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.is_finite())
    }
}

/// Gradient buffers aligned with a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn new(store: &ParamStore) -> Self {
        Self {
            grads: vec![None; store.len()],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    pub fn add(&mut self, id: ParamId, g: &Tensor) {
        match &mut self.grads[id.0] {
            Some(acc) => acc
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(g.clone()),
        }
    }

    pub fn merge(&mut self, other: &Gradients) {
        for (k, g) in other.grads.iter().enumerate() {
            if let Some(g) = g {
                self.add(ParamId(k), g);
            }
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(k, g)| g.as_ref().map(|g| (ParamId(k), g)))
    }
}

/// A computation graph bound lazily to a parameter store.
pub struct Ctx<'p> {
    pub g: Graph,
    store: &'p ParamStore,
    bound: Vec<Option<Var>>,
}

impl<'p> Ctx<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Self {
            g: Graph::new(),
            store,
            bound: vec![None; store.len()],
        }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    /// The graph leaf for a parameter, created on first use.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.g.leaf_shared(self.store.shared(id));
        self.bound[id.0] = Some(v);
        v
    }

    /// Gradients of every parameter that took part in the last backward.
    pub fn gradients(&self) -> Gradients {
        let mut out = Gradients::new(self.store);
        for (k, v) in self.bound.iter().enumerate() {
            if let Some(g) = v.and_then(|v| self.g.grad(v)) {
                out.add(ParamId(k), g);
            }
        }
        out
    }
}

/// Central-difference check of every parameter element in `ids` for a
/// scalar program built through [`Ctx`].
pub fn check_params<F>(store: &mut ParamStore, ids: &[ParamId], step: f64, mut f: F) -> Result<f64>
where
    F: FnMut(&mut Ctx) -> Result<Var>,
{
    let mut eval = |store: &ParamStore, grad: bool| -> Result<(f64, Gradients)> {
        let mut ctx = Ctx::new(store);
        let out = f(&mut ctx)?;
        if let Some(e) = ctx.g.first_non_finite() {
            return Err(e);
        }
        if ctx.g.value(out).numel() != 1 {
            return Err(TensorError::Contract("check needs a scalar program".into()));
        }
        let v = ctx.g.value(out).item();
        if grad {
            ctx.g.backward(out)?;
        }
        Ok((v, ctx.gradients()))
    };
    let (_, analytic) = eval(store, true)?;
    let mut worst: f64 = 0.0;
    for &id in ids {
        for e in 0..store.get(id).numel() {
            let orig = store.get(id).data()[e];
            store.get_mut(id).data_mut()[e] = orig + step;
            let plus = eval(store, false)?.0;
            store.get_mut(id).data_mut()[e] = orig - step;
            let minus = eval(store, false)?.0;
            store.get_mut(id).data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic.get(id).map_or(0.0, |t| t.data()[e]);
            worst = worst.max(relative_error(a, numeric));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn glorot_bounds_and_determinism() {
        let mut a = ParamStore::new();
        let mut b = ParamStore::new();
        let ia = a.add_glorot("w", 10, 6, &mut ChaCha8Rng::seed_from_u64(3));
        let ib = b.add_glorot("w", 10, 6, &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(a.get(ia), b.get(ib));
        let limit = (6.0f64 / 16.0).sqrt();
        assert!(a.get(ia).data().iter().all(|v| v.abs() < limit));
    }

    #[test]
    fn ctx_binds_each_param_once() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::scalar(2.0));
        let mut ctx = Ctx::new(&store);
        let v1 = ctx.param(w);
        let v2 = ctx.param(w);
        assert_eq!(v1, v2);
        let p = ctx.g.mul(v1, v2).unwrap();
        ctx.g.backward(p).unwrap();
        assert_eq!(ctx.gradients().get(w).unwrap().item(), 4.0);
    }

    #[test]
    fn get_mut_after_graph_drop_does_not_copy() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::zeros(&[2, 2]));
        {
            let mut ctx = Ctx::new(&store);
            ctx.param(w);
        }
        store.get_mut(w).data_mut()[0] = 1.0;
        assert_eq!(store.get(w).data()[0], 1.0);
    }
}
