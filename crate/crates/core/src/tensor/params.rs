use std::collections::HashMap;

use super::{Graph, Real, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    /// Frozen parameters never enter the tape as gradient leaves and are
    /// skipped by the optimizer.
    pub frozen: bool,
}

/// Named, ordered collection of model parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>, frozen: bool) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter name `{name}`")));
        }
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Param {
            name,
            value,
            frozen,
        });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Param<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Param<T>)> {
        self.params.iter_mut().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    frozen: p.frozen,
                })
                .collect(),
            index: self.index.clone(),
        }
    }
}

/// Per-parameter gradients aligned with a [`ParamStore`]; `None` means the
/// parameter was not reachable from the loss.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn empty(len: usize) -> Self {
        Self {
            grads: vec![None; len],
        }
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.grads[id.0].as_ref()
    }

    pub fn set(&mut self, id: ParamId, grad: Tensor<T>) {
        self.grads[id.0] = Some(grad);
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, Option<&Tensor<T>>)> {
        self.grads.iter().enumerate().map(|(i, g)| (ParamId(i), g.as_ref()))
    }

    /// Euclidean norm over every present gradient.
    pub fn global_norm(&self) -> f64 {
        let mut acc = 0.0;
        for g in self.grads.iter().flatten() {
            for &v in g.data() {
                let v = v.to_f64_lossy();
                acc += v * v;
            }
        }
        acc.sqrt()
    }

    /// Name of the first parameter whose gradient has a non-finite entry.
    pub fn first_non_finite<'a>(&self, store: &'a ParamStore<T>) -> Option<&'a str> {
        self.iter()
            .find(|(_, g)| g.is_some_and(|g| !g.is_finite()))
            .map(|(id, _)| store.get(id).name.as_str())
    }
}

/// Lazily binds parameters to leaves of one [`Graph`].
pub struct Binder<'a, T> {
    store: &'a ParamStore<T>,
    vars: Vec<Option<Var>>,
    track: bool,
}

impl<'a, T: Real> Binder<'a, T> {
    /// Binder whose trainable parameters become gradient leaves.
    pub fn new(store: &'a ParamStore<T>) -> Self {
        Self {
            store,
            vars: vec![None; store.len()],
            track: true,
        }
    }

    /// Binder for inference: every parameter enters as a constant.
    pub fn inference(store: &'a ParamStore<T>) -> Self {
        Self {
            track: false,
            ..Self::new(store)
        }
    }

    pub fn store(&self) -> &'a ParamStore<T> {
        self.store
    }

    pub fn var(&mut self, g: &mut Graph<T>, id: ParamId) -> Var {
        if let Some(v) = self.vars[id.0] {
            return v;
        }
        let p = self.store.get(id);
        let v = g.leaf(p.value.clone(), self.track && !p.frozen);
        self.vars[id.0] = Some(v);
        v
    }

    /// Gradients for every bound trainable parameter the loss reached.
    pub fn gradients(&self, g: &Graph<T>) -> Gradients<T> {
        let grads = self
            .vars
            .iter()
            .map(|v| v.filter(|&v| g.reached(v)).and_then(|v| g.grad(v).cloned()))
            .collect();
        Gradients { grads }
    }
}
