//! Named parameter storage and per-tape binding.

use std::cell::RefCell;

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::graph::{Gradients, Tape, Var};
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
pub struct Param<S> {
    pub name: String,
    pub value: Tensor<S>,
}

/// Ordered collection of named parameter tensors.
///
/// Names are dotted paths (`sr.group0.block0.attn.wq`); the first segment is
/// the parameter group used for freezing and checkpoint sections.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<S> {
    params: Vec<Param<S>>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<S>) -> ParamId {
        let name = name.into();
        assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.params.push(Param { name, value });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<S> {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.params[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<S>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Total scalar count over parameters whose name starts with `prefix`.
    pub fn count_with_prefix(&self, prefix: &str) -> usize {
        self.params.iter().filter(|p| p.name.starts_with(prefix)).map(|p| p.value.len()).sum()
    }

    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn group_of(&self, id: ParamId) -> &str {
        let name = &self.params[id.0].name;
        name.split('.').next().unwrap_or(name)
    }

    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        ParamStore {
            params: self.params.iter().map(|p| Param { name: p.name.clone(), value: p.value.cast() }).collect(),
        }
    }
}

/// Builds parameters under a name prefix with framework-default
/// initialisation (uniform in `±1/sqrt(fan_in)`).
pub struct ParamBuilder<'a, S: Scalar, R: Rng> {
    store: &'a mut ParamStore<S>,
    rng: &'a mut R,
    prefix: String,
}

impl<'a, S: Scalar, R: Rng> ParamBuilder<'a, S, R> {
    pub fn new(store: &'a mut ParamStore<S>, rng: &'a mut R, prefix: &str) -> Self {
        Self { store, rng, prefix: prefix.to_string() }
    }

    pub fn sub<'b>(&'b mut self, name: &str) -> ParamBuilder<'b, S, R> {
        let prefix = if self.prefix.is_empty() { name.to_string() } else { format!("{}.{name}", self.prefix) };
        ParamBuilder { store: self.store, rng: self.rng, prefix }
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], fan_in: usize) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let dist = Uniform::new(-bound, bound);
        let t = Tensor::from_fn(shape, |_| lit(dist.sample(self.rng)));
        let full = self.full_name(name);
        self.store.add(full, t)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> ParamId {
        let full = self.full_name(name);
        self.store.add(full, Tensor::full(shape, lit(value)))
    }
}

/// Binds a [`ParamStore`] to a [`Tape`]: each parameter becomes one leaf (or a
/// constant when its group is frozen), created lazily on first use.
pub struct Ctx<'t, S: Scalar> {
    tape: &'t Tape<S>,
    store: &'t ParamStore<S>,
    bound: RefCell<Vec<Option<Var<'t, S>>>>,
    frozen: Vec<String>,
    grad_enabled: bool,
}

impl<'t, S: Scalar> Ctx<'t, S> {
    /// All parameters receive gradients.
    pub fn train(tape: &'t Tape<S>, store: &'t ParamStore<S>) -> Self {
        Self { tape, store, bound: RefCell::new(vec![None; store.len()]), frozen: Vec::new(), grad_enabled: true }
    }

    /// No parameter receives gradients.
    pub fn eval(tape: &'t Tape<S>, store: &'t ParamStore<S>) -> Self {
        Self { grad_enabled: false, ..Self::train(tape, store) }
    }

    /// Treat every parameter of the named groups as a constant.
    pub fn freeze_group(mut self, group: &str) -> Self {
        self.frozen.push(group.to_string());
        self
    }

    pub fn tape(&self) -> &'t Tape<S> {
        self.tape
    }

    pub fn store(&self) -> &'t ParamStore<S> {
        self.store
    }

    pub fn param(&self, id: ParamId) -> Var<'t, S> {
        if let Some(v) = self.bound.borrow()[id.0] {
            return v;
        }
        let value = self.store.get(id).clone();
        let trainable = self.grad_enabled && !self.frozen.iter().any(|g| g == self.store.group_of(id));
        let v = if trainable { self.tape.leaf(value) } else { self.tape.constant(value) };
        self.bound.borrow_mut()[id.0] = Some(v);
        v
    }

    pub fn constant(&self, t: Tensor<S>) -> Var<'t, S> {
        self.tape.constant(t)
    }

    /// Gradients of every bound, trainable parameter.
    pub fn param_grads(&self, mut grads: Gradients<S>) -> Vec<(ParamId, Tensor<S>)> {
        self.bound
            .borrow()
            .iter()
            .enumerate()
            .filter_map(|(i, v)| {
                let v = (*v)?;
                grads.take_id(v.id()).map(|g| (ParamId(i), g))
            })
            .collect()
    }
}
