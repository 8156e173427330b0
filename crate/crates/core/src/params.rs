//! Named parameter storage and the per-step forward context.
//!
//! Layers hold [`ParamId`]s into a [`ParamStore`] instead of tensors, so one
//! set of layer structs serves both `f32` training and `f64` checking. A
//! [`Ctx`] binds a store to a tape for one forward pass and hands out one
//! `Var` per parameter.

use std::cell::RefCell;
use std::collections::HashMap;

use dsaf_tensor::{BatchStats, Gradients, Real, Tape, Tensor, Var};
use rand::Rng;

use crate::error::{DetError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Trained by the optimizer. `decay` selects weight decay.
    Learnable { decay: bool },
    /// Running statistics and other state saved with the model.
    Buffer,
}

#[derive(Clone, Debug)]
pub struct ParamEntry<T> {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor<T>,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor<T>) -> ParamId {
        let name = name.into();
        debug_assert!(
            self.entries.iter().all(|e| e.name != name),
            "duplicate parameter name {name}"
        );
        self.entries.push(ParamEntry { name, kind, value });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn learnable_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.ids()
            .filter(|&id| matches!(self.entries[id.0].kind, ParamKind::Learnable { .. }))
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    /// Number of learnable scalars.
    pub fn learnable_count(&self) -> usize {
        self.learnable_ids().map(|id| self.get(id).numel()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    kind: e.kind,
                    value: e.value.cast(),
                })
                .collect(),
        }
    }

    /// Replaces every value by the same-named tensor of `other`.
    pub fn load_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        if other.len() != self.len() {
            return Err(DetError::Checkpoint(format!(
                "expected {} tensors, found {}",
                self.len(),
                other.len()
            )));
        }
        for e in &mut self.entries {
            let Some(id) = other.find(&e.name) else {
                return Err(DetError::Checkpoint(format!("missing tensor {}", e.name)));
            };
            let src = other.get(id);
            if src.shape() != e.value.shape() {
                return Err(DetError::Checkpoint(format!(
                    "{}: shape {:?} does not match model shape {:?}",
                    e.name,
                    src.shape(),
                    e.value.shape()
                )));
            }
            e.value = src.clone();
        }
        Ok(())
    }
}

/// Registers parameters under a dotted name prefix and draws initial values.
pub struct ParamBuilder<'a, T, R> {
    store: &'a mut ParamStore<T>,
    rng: &'a mut R,
    prefix: String,
}

impl<'a, T: Real, R: Rng> ParamBuilder<'a, T, R> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut R) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
        }
    }

    /// Builder writing under `prefix.name`.
    pub fn scope(&mut self, name: impl std::fmt::Display) -> ParamBuilder<'_, T, R> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        ParamBuilder {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        self.store
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    /// Uniform in `±1/√fan_in`.
    pub fn uniform_fan_in(&mut self, name: &str, shape: Vec<usize>, fan_in: usize, decay: bool) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let value = Tensor::uniform(shape, -bound, bound, self.rng);
        let name = self.full_name(name);
        self.store.add(name, ParamKind::Learnable { decay }, value)
    }

    pub fn constant(&mut self, name: &str, shape: Vec<usize>, value: f64, decay: bool) -> ParamId {
        let name = self.full_name(name);
        self.store
            .add(name, ParamKind::Learnable { decay }, Tensor::full(shape, T::from_f64(value)))
    }

    pub fn buffer(&mut self, name: &str, shape: Vec<usize>, value: f64) -> ParamId {
        let name = self.full_name(name);
        self.store.add(name, ParamKind::Buffer, Tensor::full(shape, T::from_f64(value)))
    }
}

struct BnUpdate<T> {
    mean: ParamId,
    var: ParamId,
    stats: BatchStats<T>,
}

/// Batch statistics collected during a training pass.
pub struct BnUpdates<T>(Vec<BnUpdate<T>>);

impl<T: Real> BnUpdates<T> {
    pub fn apply(self, store: &mut ParamStore<T>, momentum: f64) {
        for u in self.0 {
            dsaf_tensor::update_running(store.get_mut(u.mean), &u.stats.mean, momentum);
            dsaf_tensor::update_running(store.get_mut(u.var), &u.stats.var, momentum);
        }
    }
}

/// One forward pass: tape, parameter bindings, train/eval mode and pending
/// running-statistic updates.
pub struct Ctx<'a, T: Real> {
    tape: Tape<T>,
    store: &'a ParamStore<T>,
    training: bool,
    vars: RefCell<HashMap<ParamId, Var<T>>>,
    bn_updates: RefCell<Vec<BnUpdate<T>>>,
}

impl<'a, T: Real> Ctx<'a, T> {
    pub fn new(tape: Tape<T>, store: &'a ParamStore<T>, training: bool) -> Self {
        Self {
            tape,
            store,
            training,
            vars: RefCell::new(HashMap::new()),
            bn_updates: RefCell::new(Vec::new()),
        }
    }

    /// Inference context without gradient recording.
    pub fn eval(store: &'a ParamStore<T>) -> Self {
        Self::new(Tape::no_grad(), store, false)
    }

    pub fn tape(&self) -> &Tape<T> {
        &self.tape
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    pub fn training(&self) -> bool {
        self.training
    }

    /// Makes `param(id)` return `var` instead of a fresh leaf.
    pub fn bind(&self, id: ParamId, var: Var<T>) {
        self.vars.borrow_mut().insert(id, var);
    }

    /// The tape value of a learnable parameter (a leaf when recording).
    pub fn param(&self, id: ParamId) -> Var<T> {
        if let Some(v) = self.vars.borrow().get(&id) {
            return v.clone();
        }
        let value = self.store.get(id).clone();
        let var = if self.tape.grad_enabled() {
            self.tape.leaf(value)
        } else {
            self.tape.constant(value)
        };
        self.vars.borrow_mut().insert(id, var.clone());
        var
    }

    pub fn buffer(&self, id: ParamId) -> &Tensor<T> {
        self.store.get(id)
    }

    pub(crate) fn push_bn_update(&self, mean: ParamId, var: ParamId, stats: BatchStats<T>) {
        self.bn_updates.borrow_mut().push(BnUpdate { mean, var, stats });
    }

    /// Gradient of every learnable parameter touched by the pass. Fails on a
    /// learnable parameter that never reached the loss.
    pub fn param_grads(&self, grads: &Gradients<T>) -> Result<Vec<(ParamId, Tensor<T>)>> {
        let vars = self.vars.borrow();
        let mut out = Vec::with_capacity(vars.len());
        for id in self.store.learnable_ids() {
            let Some(var) = vars.get(&id) else {
                return Err(DetError::DeadParameter(self.store.entry(id).name.clone()));
            };
            let Some(g) = grads.get(var) else {
                return Err(DetError::DeadParameter(self.store.entry(id).name.clone()));
            };
            out.push((id, g.clone()));
        }
        Ok(out)
    }

    /// Folds the batch statistics of this pass into the running averages.
    pub fn apply_bn_updates(&self, store: &mut ParamStore<T>, momentum: f64) {
        self.take_bn_updates().apply(store, momentum);
    }

    /// Detaches the pending running-statistic updates so they can be applied
    /// after the context, and its borrow of the store, is gone.
    pub fn take_bn_updates(&self) -> BnUpdates<T> {
        BnUpdates(std::mem::take(&mut *self.bn_updates.borrow_mut()))
    }
}
