//! Reverse-mode automatic differentiation over the tensor kernels.
//!
//! A [`Session`] binds a [`ParamStore`] to a fresh [`Tape`] for one forward
//! pass (define-by-run). Parameters enter the tape lazily as leaves the first
//! time a layer reads them, batch-norm layers pick batch or running
//! statistics according to the session [`Mode`], and [`Session::backward`]
//! accumulates parameter gradients back into the store.

mod gradcheck;
mod optim;
mod tape;

use std::collections::BTreeMap;

pub use gradcheck::{grad_check, grad_check_in, relative_error, GradCheckReport};
pub use optim::{Optimizer, OptimizerKind, Schedule};
pub use tape::{inject_backward_fault, Gradients, OpKind, Tape, Var};

use crate::error::{Error, Result};
use crate::kernels::{update_running, BatchNormState, BnMode, BN_EPS, BN_MOMENTUM};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StatsId(usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    /// Dotted path, e.g. `stage2.block1.fusion.mscam.local.pw1.kernel`.
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub trainable: bool,
    /// Whether weight decay applies (false for BN affine terms and biases).
    pub decay: bool,
}

/// Running statistics of one batch-norm layer. Not trainable.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub name: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
    stats: Vec<RunningStats>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, decay: bool) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter {
            name,
            value,
            grad,
            trainable: true,
            decay,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn add_stats(&mut self, name: impl Into<String>, channels: usize) -> StatsId {
        self.stats.push(RunningStats {
            name: name.into(),
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
        });
        StatsId(self.stats.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn stats(&self, id: StatsId) -> &RunningStats {
        &self.stats[id.0]
    }

    pub fn stats_mut(&mut self, id: StatsId) -> &mut RunningStats {
        &mut self.stats[id.0]
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn all_stats(&self) -> &[RunningStats] {
        &self.stats
    }

    pub fn all_stats_mut(&mut self) -> &mut [RunningStats] {
        &mut self.stats
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = Tensor::zeros(p.value.shape());
        }
    }

    /// Number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.numel()).sum()
    }

    /// Trainable scalars whose name starts with `prefix`.
    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable && p.name.starts_with(prefix))
            .map(|p| p.value.numel())
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in batch norm; running statistics are updated.
    Train,
    /// Running statistics in batch norm.
    Eval,
}

/// One forward pass: a tape bound to a parameter store.
pub struct Session<'s> {
    pub tape: Tape,
    store: &'s mut ParamStore,
    mode: Mode,
    bound: BTreeMap<ParamId, Var>,
}

impl<'s> Session<'s> {
    pub fn new(store: &'s mut ParamStore, mode: Mode) -> Self {
        Session {
            tape: Tape::new(),
            store,
            mode,
            bound: BTreeMap::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    /// Leaf for a parameter, created on first use.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let value = self.store.get(id).value.clone();
        let v = self.tape.leaf(value);
        self.bound.insert(id, v);
        v
    }

    /// Parameter bound to `var`, if any.
    pub fn param_of(&self, var: Var) -> Option<ParamId> {
        self.bound.iter().find(|(_, &v)| v == var).map(|(&id, _)| id)
    }

    pub fn bound_params(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.bound.iter().map(|(&p, &v)| (p, v))
    }

    /// Non-differentiable input.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.tape.constant(t)
    }

    /// Differentiable input (for gradient checks w.r.t. data).
    pub fn input_grad(&mut self, t: Tensor) -> Var {
        self.tape.leaf(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.tape.value(v)
    }

    pub fn batch_norm(&mut self, x: Var, gamma: ParamId, beta: ParamId, stats: StatsId) -> Result<Var> {
        let (g, b) = (self.param(gamma), self.param(beta));
        match self.mode {
            Mode::Train => {
                let eps = self.store.stats(stats).eps;
                let (out, mean, var) = self.tape.batch_norm_train(x, g, b, eps)?;
                let s = self.tape.shape(x);
                let rs = self.store.stats_mut(stats);
                let mut st = BatchNormState {
                    gamma: vec![],
                    beta: vec![],
                    running_mean: std::mem::take(&mut rs.mean),
                    running_var: std::mem::take(&mut rs.var),
                    eps: rs.eps,
                    momentum: rs.momentum,
                    mode: BnMode::Train,
                };
                update_running(&mut st, &mean, &var, s.n * s.spatial());
                rs.mean = st.running_mean;
                rs.var = st.running_var;
                Ok(out)
            }
            Mode::Eval => {
                let rs = self.store.stats(stats);
                let (mean, var, eps) = (rs.mean.clone(), rs.var.clone(), rs.eps);
                self.tape.batch_norm_eval(x, g, b, &mean, &var, eps)
            }
        }
    }

    /// Reverse sweep; parameter gradients are added into the store.
    pub fn backward(&mut self, output: Var, seed: &Tensor) -> Result<Gradients> {
        let grads = self.tape.backward(output, seed)?;
        for (&id, &v) in &self.bound {
            if let Some(g) = grads.get(v) {
                let p = self.store.get_mut(id);
                if p.grad.shape() != g.shape() {
                    return Err(Error::dim(p.name.clone(), format!("gradient {} for value {}", g.shape(), p.grad.shape())));
                }
                p.grad.add_assign(g);
            }
        }
        Ok(grads)
    }

    pub fn backward_scalar(&mut self, loss: Var) -> Result<Gradients> {
        self.backward(loss, &Tensor::ones(crate::tensor::Shape::new(1, 1, 1, 1)))
    }
}
