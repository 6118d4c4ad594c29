//! Named parameter storage and per-tape binding.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numeric::{Gradients, Real, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Ordered, named collection of trainable tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Arc<Tensor>>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.values.len());
        self.names.push(name);
        self.values.push(Arc::new(value));
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.values.iter().map(|t| t.len()).sum()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        if value.shape() != self.values[id.0].shape() {
            return Err(Error::Shape {
                op: "param_set",
                detail: format!(
                    "{}: {:?} vs stored {:?}",
                    self.names[id.0],
                    value.shape(),
                    self.values[id.0].shape()
                ),
            });
        }
        self.values[id.0] = Arc::new(value);
        Ok(())
    }

    pub fn tensors(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.values.iter().map(|t| &**t))
    }

    /// Records every parameter as a gradient-tracked leaf on `tape`.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        self.bind_with(tape, true)
    }

    /// Binds parameters as constants (inference).
    pub fn bind_frozen<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        self.bind_with(tape, false)
    }

    fn bind_with<'t>(&self, tape: &'t Tape, requires_grad: bool) -> Bound<'t> {
        Bound {
            tape,
            vars: self
                .values
                .iter()
                .map(|v| tape.leaf(v.clone(), requires_grad))
                .collect(),
            trace: None,
        }
    }

    /// Uses caller-provided variables (one per parameter, in store order) in
    /// place of the stored values.
    pub fn bind_vars<'t>(&self, tape: &'t Tape, vars: &[Var<'t>]) -> Result<Bound<'t>> {
        if vars.len() != self.values.len() {
            return Err(Error::Invalid(format!(
                "{} variables for {} parameters",
                vars.len(),
                self.values.len()
            )));
        }
        for ((v, t), name) in vars.iter().zip(&self.values).zip(&self.names) {
            if v.shape() != t.shape() {
                return Err(Error::Shape {
                    op: "bind_vars",
                    detail: format!("{name}: {:?} vs stored {:?}", v.shape(), t.shape()),
                });
            }
        }
        Ok(Bound {
            tape,
            vars: vars.to_vec(),
            trace: None,
        })
    }

    /// Gradients of every parameter, zeros where the loss does not depend on it.
    pub fn collect_grads(&self, bound: &Bound<'_>, grads: &Gradients) -> Vec<Tensor> {
        bound.vars.iter().map(|&v| grads.get_or_zeros(v)).collect()
    }
}

/// Parameters bound to one tape, plus an optional recorder for attention
/// distributions.
pub struct Bound<'t> {
    tape: &'t Tape,
    vars: Vec<Var<'t>>,
    trace: Option<RefCell<Vec<(String, Arc<Tensor>)>>>,
}

impl<'t> Bound<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn var(&self, id: ParamId) -> Var<'t> {
        self.vars[id.0]
    }

    /// Start recording softmax attention distributions.
    pub fn with_trace(mut self) -> Self {
        self.trace = Some(RefCell::new(Vec::new()));
        self
    }

    pub(crate) fn record(&self, name: &str, distribution: &Var<'t>) {
        if let Some(t) = &self.trace {
            t.borrow_mut().push((name.to_string(), distribution.value()));
        }
    }

    /// Recorded `(site, distribution)` pairs; the distribution tensor is
    /// shaped so that its last axis sums to one.
    pub fn take_trace(&self) -> Vec<(String, Arc<Tensor>)> {
        self.trace
            .as_ref()
            .map(|t| std::mem::take(&mut *t.borrow_mut()))
            .unwrap_or_default()
    }
}

/// Seeded initializer.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn uniform(&mut self, shape: impl Into<Vec<usize>>, bound: Real) -> Tensor {
        if bound == 0.0 {
            return Tensor::zeros(shape);
        }
        Tensor::from_fn(shape, |_| self.rng.gen_range(-bound..bound))
    }

    /// Glorot-uniform for a `fan_out x fan_in` weight.
    pub fn xavier(&mut self, shape: impl Into<Vec<usize>>, fan_in: usize, fan_out: usize) -> Tensor {
        let bound = (6.0 / (fan_in + fan_out) as Real).sqrt();
        self.uniform(shape, bound)
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}
