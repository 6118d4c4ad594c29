//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] records every operation in execution order, so the node list is
//! already topologically sorted. [`Tape::backward`] walks it once in reverse.

use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Computes parent gradients from the output gradient. The second argument
/// flags which parents need a gradient; entries for the others may be `None`.
pub(crate) type BackwardFn = Box<dyn Fn(&[Real], &[bool]) -> Vec<Option<Vec<Real>>>>;

struct Node {
    value: Arc<Tensor>,
    parents: Vec<usize>,
    tracked: bool,
    backward: Option<BackwardFn>,
}

/// Operation recorder. Confined to the thread that created it.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    consumed: Cell<bool>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            consumed: Cell::new(false),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records an input. Gradients are collected only for leaves created with
    /// `requires_grad`.
    pub fn leaf(&self, value: impl Into<Arc<Tensor>>, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: value.into(),
            parents: Vec::new(),
            tracked: requires_grad,
            backward: None,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    pub fn constant(&self, value: impl Into<Arc<Tensor>>) -> Var<'_> {
        self.leaf(value, false)
    }

    pub fn param(&self, value: impl Into<Arc<Tensor>>) -> Var<'_> {
        self.leaf(value, true)
    }

    pub(crate) fn push<'t>(
        &'t self,
        op: &'static str,
        value: Tensor,
        parents: &[Var<'t>],
        backward: impl Fn(&[Real], &[bool]) -> Vec<Option<Vec<Real>>> + 'static,
    ) -> Result<Var<'t>> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op });
        }
        let mut nodes = self.nodes.borrow_mut();
        let mut parent_ids = Vec::with_capacity(parents.len());
        for p in parents {
            if !std::ptr::eq(p.tape, self) {
                return Err(Error::ForeignVar);
            }
            parent_ids.push(p.id);
        }
        let tracked = parent_ids.iter().any(|&p| nodes[p].tracked);
        nodes.push(Node {
            value: Arc::new(value),
            parents: parent_ids,
            tracked,
            backward: if tracked { Some(Box::new(backward)) } else { None },
        });
        Ok(Var {
            tape: self,
            id: nodes.len() - 1,
        })
    }

    /// Propagates d(loss)/d(node) back through the tape and returns the
    /// gradients of every `requires_grad` leaf reachable from `loss`.
    /// A tape supports a single backward pass.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(Error::ForeignVar);
        }
        if self.consumed.replace(true) {
            return Err(Error::TapeConsumed);
        }
        let nodes = self.nodes.borrow();
        let loss_node = &nodes[loss.id];
        if loss_node.value.len() != 1 {
            return Err(Error::NotScalar(loss_node.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<Real>>> = (0..=loss.id).map(|_| None).collect();
        grads[loss.id] = Some(vec![1.0]);
        let mut leaves = HashMap::new();
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.tracked {
                continue;
            }
            let Some(backward) = &node.backward else {
                leaves.insert(id, Tensor::new(node.value.shape(), g)?);
                continue;
            };
            let needs: Vec<bool> = node.parents.iter().map(|&p| nodes[p].tracked).collect();
            let parent_grads = backward(&g, &needs);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for ((&p, pg), need) in node.parents.iter().zip(parent_grads).zip(needs) {
                let Some(pg) = pg else { continue };
                if !need {
                    continue;
                }
                debug_assert_eq!(pg.len(), nodes[p].value.len());
                match &mut grads[p] {
                    Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Ok(Gradients { by_id: leaves })
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Arc<Tensor> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn len(&self) -> usize {
        self.tape.nodes.borrow()[self.id].value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// True when this value depends on a `requires_grad` leaf.
    pub fn tracked(&self) -> bool {
        self.tape.nodes.borrow()[self.id].tracked
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Var<'t> {
        self.tape.constant(self.value())
    }
}

/// Leaf gradients produced by [`Tape::backward`].
#[derive(Debug, Default)]
pub struct Gradients {
    by_id: HashMap<usize, Tensor>,
}

impl Gradients {
    /// Gradient of a leaf; `None` when the loss does not depend on it.
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.by_id.get(&var.id)
    }

    /// Gradient of a leaf, zeros when the loss does not depend on it.
    pub fn get_or_zeros(&self, var: Var<'_>) -> Tensor {
        self.get(var).cloned().unwrap_or_else(|| Tensor::zeros(var.shape()))
    }
}
