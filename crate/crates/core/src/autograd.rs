//! Reverse-mode differentiation over a dynamically recorded graph.
//!
//! Every operation returns a [`Var`]: a cheap, shareable handle to an
//! immutable value plus, when any input requires a gradient, the closure that
//! maps the output gradient to input gradients. Nodes that do not depend on a
//! gradient-requiring leaf record nothing, so inference passes free their
//! intermediates as soon as the handles drop.
//!
//! Node ids grow monotonically and parents are always created before their
//! children, so descending id order is a valid reverse topological order.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

static NEXT_ID: AtomicUsize = AtomicUsize::new(0);

pub(crate) struct BackwardCtx<'a> {
    /// Gradient of the loss w.r.t. this node's output.
    pub grad: &'a Tensor,
    /// This node's forward value.
    pub out: &'a Tensor,
    pub parents: &'a [Var],
}

type BackwardFn = dyn Fn(&BackwardCtx<'_>) -> Vec<Option<Tensor>> + Send + Sync;

struct Record {
    parents: Vec<Var>,
    backward: Box<BackwardFn>,
}

struct Node {
    id: usize,
    op: &'static str,
    value: Tensor,
    requires_grad: bool,
    record: Option<Record>,
}

#[derive(Clone)]
pub struct Var(Arc<Node>);

impl fmt::Debug for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.0.id)
            .field("op", &self.0.op)
            .field("shape", &self.0.value.shape())
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

impl Var {
    fn make(op: &'static str, value: Tensor, requires_grad: bool, record: Option<Record>) -> Self {
        Var(Arc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            op,
            value: value.detach(),
            requires_grad,
            record,
        }))
    }

    /// A value that never receives a gradient.
    pub fn constant(value: Tensor) -> Self {
        Self::make("constant", value, false, None)
    }

    /// A gradient-requiring leaf.
    pub fn leaf(value: Tensor) -> Self {
        Self::make("leaf", value, true, None)
    }

    pub(crate) fn from_op(
        op: &'static str,
        value: Tensor,
        parents: Vec<Var>,
        backward: impl Fn(&BackwardCtx<'_>) -> Vec<Option<Tensor>> + Send + Sync + 'static,
    ) -> Result<Self> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op });
        }
        let requires_grad = parents.iter().any(Var::requires_grad);
        let record = requires_grad.then(|| Record {
            parents,
            backward: Box::new(backward),
        });
        Ok(Self::make(op, value, requires_grad, record))
    }

    pub fn id(&self) -> usize {
        self.0.id
    }

    pub fn op(&self) -> &'static str {
        self.0.op
    }

    pub fn value(&self) -> &Tensor {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn data(&self) -> &[f64] {
        self.0.value.data()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn item(&self) -> Result<f64> {
        self.0.value.item()
    }

    /// Same value cut off from the graph.
    pub fn detach(&self) -> Var {
        Var::constant(self.0.value.clone())
    }

    /// Back-propagate from this scalar and return the gradients of every
    /// gradient-requiring leaf it depends on.
    pub fn backward(&self) -> Result<Gradients> {
        if self.0.value.numel() != 1 {
            return Err(Error::NonScalar(self.shape().to_vec()));
        }
        let mut out = Gradients::default();
        if !self.requires_grad() {
            return Ok(out);
        }

        let mut seen = HashSet::new();
        let mut order = Vec::new();
        let mut stack = vec![self.clone()];
        seen.insert(self.id());
        while let Some(v) = stack.pop() {
            if let Some(rec) = &v.0.record {
                for p in &rec.parents {
                    if p.requires_grad() && seen.insert(p.id()) {
                        stack.push(p.clone());
                    }
                }
            }
            order.push(v);
        }
        order.sort_unstable_by_key(|v| std::cmp::Reverse(v.id()));

        let mut pending: HashMap<usize, Tensor> = HashMap::new();
        pending.insert(self.id(), Tensor::full(self.shape(), 1.0));
        for node in order {
            let Some(grad) = pending.remove(&node.id()) else {
                continue;
            };
            let Some(rec) = &node.0.record else {
                out.add(node.id(), grad);
                continue;
            };
            let ctx = BackwardCtx {
                grad: &grad,
                out: &node.0.value,
                parents: &rec.parents,
            };
            let grads = (rec.backward)(&ctx);
            debug_assert_eq!(grads.len(), rec.parents.len(), "{}", node.op());
            for (p, g) in rec.parents.iter().zip(grads) {
                let Some(g) = g else { continue };
                if !p.requires_grad() {
                    continue;
                }
                debug_assert_eq!(g.shape(), p.shape(), "grad shape from {}", node.op());
                match pending.get_mut(&p.id()) {
                    Some(acc) => add_into(acc, &g),
                    None => {
                        pending.insert(p.id(), g);
                    }
                }
            }
        }
        Ok(out)
    }
}

fn add_into(acc: &mut Tensor, g: &Tensor) {
    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
        *a += b;
    }
}

/// Leaf gradients keyed by node.
#[derive(Default, Debug, Clone)]
pub struct Gradients {
    map: HashMap<usize, Tensor>,
}

impl Gradients {
    fn add(&mut self, id: usize, g: Tensor) {
        match self.map.get_mut(&id) {
            Some(acc) => add_into(acc, &g),
            None => {
                self.map.insert(id, g);
            }
        }
    }

    pub fn get(&self, v: &Var) -> Option<&Tensor> {
        self.map.get(&v.id())
    }

    /// Gradient of `v`, or zeros when the loss does not depend on it.
    pub fn get_or_zeros(&self, v: &Var) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(v.shape()))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}
