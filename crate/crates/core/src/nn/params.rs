//! Named parameter storage and the per-pass binding of parameters to graph nodes.
//!
//! Layers hold [`ParamId`]s, never tensors. A [`ParamStore`] may be built
//! without values (shape-only), which is how parameter counts of the large
//! presets are checked against the analytic formulas without allocating them.

use std::collections::HashMap;

use crate::autograd::{Gradients, Var};
use crate::error::{Error, Result};
use crate::rng::RandomSource;
use crate::tensor::{numel, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Const(f64),
    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    FanIn(usize),
    Normal(f64),
}

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Option<Tensor>,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    /// Total number of scalar parameters, from shapes alone.
    pub fn element_count(&self) -> usize {
        self.entries.iter().map(|e| numel(&e.shape)).sum()
    }

    /// Element count of entries whose name starts with `prefix`.
    pub fn element_count_under(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|e| e.name.starts_with(prefix))
            .map(|e| numel(&e.shape))
            .sum()
    }

    pub fn is_materialized(&self) -> bool {
        self.entries.iter().all(|e| e.value.is_some())
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn get(&self, id: ParamId) -> Result<&Tensor> {
        self.entries[id.0].value.as_ref().ok_or_else(|| {
            Error::InvalidArgument(format!(
                "parameter {} has no value (shape-only store)",
                self.entries[id.0].name
            ))
        })
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let e = &mut self.entries[id.0];
        if value.shape() != e.shape.as_slice() {
            return Err(Error::shape("ParamStore::set", &e.shape, value.shape()));
        }
        e.value = Some(value.detach());
        Ok(())
    }

    /// Flattened copy of all values, in registration order.
    pub fn flatten(&self) -> Result<Vec<Tensor>> {
        self.ids().map(|id| self.get(id).cloned()).collect()
    }

    fn register(&mut self, name: String, shape: Vec<usize>, value: Option<Tensor>) -> ParamId {
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = self.entries.len();
        self.index.insert(name.clone(), id);
        self.entries.push(ParamEntry { name, shape, value });
        ParamId(id)
    }
}

/// Registers parameters under a hierarchical name prefix. Without a random
/// source it records shapes only.
pub struct Builder<'a> {
    store: &'a mut ParamStore,
    rng: Option<&'a mut RandomSource>,
    prefix: String,
}

impl<'a> Builder<'a> {
    pub fn new(store: &'a mut ParamStore, rng: Option<&'a mut RandomSource>) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
        }
    }

    pub fn scope<'b>(&'b mut self, name: impl AsRef<str>) -> Builder<'b> {
        Builder {
            store: self.store,
            rng: self.rng.as_deref_mut(),
            prefix: format!("{}{}.", self.prefix, name.as_ref()),
        }
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> ParamId {
        let full = format!("{}{}", self.prefix, name);
        let value = self.rng.as_deref_mut().map(|rng| match init {
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::ones(shape),
            Init::Const(c) => Tensor::full(shape, c),
            Init::FanIn(fan_in) => {
                Tensor::rand_uniform(shape, 1.0 / (fan_in.max(1) as f64).sqrt(), rng)
            }
            Init::Normal(std) => Tensor::randn(shape, std, rng),
        });
        self.store.register(full, shape.to_vec(), value)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// One forward pass: parameters bound to graph nodes, the mode, and the
/// random source stochastic layers draw from. Eval mode never draws.
pub struct Pass<'a> {
    vars: Vec<Var>,
    mode: Mode,
    rng: &'a mut RandomSource,
}

impl<'a> Pass<'a> {
    /// Bind every parameter; with `track_grad` they become gradient leaves.
    pub fn new(
        store: &ParamStore,
        mode: Mode,
        rng: &'a mut RandomSource,
        track_grad: bool,
    ) -> Result<Self> {
        let vars = store
            .ids()
            .map(|id| {
                let t = store.get(id)?.clone();
                Ok(if track_grad {
                    Var::leaf(t)
                } else {
                    Var::constant(t)
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { vars, mode, rng })
    }

    /// Bind explicit values (one per parameter, in store order).
    pub fn from_vars(vars: Vec<Var>, mode: Mode, rng: &'a mut RandomSource) -> Self {
        Self { vars, mode, rng }
    }

    pub fn var(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn training(&self) -> bool {
        self.mode == Mode::Train
    }

    pub fn rng(&mut self) -> &mut RandomSource {
        self.rng
    }

    /// Parameter gradients in store order (zeros where unused).
    pub fn param_grads(&self, grads: &Gradients) -> Vec<Tensor> {
        self.vars.iter().map(|v| grads.get_or_zeros(v)).collect()
    }
}
