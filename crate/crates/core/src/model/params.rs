use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Tape, Tensor, Var};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Tensor,
    /// Accumulated gradient; the trainer zeroes it each step.
    pub grad: Tensor,
    pub trainable: bool,
}

/// Named parameters in sorted-name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) {
        let grad = Tensor::zeros(value.shape());
        self.params.insert(
            name.into(),
            Param {
                value,
                grad,
                trainable,
            },
        );
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.get_mut(name)
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.params.values().map(|p| p.value.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.values_mut() {
            p.grad.data_mut().fill(0.0);
        }
    }

    /// Adds leaf gradients recorded on `tape` for each bound parameter.
    pub fn accumulate_grads(&mut self, tape: &Tape, bindings: &BTreeMap<String, Var>) {
        for (name, &var) in bindings {
            if let (Some(p), Some(g)) = (self.params.get_mut(name), tape.grad(var)) {
                for (a, b) in p.grad.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
        }
    }

    /// L2 norm of all trainable gradients.
    pub fn grad_norm(&self) -> f64 {
        self.params
            .values()
            .filter(|p| p.trainable)
            .flat_map(|p| p.grad.data())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// One forward pass: binds parameters onto a tape on first use and carries
/// the mode, the dropout stream and an optional attention probe.
pub struct Graph<'a> {
    pub tape: &'a mut Tape,
    store: &'a ParamStore,
    bindings: BTreeMap<String, Var>,
    mode: Mode,
    rng: ChaCha8Rng,
    /// When set, every attention layer appends its `[B, heads, T, T]` weights.
    pub attention_probe: Option<Vec<Tensor>>,
}

impl<'a> Graph<'a> {
    pub fn new(tape: &'a mut Tape, store: &'a ParamStore, mode: Mode) -> Self {
        Self {
            tape,
            store,
            bindings: BTreeMap::new(),
            mode,
            rng: ChaCha8Rng::seed_from_u64(0),
            attention_probe: None,
        }
    }

    /// Seeds the dropout stream used in training mode.
    pub fn with_dropout_seed(mut self, seed: u64) -> Self {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self
    }

    pub fn with_attention_probe(mut self) -> Self {
        self.attention_probe = Some(Vec::new());
        self
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Tape handle of parameter `name`; frozen parameters are constants.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bindings.get(name) {
            return Ok(v);
        }
        let p = self
            .store
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))?;
        let v = self.tape.leaf(p.value.clone(), p.trainable);
        self.bindings.insert(name.to_string(), v);
        Ok(v)
    }

    /// Binds `name` to an existing tape node instead of the stored value.
    pub fn bind(&mut self, name: &str, v: Var) {
        self.bindings.insert(name.to_string(), v);
    }

    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        if self.mode == Mode::Eval || p == 0.0 {
            return Ok(x);
        }
        Ok(self.tape.dropout(x, p, &mut self.rng)?)
    }

    pub fn bindings(&self) -> &BTreeMap<String, Var> {
        &self.bindings
    }

    pub fn into_bindings(self) -> BTreeMap<String, Var> {
        self.bindings
    }
}
