use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// One named array plus its trainability flag and last gradient.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Param {
    pub value: Tensor,
    pub trainable: bool,
    #[serde(skip)]
    pub grad: Option<Vec<f64>>,
}

/// All arrays of a model, keyed by dotted name. Iteration order is the
/// lexicographic key order, which fixes update order across runs.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

/// Tape handles for every parameter loaded for one step.
#[derive(Debug, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn insert(&mut self, name: impl Into<String>, var: Var) {
        self.vars.insert(name.into(), var);
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::domain(format!("parameter `{name}` not bound")))
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) {
        self.params.insert(
            name.into(),
            Param {
                value,
                trainable,
                grad: None,
            },
        );
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::domain(format!("unknown parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::domain(format!("unknown parameter `{name}`")))
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) -> Result<()> {
        self.get_mut(name)?.trainable = trainable;
        Ok(())
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

    /// Number of scalar entries across all arrays.
    pub fn numel(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    /// Pushes every array whose name starts with `prefix` onto the tape.
    pub fn bind_prefix(&self, tape: &mut Tape, prefix: &str, into: &mut Bound) {
        for (k, p) in self.params.range(prefix.to_string()..) {
            if !k.starts_with(prefix) {
                break;
            }
            let v = tape.leaf(p.value.clone());
            into.vars.insert(k.clone(), v);
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> Bound {
        let mut b = Bound::default();
        self.bind_prefix(tape, "", &mut b);
        b
    }

    /// Copies gradients of bound parameters out of the tape. Parameters that
    /// were not bound or not reached by backward get `None` and are skipped by the
    /// optimizer (no decay either).
    pub fn collect_grads(&mut self, tape: &Tape, bound: &Bound) {
        for (k, p) in self.params.iter_mut() {
            p.grad = bound.vars.get(k).and_then(|&v| tape.grad(v)).map(<[f64]>::to_vec);
        }
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.values_mut() {
            p.grad = None;
        }
    }

    /// SHA-256 over names, shapes and little-endian values of the arrays
    /// whose names start with `prefix`.
    pub fn digest(&self, prefix: &str) -> String {
        let mut h = Sha256::new();
        for (k, p) in self.params.iter().filter(|(k, _)| k.starts_with(prefix)) {
            h.update(k.as_bytes());
            for &d in p.value.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for &x in p.value.data() {
                h.update(x.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}
