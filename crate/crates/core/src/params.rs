//! Named parameter storage, deterministic initialization and tape binding.

use std::collections::HashMap;

use rand::RngExt;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::scalar::Scalar;
use crate::tensor::{Result, Tape, Tensor, TensorError, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    /// Optimized by gradient descent; counted by `param_count`.
    Trainable,
    /// Persistent state that is not trained (batch-norm running statistics).
    Buffer,
}

#[derive(Clone, Debug)]
pub struct ParamEntry<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub kind: ParamKind,
    pub frozen: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
    index: HashMap<String, usize>,
}

/// Weight initialization schemes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// `U(-b, b)` with `b = sqrt(6 / fan_in)` (ReLU/SiLU paths).
    KaimingUniform { fan_in: usize },
    /// `U(-b, b)` with `b = sqrt(6 / (fan_in + fan_out))` (tanh paths).
    XavierUniform { fan_in: usize, fan_out: usize },
    /// Normal with the given std, resampled outside `[-2 std, 2 std]`.
    TruncNormal { std: f64 },
}

impl Init {
    pub fn sample<T: Scalar>(self, shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<T> {
        let n: usize = shape.iter().product();
        let data: Vec<T> = match self {
            Init::Zeros => vec![T::zero(); n],
            Init::Ones => vec![T::one(); n],
            Init::KaimingUniform { fan_in } => {
                let b = (6.0 / fan_in.max(1) as f64).sqrt();
                (0..n).map(|_| T::lit(rng.random_range(-b..b))).collect()
            }
            Init::XavierUniform { fan_in, fan_out } => {
                let b = (6.0 / (fan_in + fan_out).max(1) as f64).sqrt();
                (0..n).map(|_| T::lit(rng.random_range(-b..b))).collect()
            }
            Init::TruncNormal { std } => (0..n)
                .map(|_| loop {
                    let z: f64 = StandardNormal.sample(rng);
                    if z.abs() <= 2.0 {
                        break T::lit(z * std);
                    }
                })
                .collect(),
        };
        Tensor::new(shape, data).expect("init shape")
    }
}

/// Tape handles for the trainable entries of a store.
pub struct Bound {
    vars: Vec<Option<Var>>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0].expect("trainable parameter bound to tape")
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, kind: ParamKind) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(TensorError::Config(format!("duplicate parameter name `{name}`")));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(ParamEntry {
            name,
            value,
            kind,
            frozen: false,
        });
        Ok(ParamId(self.entries.len() - 1))
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

    pub fn entry_mut(&mut self, i: usize) -> &mut ParamEntry<T> {
        &mut self.entries[i]
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    /// Mutable access to two distinct entries at once.
    pub fn pair_mut(&mut self, a: ParamId, b: ParamId) -> (&mut Tensor<T>, &mut Tensor<T>) {
        assert_ne!(a.0, b.0);
        if a.0 < b.0 {
            let (lo, hi) = self.entries.split_at_mut(b.0);
            (&mut lo[a.0].value, &mut hi[0].value)
        } else {
            let (lo, hi) = self.entries.split_at_mut(a.0);
            (&mut hi[0].value, &mut lo[b.0].value)
        }
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    /// Number of trainable scalars.
    pub fn param_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind == ParamKind::Trainable)
            .map(|e| e.value.numel())
            .sum()
    }

    /// Number of trainable scalars that are not frozen.
    pub fn trainable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind == ParamKind::Trainable && !e.frozen)
            .map(|e| e.value.numel())
            .sum()
    }

    /// Freezes every trainable entry whose name does not start with one of `keep`.
    pub fn freeze_except(&mut self, keep: &[&str]) {
        for e in &mut self.entries {
            e.frozen = !keep.iter().any(|p| e.name.starts_with(p));
        }
    }

    pub fn unfreeze_all(&mut self) {
        for e in &mut self.entries {
            e.frozen = false;
        }
    }

    /// Registers every trainable entry as a leaf. Gradients are requested only
    /// on training tapes and only for unfrozen entries.
    pub fn bind(&self, tape: &mut Tape<T>) -> Bound {
        let training = tape.is_training();
        let vars = self
            .entries
            .iter()
            .map(|e| match e.kind {
                ParamKind::Trainable => Some(tape.leaf(e.value.clone(), training && !e.frozen)),
                ParamKind::Buffer => None,
            })
            .collect();
        Bound { vars }
    }

    /// Gradients aligned with `entries()`; `None` for buffers, frozen
    /// entries, and parameters that did not influence the loss.
    pub fn collect_grads(&self, tape: &mut Tape<T>, bound: &Bound) -> Vec<Option<Tensor<T>>> {
        bound
            .vars
            .iter()
            .zip(&self.entries)
            .map(|(v, e)| match v {
                Some(v) if !e.frozen => tape.take_grad(*v),
                _ => None,
            })
            .collect()
    }
}

/// Creates named parameters from a single seeded stream, in build order.
pub struct ParamBuilder<'a, T> {
    pub store: &'a mut ParamStore<T>,
    pub rng: &'a mut ChaCha8Rng,
}

impl<T: Scalar> ParamBuilder<'_, T> {
    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<ParamId> {
        let value = init.sample(shape, self.rng);
        self.store.add(name, value, ParamKind::Trainable)
    }

    pub fn buffer(&mut self, name: &str, value: Tensor<T>) -> Result<ParamId> {
        self.store.add(name, value, ParamKind::Buffer)
    }
}
