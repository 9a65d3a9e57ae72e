//! Named trainable parameters, grouped for the optimizer's per-group
//! learning-rate and weight-decay rules.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::element::Element;
use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Optimizer grouping. The trainer maps groups to lr multipliers and decay.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum ParamGroup {
    SharedEncoder,
    Hypernet,
    Head,
    Other,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct ParamId(pub usize);

pub struct Parameter<E: Element> {
    pub id: String,
    pub group: ParamGroup,
    pub lr_multiplier: f64,
    pub decay: bool,
    pub value: Tensor<E>,
}

/// All trainable parameters of a model, addressable by stable string path.
pub struct ParamStore<E: Element> {
    params: Vec<Parameter<E>>,
    by_id: HashMap<String, ParamId>,
}

impl<E: Element> Default for ParamStore<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> ParamStore<E> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            by_id: HashMap::new(),
        }
    }

    pub fn add(
        &mut self,
        id: impl Into<String>,
        group: ParamGroup,
        lr_multiplier: f64,
        decay: bool,
        value: Tensor<E>,
    ) -> ParamId {
        let id = id.into();
        assert!(
            !self.by_id.contains_key(&id),
            "duplicate parameter id {id:?}"
        );
        let pid = ParamId(self.params.len());
        self.by_id.insert(id.clone(), pid);
        self.params.push(Parameter {
            id,
            group,
            lr_multiplier,
            decay,
            value,
        });
        pid
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, pid: ParamId) -> &Parameter<E> {
        &self.params[pid.0]
    }

    pub fn get_mut(&mut self, pid: ParamId) -> &mut Parameter<E> {
        &mut self.params[pid.0]
    }

    pub fn lookup(&self, id: &str) -> Option<ParamId> {
        self.by_id.get(id).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<E>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Total scalar count across all trainable parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn scalar_count_group(&self, group: ParamGroup) -> usize {
        self.params
            .iter()
            .filter(|p| p.group == group)
            .map(|p| p.value.numel())
            .sum()
    }

    /// Register every parameter on a tape as a trainable borrowed leaf.
    pub fn bind_all<'a>(&'a self, tape: &mut Tape<'a, E>) -> Binding {
        Binding {
            vars: self
                .params
                .iter()
                .map(|p| tape.leaf(p.value.data(), p.value.shape(), true))
                .collect(),
        }
    }
}

/// Tape handles for every store parameter, indexed by [`ParamId`].
pub struct Binding {
    vars: Vec<Var>,
}

impl Binding {
    pub fn var(&self, pid: ParamId) -> Var {
        self.vars[pid.0]
    }
}

/// Per-parameter gradient accumulators, filled from one or more tapes before
/// the optimizer applies a step.
pub struct Grads<E: Element> {
    bufs: Vec<Option<Vec<E>>>,
}

impl<E: Element> Grads<E> {
    pub fn for_store(store: &ParamStore<E>) -> Self {
        Grads {
            bufs: (0..store.len()).map(|_| None).collect(),
        }
    }

    pub fn harvest(&mut self, tape: &Tape<E>, binding: &Binding) {
        for (buf, &var) in self.bufs.iter_mut().zip(&binding.vars) {
            if let Some(g) = tape.grad(var) {
                match buf {
                    Some(acc) => {
                        for (a, &d) in acc.iter_mut().zip(g) {
                            *a += d;
                        }
                    }
                    None => *buf = Some(g.to_vec()),
                }
            }
        }
    }

    pub fn get(&self, pid: ParamId) -> Option<&[E]> {
        self.bufs[pid.0].as_deref()
    }

    pub fn scale(&mut self, factor: E) {
        for buf in self.bufs.iter_mut().flatten() {
            for g in buf.iter_mut() {
                *g *= factor;
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        let mut acc = 0.0;
        for buf in self.bufs.iter().flatten() {
            for g in buf {
                acc += g.to_f64() * g.to_f64();
            }
        }
        acc.sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.bufs
            .iter()
            .flatten()
            .all(|buf| buf.iter().all(|g| g.is_finite()))
    }
}

// ── Initialization ──────────────────────────────────────────────────────

/// The initializer a tensor would receive if trained directly. Generated
/// tensors reuse these through the hypernet head biases so a step-0 generated
/// network matches a directly initialized one.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DirectInit {
    /// Gaussian with variance 1/fan_in (linear weights).
    FanIn { fan_in: usize },
    /// Zeros (biases).
    Zeros,
    /// Ones (layernorm gains).
    Ones,
    /// Gaussian with an explicit std (embeddings, learnable tokens).
    Gaussian { std: f64 },
}

impl DirectInit {
    pub fn sample<E: Element>(&self, shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor<E> {
        match *self {
            DirectInit::FanIn { fan_in } => {
                let std = 1.0 / (fan_in as f64).sqrt();
                gaussian_tensor(shape, std, rng)
            }
            DirectInit::Zeros => Tensor::zeros(shape),
            DirectInit::Ones => Tensor::full(shape, E::ONE),
            DirectInit::Gaussian { std } => gaussian_tensor(shape, std, rng),
        }
    }
}

/// Gaussian draws are made in f64 and narrowed, so f32 and f64 builds of the
/// same seed see the same underlying values.
pub fn gaussian_tensor<E: Element>(shape: Vec<usize>, std: f64, rng: &mut ChaCha8Rng) -> Tensor<E> {
    Tensor::from_fn(shape, |_| {
        let z: f64 = rng.sample(StandardNormal);
        E::from_f64(z * std)
    })
}

/// Deterministic per-purpose RNG stream.
pub fn seeded_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Checked lookup used by checkpoint load.
pub fn require_param<E: Element>(store: &ParamStore<E>, id: &str) -> Result<ParamId> {
    store
        .lookup(id)
        .ok_or_else(|| Error::Checkpoint(format!("unknown parameter id {id:?}")))
}
