//! Hypernetwork-generated task-specific policies on a synthetic multi-task
//! manipulation suite.
//!
//! A context-conditioned hypernetwork is invoked once per episode to emit a
//! compact base policy; the base policy then runs per-step action inference
//! cheaply. The crate provides the differentiation core, network blocks with
//! exact parameter/FLOP accounting, the hypernetwork and base policy, a
//! synthetic instruction-following environment with a scripted expert,
//! the behavior-cloning trainer, and the evaluation/cost bench.

pub mod element;
pub mod error;
pub mod tensor;
pub mod tape;
pub mod params;

pub use element::Element;
pub use error::{Error, Result};
pub use tensor::Tensor;
