//! Long-sequence continual learning: a class-subset stream simulator, a small
//! from-scratch learner with output-layer gradient masking, a frequency-driven
//! replay buffer, and the accuracy/forgetting metrics used to study knowledge
//! accumulation over hundreds of re-occurring tasks.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`). Concrete
//! aliases for both precisions are exported at the crate root.

// Negated float comparisons are deliberate: they reject NaN alongside out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod datasets;
pub mod error;
pub mod learner;
pub mod metrics;
pub mod num;
pub mod oracles;
pub mod replay;
pub mod runner;
pub mod stream;

pub use error::{Error, Result};
pub use num::Scalar;

pub type Dataset32 = datasets::LabeledDataset<f32>;
pub type Dataset64 = datasets::LabeledDataset<f64>;
pub type Network32 = learner::Network<f32>;
pub type Network64 = learner::Network<f64>;
pub type Optimizer32 = learner::Optimizer<f32>;
pub type Optimizer64 = learner::Optimizer<f64>;
pub type TrainingSet32 = learner::TrainingSet<f32>;
pub type TrainingSet64 = learner::TrainingSet<f64>;
pub type ReplayBuffer32 = replay::ReplayBuffer<f32>;
pub type ReplayBuffer64 = replay::ReplayBuffer<f64>;
