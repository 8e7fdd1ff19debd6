//! Neuron empirical gradients on a desk-scale transformer.
//!
//! The crate measures how shifting one feed-forward neuron's activation moves
//! a target token's probability (the neuron empirical gradient, NEG), checks
//! how well the cheap NeurGrad estimate `CG × sign(activation)` tracks it, and
//! uses NeurGrad features to probe for skill neurons on balanced
//! multiple-choice tasks.
//!
//! Modules, bottom up:
//!
//! * [`model`]: a small causal transformer with activation recording,
//!   patching and activation gradients.
//! * [`intervene`]: activation sweeps, zero-intercept NEG fits, linearity and
//!   generality statistics.
//! * [`estimators`]: CG, NeurGrad and integrated gradients, scored against
//!   sweeps.
//! * [`control`]: top-K enhancement, multi-neuron additivity, NEG
//!   distribution.
//! * [`tasks`]: balanced synthetic multiple-choice tasks and their wire
//!   format.
//! * [`probes`]: Polar-, Magn- and Tree-Probe plus baselines.
//! * [`metrics`]: cross-context robustness, substitutability and forest
//!   hyperparameter surfaces.

pub mod error;
pub mod model;
pub mod stats;
pub mod tasks;
pub mod toy;
pub mod intervene;
pub mod estimators;
pub mod control;
pub mod probes;
pub mod metrics;

pub use error::{Error, Result};
pub use model::{Model, ModelConfig, NeuronId, PatchMode, PatchSpec, Prompt};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/intro.md")]
    mod intro {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/interventions.md")]
    mod interventions {}
    #[doc = include_str!("../../../book/src/estimators.md")]
    mod estimators {}
    #[doc = include_str!("../../../book/src/control.md")]
    mod control {}
    #[doc = include_str!("../../../book/src/tasks.md")]
    mod tasks {}
    #[doc = include_str!("../../../book/src/probes.md")]
    mod probes {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
