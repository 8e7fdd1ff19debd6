//! A small causal transformer whose feed-forward activations can be recorded,
//! patched, and differentiated against.
//!
//! The model is pre-LayerNorm (GPT-2 layout): token and position embeddings,
//! `n_layers` blocks of multi-head causal self-attention followed by a
//! feed-forward block `act(LN(h) W_in + b_in) W_out + b_out`, a final
//! LayerNorm, and an untied unembedding. A *neuron* is one column of the
//! feed-forward intermediate activation, read after the nonlinearity.
//!
//! All arithmetic is `f64`. Parameters are kept `f32`-representable so that
//! the on-disk format round-trips exactly.

mod backward;
mod forward;
mod io;
mod params;
mod tail;
mod train;

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{input_err, Result};

pub use forward::Prepared;
pub use io::{load_model, read_config_sidecar, save_model, write_config_sidecar, MAGIC, FORMAT_VERSION};
pub use params::Model;
pub use train::{Example, TrainOptions, TrainReport};

/// Feed-forward nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Nonlinearity {
    /// Tanh-approximated GELU.
    #[default]
    Gelu,
    Relu,
}

/// Scalar read off the output distribution when differentiating or sweeping.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Probability of the target token.
    #[default]
    Prob,
    /// Natural log of the target-token probability.
    LogProb,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    /// Neurons per layer.
    pub d_ff: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    pub nonlinearity: Nonlinearity,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_layers: 4,
            d_model: 64,
            d_ff: 256,
            n_heads: 4,
            vocab_size: 128,
            max_seq: 64,
            nonlinearity: Nonlinearity::Gelu,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("n_heads", self.n_heads),
            ("vocab_size", self.vocab_size),
            ("max_seq", self.max_seq),
        ];
        for (name, v) in counts {
            if v == 0 {
                return input_err(format!("{name} must be at least 1"));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return input_err(format!(
                "d_model ({}) is not divisible by n_heads ({})",
                self.d_model, self.n_heads
            ));
        }
        if self.d_ff < self.d_model {
            return input_err(format!("d_ff ({}) must be >= d_model ({})", self.d_ff, self.d_model));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Total number of feed-forward neurons across all layers.
    pub fn n_neurons(&self) -> usize {
        self.n_layers * self.d_ff
    }

    /// Every neuron in (layer, index) order.
    pub fn neurons(&self) -> impl Iterator<Item = NeuronId> + '_ {
        (0..self.n_layers).flat_map(move |l| (0..self.d_ff).map(move |n| NeuronId::new(l, n)))
    }

    pub fn check_neuron(&self, id: NeuronId) -> Result<()> {
        if id.layer >= self.n_layers || id.neuron >= self.d_ff {
            return input_err(format!("neuron {id} out of bounds for {}x{}", self.n_layers, self.d_ff));
        }
        Ok(())
    }

    pub fn flat_index(&self, id: NeuronId) -> usize {
        id.layer * self.d_ff + id.neuron
    }

    pub fn neuron_at(&self, flat: usize) -> NeuronId {
        NeuronId::new(flat / self.d_ff, flat % self.d_ff)
    }
}

/// One intermediate feed-forward unit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NeuronId {
    pub layer: usize,
    pub neuron: usize,
}

impl NeuronId {
    pub const fn new(layer: usize, neuron: usize) -> Self {
        NeuronId { layer, neuron }
    }
}

impl fmt::Display for NeuronId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "L{}.N{}", self.layer, self.neuron)
    }
}

/// A token sequence, the position whose next-token distribution is read, and
/// the token whose probability is tracked.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Prompt {
    pub tokens: Vec<usize>,
    pub answer_position: usize,
    pub target_token: usize,
}

impl Prompt {
    /// A prompt read at its final token.
    pub fn at_end(tokens: Vec<usize>, target_token: usize) -> Self {
        let answer_position = tokens.len().saturating_sub(1);
        Prompt { tokens, answer_position, target_token }
    }

    pub fn with_target(&self, target_token: usize) -> Self {
        Prompt { target_token, ..self.clone() }
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        if self.tokens.is_empty() {
            return input_err("empty prompt");
        }
        if self.tokens.len() > cfg.max_seq {
            return input_err(format!(
                "prompt length {} exceeds max_seq {}",
                self.tokens.len(),
                cfg.max_seq
            ));
        }
        if self.answer_position >= self.tokens.len() {
            return input_err(format!(
                "answer_position {} outside prompt of length {}",
                self.answer_position,
                self.tokens.len()
            ));
        }
        if let Some(&t) = self.tokens.iter().find(|&&t| t >= cfg.vocab_size) {
            return input_err(format!("token id {t} out of vocabulary ({})", cfg.vocab_size));
        }
        if self.target_token >= cfg.vocab_size {
            return input_err(format!("target token {} out of vocabulary", self.target_token));
        }
        Ok(())
    }
}

/// Output distribution at the answer position.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenDistribution {
    pub probs: Vec<f64>,
}

impl TokenDistribution {
    pub fn prob(&self, token: usize) -> f64 {
        self.probs[token]
    }

    pub fn objective(&self, token: usize, objective: Objective) -> f64 {
        match objective {
            Objective::Prob => self.probs[token],
            Objective::LogProb => self.probs[token].ln(),
        }
    }

    /// Highest-probability token; ties go to the lowest id.
    pub fn argmax(&self) -> usize {
        argmax(&self.probs)
    }
}

pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Dense per-neuron values stored in (layer, neuron) order.
#[derive(Debug, Clone, PartialEq)]
pub struct NeuronValues {
    d_ff: usize,
    values: Vec<f64>,
}

impl NeuronValues {
    pub fn new(n_layers: usize, d_ff: usize) -> Self {
        NeuronValues { d_ff, values: vec![0.0; n_layers * d_ff] }
    }

    pub fn from_flat(d_ff: usize, values: Vec<f64>) -> Self {
        assert!(d_ff > 0 && values.len() % d_ff == 0);
        NeuronValues { d_ff, values }
    }

    pub fn get(&self, id: NeuronId) -> f64 {
        self.values[id.layer * self.d_ff + id.neuron]
    }

    pub fn set(&mut self, id: NeuronId, v: f64) {
        self.values[id.layer * self.d_ff + id.neuron] = v;
    }

    pub fn layer(&self, layer: usize) -> &[f64] {
        &self.values[layer * self.d_ff..(layer + 1) * self.d_ff]
    }

    pub fn layer_mut(&mut self, layer: usize) -> &mut [f64] {
        &mut self.values[layer * self.d_ff..(layer + 1) * self.d_ff]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn n_layers(&self) -> usize {
        self.values.len() / self.d_ff
    }

    pub fn iter(&self) -> impl Iterator<Item = (NeuronId, f64)> + '_ {
        let d_ff = self.d_ff;
        self.values
            .iter()
            .enumerate()
            .map(move |(i, &v)| (NeuronId::new(i / d_ff, i % d_ff), v))
    }
}

/// Activations at the answer position and the output distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub activations: NeuronValues,
    pub output: TokenDistribution,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatchMode {
    /// `a' = a + v`
    AbsoluteDelta,
    /// `a' = a + v * sign(a)`, with `sign(0) = 0`.
    SignRelativeDelta,
    /// `a' = v`
    SetValue,
}

impl PatchMode {
    pub fn apply(self, a: f64, v: f64) -> f64 {
        match self {
            PatchMode::AbsoluteDelta => a + v,
            PatchMode::SignRelativeDelta => a + v * sign(a),
            PatchMode::SetValue => v,
        }
    }
}

/// Three-valued sign: `sign(0) = 0`.
pub fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Activation edits applied at the answer position.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PatchSpec {
    entries: Vec<(NeuronId, PatchMode, f64)>,
}

impl PatchSpec {
    pub fn empty() -> Self {
        PatchSpec::default()
    }

    pub fn new(entries: Vec<(NeuronId, PatchMode, f64)>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(entries.len());
        for (id, mode, _) in &entries {
            if !seen.insert(*id) {
                return input_err(format!("duplicate neuron {id} in patch"));
            }
            if *mode != entries[0].1 {
                return input_err("patch modes must be uniform within one spec");
            }
        }
        Ok(PatchSpec { entries })
    }

    pub fn single(id: NeuronId, mode: PatchMode, value: f64) -> Self {
        PatchSpec { entries: vec![(id, mode, value)] }
    }

    /// The same shift applied to many neurons, each scaled by its own
    /// direction.
    pub fn uniform(ids: &[NeuronId], mode: PatchMode, delta: f64, directions: &[f64]) -> Result<Self> {
        if ids.len() != directions.len() {
            return input_err("one direction per neuron is required");
        }
        PatchSpec::new(ids.iter().zip(directions).map(|(&id, &d)| (id, mode, delta * d)).collect())
    }

    pub fn entries(&self) -> &[(NeuronId, PatchMode, f64)] {
        &self.entries
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub(crate) fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        for (id, _, v) in &self.entries {
            cfg.check_neuron(*id)?;
            if !v.is_finite() {
                return input_err(format!("non-finite patch value for {id}"));
            }
        }
        Ok(())
    }

    /// Lowest patched layer, if any.
    pub(crate) fn first_layer(&self) -> Option<usize> {
        self.entries.iter().map(|(id, _, _)| id.layer).min()
    }

    pub(crate) fn for_layer(&self, layer: usize) -> impl Iterator<Item = (usize, PatchMode, f64)> + '_ {
        self.entries
            .iter()
            .filter(move |(id, _, _)| id.layer == layer)
            .map(|(id, m, v)| (id.neuron, *m, *v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_rejects_bad_shapes() {
        let mut c = ModelConfig::default();
        assert!(c.validate().is_ok());
        c.n_heads = 3;
        assert!(c.validate().is_err());
        c = ModelConfig { d_ff: 32, ..ModelConfig::default() };
        assert!(c.validate().is_err());
        c = ModelConfig { n_layers: 0, ..ModelConfig::default() };
        assert!(c.validate().is_err());
    }

    #[test]
    fn patch_rejects_duplicates_and_mixed_modes() {
        let a = NeuronId::new(0, 1);
        let b = NeuronId::new(1, 1);
        assert!(PatchSpec::new(vec![(a, PatchMode::SetValue, 1.0), (a, PatchMode::SetValue, 2.0)]).is_err());
        assert!(PatchSpec::new(vec![(a, PatchMode::SetValue, 1.0), (b, PatchMode::AbsoluteDelta, 2.0)]).is_err());
        assert!(PatchSpec::new(vec![(a, PatchMode::SetValue, 1.0), (b, PatchMode::SetValue, 2.0)]).is_ok());
    }

    #[test]
    fn patch_modes() {
        assert_eq!(PatchMode::AbsoluteDelta.apply(-1.5, 0.5), -1.0);
        assert_eq!(PatchMode::SignRelativeDelta.apply(-1.5, 0.5), -2.0);
        assert_eq!(PatchMode::SignRelativeDelta.apply(0.0, 0.5), 0.0);
        assert_eq!(PatchMode::SetValue.apply(-1.5, 0.5), 0.5);
    }

    #[test]
    fn prompt_validation() {
        let cfg = ModelConfig { vocab_size: 10, max_seq: 4, ..ModelConfig::default() };
        assert!(Prompt::at_end(vec![1, 2, 3], 4).validate(&cfg).is_ok());
        assert!(Prompt::at_end(vec![1, 2, 10], 4).validate(&cfg).is_err());
        assert!(Prompt::at_end(vec![1, 2, 3, 4, 5], 4).validate(&cfg).is_err());
        assert!(Prompt::at_end(vec![1], 11).validate(&cfg).is_err());
        let p = Prompt { tokens: vec![1, 2], answer_position: 2, target_token: 0 };
        assert!(p.validate(&cfg).is_err());
    }
}
