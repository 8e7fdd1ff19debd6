//! NEG features over a task split and the probes built on them.
//!
//! * [`vote`]: Polar-Probe, Magn-Probe and the activation baseline, all
//!   ranked-neuron majority votes.
//! * [`forest`]: Tree-Probe, a random forest over per-neuron argmax
//!   features.
//! * [`io`]: JSON Lines persistence.

pub mod forest;
pub mod io;
pub mod vote;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{input_err, Result};
use crate::estimators::estimate_prepared;
use crate::model::{argmax, Model, ModelConfig, NeuronId};
use crate::stats;
use crate::tasks::{candidates_in_style, ContextSpec, Split, TaskSet};

pub use forest::{train_tree, Forest, ForestOptions, MaxFeatures};
pub use vote::{select_neuron_size, train_act, train_magn, train_polar, SizeChoice, VoteKind, VoteProbe};

/// Per-candidate scores for every neuron of every query, plus the answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub n_options: usize,
    pub n_neurons: usize,
    /// Row-major `[query][candidate][neuron]`.
    pub values: Vec<f64>,
    pub correct: Vec<usize>,
}

impl Scores {
    pub fn new(n_options: usize, n_neurons: usize) -> Self {
        Scores { n_options, n_neurons, values: Vec::new(), correct: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.correct.len()
    }

    pub fn is_empty(&self) -> bool {
        self.correct.is_empty()
    }

    /// Appends one query; `row` is `[candidate][neuron]`.
    pub fn push(&mut self, row: &[f64], correct: usize) -> Result<()> {
        if row.len() != self.n_options * self.n_neurons {
            return input_err(format!("feature row has {} values, expected {}", row.len(), self.n_options * self.n_neurons));
        }
        if correct >= self.n_options {
            return input_err(format!("correct index {correct} out of range"));
        }
        self.values.extend_from_slice(row);
        self.correct.push(correct);
        Ok(())
    }

    pub fn get(&self, query: usize, candidate: usize, neuron: usize) -> f64 {
        self.values[(query * self.n_options + candidate) * self.n_neurons + neuron]
    }

    /// The query's scores for one candidate, over all neurons.
    pub fn candidate(&self, query: usize, candidate: usize) -> &[f64] {
        let start = (query * self.n_options + candidate) * self.n_neurons;
        &self.values[start..start + self.n_neurons]
    }

    /// Candidate with the highest score for `neuron` (ties to the lower
    /// index).
    pub fn argmax(&self, query: usize, neuron: usize) -> usize {
        let vals: Vec<f64> = (0..self.n_options).map(|j| self.get(query, j, neuron)).collect();
        argmax(&vals)
    }

    pub fn argmin(&self, query: usize, neuron: usize) -> usize {
        let vals: Vec<f64> = (0..self.n_options).map(|j| -self.get(query, j, neuron)).collect();
        argmax(&vals)
    }

    /// Same scores, queries in `order`.
    pub fn reordered(&self, order: &[usize]) -> Scores {
        let w = self.n_options * self.n_neurons;
        let mut out = Scores::new(self.n_options, self.n_neurons);
        for &q in order {
            out.values.extend_from_slice(&self.values[q * w..(q + 1) * w]);
            out.correct.push(self.correct[q]);
        }
        out
    }
}

/// NeurGrad features of one split in one context.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureTable {
    pub n_layers: usize,
    pub d_ff: usize,
    /// NeurGrad of each candidate token.
    pub neurgrad: Scores,
    /// `[query][neuron]` activations at the answer position.
    pub activations: Vec<f64>,
    /// `[query][candidate]` model probabilities of the candidate tokens.
    pub candidate_probs: Vec<f64>,
}

impl FeatureTable {
    pub fn n_neurons(&self) -> usize {
        self.neurgrad.n_neurons
    }

    pub fn n_options(&self) -> usize {
        self.neurgrad.n_options
    }

    pub fn len(&self) -> usize {
        self.neurgrad.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neurgrad.is_empty()
    }

    pub fn correct(&self) -> &[usize] {
        &self.neurgrad.correct
    }

    pub fn neuron_id(&self, flat: usize) -> NeuronId {
        NeuronId::new(flat / self.d_ff, flat % self.d_ff)
    }

    pub fn activation(&self, query: usize, neuron: usize) -> f64 {
        self.activations[query * self.n_neurons() + neuron]
    }

    /// Per-neuron argmax-candidate features, `[query][neuron]`.
    pub fn argmax_features(&self) -> Vec<Vec<u8>> {
        (0..self.len())
            .map(|q| (0..self.n_neurons()).map(|k| self.neurgrad.argmax(q, k) as u8).collect())
            .collect()
    }

    /// LM-Prob predictions: the candidate with the highest probability.
    pub fn lm_predictions(&self) -> Vec<usize> {
        let n = self.n_options();
        self.candidate_probs.chunks(n).map(argmax).collect()
    }
}

/// One forward pass per query and one backward pass per candidate.
pub fn extract_features(model: &Model, set: &TaskSet, split: Split, ctx: &ContextSpec) -> Result<FeatureTable> {
    let cfg: &ModelConfig = model.config();
    let prompts = ctx.render_split(set, split)?;
    let tasks = set.split(split);
    let n_neurons = cfg.n_neurons();
    let n = set.n_options;
    let rows: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = prompts
        .par_iter()
        .zip(tasks.par_iter())
        .map(|(p, t)| -> Result<_> {
            let prep = model.prepare(p)?;
            let cands = candidates_in_style(t, ctx.candidate_style);
            let mut ng = Vec::with_capacity(n * n_neurons);
            for &c in &cands {
                ng.extend(estimate_prepared(&prep, c).iter().map(|e| e.neurgrad));
            }
            let probs = cands.iter().map(|&c| prep.output().prob(c)).collect();
            Ok((ng, prep.activations().as_slice().to_vec(), probs))
        })
        .collect::<Result<_>>()?;
    let mut neurgrad = Scores::new(n, n_neurons);
    let mut activations = Vec::with_capacity(tasks.len() * n_neurons);
    let mut candidate_probs = Vec::with_capacity(tasks.len() * n);
    for ((ng, act, probs), t) in rows.into_iter().zip(tasks) {
        neurgrad.push(&ng, t.correct)?;
        activations.extend(act);
        candidate_probs.extend(probs);
    }
    Ok(FeatureTable { n_layers: cfg.n_layers, d_ff: cfg.d_ff, neurgrad, activations, candidate_probs })
}

/// Fraction of predictions equal to the answers.
pub fn accuracy(predictions: &[usize], correct: &[usize]) -> Result<f64> {
    if predictions.len() != correct.len() || correct.is_empty() {
        return input_err("predictions and answers must be nonempty and of equal length");
    }
    Ok(predictions.iter().zip(correct).filter(|(p, c)| p == c).count() as f64 / correct.len() as f64)
}

/// Expected accuracy of uniform guessing.
pub fn rand_accuracy(n_options: usize) -> f64 {
    1.0 / n_options as f64
}

/// How opposed the NEGs of the first two candidates are.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Opposition {
    /// Fraction of (query, neuron) pairs whose two NEGs have opposite signs.
    pub opposite_fraction: f64,
    /// Pearson r between the two candidates' NEGs over all pairs.
    pub r: f64,
}

pub fn polarity_opposition(table: &FeatureTable) -> Result<Opposition> {
    if table.n_options() < 2 || table.is_empty() {
        return input_err("opposition needs at least two candidates and one query");
    }
    let mut a = Vec::with_capacity(table.len() * table.n_neurons());
    let mut b = Vec::with_capacity(a.capacity());
    for q in 0..table.len() {
        a.extend_from_slice(table.neurgrad.candidate(q, 0));
        b.extend_from_slice(table.neurgrad.candidate(q, 1));
    }
    let opposite = a.iter().zip(&b).filter(|(x, y)| **x * **y < 0.0).count() as f64 / a.len() as f64;
    Ok(Opposition { opposite_fraction: opposite, r: stats::pearson(&a, &b)? })
}

/// Mean |NeurGrad| over all queries, candidates and neurons.
pub fn mean_abs_neurgrad(table: &FeatureTable) -> f64 {
    let v = &table.neurgrad.values;
    v.iter().map(|x| x.abs()).sum::<f64>() / v.len().max(1) as f64
}

/// One row of the probe report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeSummary {
    pub task: String,
    pub rand: f64,
    pub lm_prob: f64,
    pub polar: f64,
    pub polar_size: usize,
    pub magn: f64,
    pub magn_size: usize,
    pub tree: f64,
    /// Distinct neurons used by any split of the forest.
    pub tree_features: usize,
    pub act: f64,
    pub act_size: usize,
}

/// Every probe and baseline fitted on one task in one context.
#[derive(Debug, Clone)]
pub struct ProbeSuite {
    pub summary: ProbeSummary,
    pub polar: VoteProbe,
    pub magn: VoteProbe,
    pub act: VoteProbe,
    pub forest: Forest,
    pub sizes: Vec<(VoteKind, SizeChoice)>,
    /// `None` when a candidate's NEGs have zero variance.
    pub opposition: Option<Opposition>,
}

/// Vote probes pick their size on valid; all accuracies are on test.
pub fn run_probes(model: &Model, set: &TaskSet, ctx: &ContextSpec, task: &str, forest: &ForestOptions) -> Result<ProbeSuite> {
    let train = extract_features(model, set, Split::Train, ctx)?;
    let valid = extract_features(model, set, Split::Valid, ctx)?;
    let test = extract_features(model, set, Split::Test, ctx)?;
    let mut probes = Vec::new();
    let mut sizes = Vec::new();
    for kind in [VoteKind::Polar, VoteKind::Magn, VoteKind::Act] {
        let mut p = VoteProbe::train(kind, &train)?;
        sizes.push((kind, select_neuron_size(&mut p, &valid)?));
        let acc = p.accuracy(&test)?;
        probes.push((p, acc));
    }
    let f = train_tree(&train.argmax_features(), train.correct(), set.n_options, forest)?;
    let tree = accuracy(&f.predict_all(&test.argmax_features())?, test.correct())?;
    let opposition = match polarity_opposition(&test) {
        Ok(o) => Some(o),
        Err(crate::Error::UndefinedCorrelation(_)) => None,
        Err(e) => return Err(e),
    };
    let [(polar, polar_acc), (magn, magn_acc), (act, act_acc)]: [(VoteProbe, f64); 3] = probes.try_into().expect("three probes");
    let summary = ProbeSummary {
        task: task.to_string(),
        rand: rand_accuracy(set.n_options),
        lm_prob: accuracy(&test.lm_predictions(), test.correct())?,
        polar: polar_acc,
        polar_size: polar.size,
        magn: magn_acc,
        magn_size: magn.size,
        tree,
        tree_features: f.used_features().len(),
        act: act_acc,
        act_size: act.size,
    };
    Ok(ProbeSuite { summary, polar, magn, act, forest: f, sizes, opposition })
}

pub fn write_summary_csv<W: std::io::Write>(out: W, rows: &[ProbeSummary]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// `probe,size,accuracy` for every tried size.
pub fn write_size_curves_csv<W: std::io::Write>(out: W, sizes: &[(VoteKind, SizeChoice)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["probe", "size", "valid_accuracy"])?;
    for (kind, choice) in sizes {
        for (size, acc) in &choice.curve {
            w.write_record([kind.name().to_string(), size.to_string(), acc.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}
