//! Ranked-neuron majority-vote probes.
//!
//! Polar-Probe learns one global polarity per neuron: the sign its NEG for
//! the correct candidate takes most often on the train split. At prediction
//! time every neuron votes for each candidate whose NEG has that sign.
//!
//! Magn-Probe learns whether a neuron's NEG is most often highest or lowest
//! for the correct candidate, and votes for the candidate at that extreme.
//!
//! The activation baseline runs the Magn machinery on per-candidate scores
//! `-|a - mu_j|`, where `mu_j` is the neuron's mean train activation over
//! queries whose answer is option `j`.

use std::borrow::Cow;

use serde::{Deserialize, Serialize};

use super::{accuracy, FeatureTable, Scores};
use crate::error::{input_err, Error, Result};
use crate::model::argmax;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VoteKind {
    Polar,
    Magn,
    Act,
}

impl VoteKind {
    pub fn name(self) -> &'static str {
        match self {
            VoteKind::Polar => "polar",
            VoteKind::Magn => "magn",
            VoteKind::Act => "act",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuronStat {
    /// Flat index `layer * d_ff + neuron`.
    pub neuron: usize,
    pub consistency: f64,
    /// Polar: global polarity (+1 / -1). Magn and Act: +1 highest, -1 lowest.
    pub rule: i8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoteProbe {
    pub kind: VoteKind,
    pub n_options: usize,
    /// Non-increasing consistency; ties in flat-index order (Polar first
    /// prefers neurons whose wrong candidates more often take the other sign).
    pub ranking: Vec<NeuronStat>,
    /// Number of top-ranked neurons that vote.
    pub size: usize,
    /// Act only: class-conditional mean activations, `[option][neuron]`.
    pub act_means: Option<Vec<f64>>,
}

fn check_train(scores: &Scores) -> Result<()> {
    if scores.is_empty() {
        return input_err("no training features");
    }
    let first = scores.correct[0];
    if scores.correct.iter().all(|&c| c == first) {
        return Err(Error::Degenerate("train split has a single answer class".into()));
    }
    Ok(())
}

fn rank(mut stats: Vec<NeuronStat>) -> Vec<NeuronStat> {
    stats.sort_by(|a, b| b.consistency.total_cmp(&a.consistency).then(a.neuron.cmp(&b.neuron)));
    stats
}

pub fn train_polar(scores: &Scores) -> Result<VoteProbe> {
    check_train(scores)?;
    let n = scores.len() as f64;
    let mut keyed: Vec<(NeuronStat, usize)> = (0..scores.n_neurons)
        .map(|k| {
            let (mut pos, mut neg) = (0usize, 0usize);
            for q in 0..scores.len() {
                let x = scores.get(q, scores.correct[q], k);
                pos += usize::from(x > 0.0);
                neg += usize::from(x < 0.0);
            }
            let rule: i8 = if pos >= neg { 1 } else { -1 };
            // wrong candidates whose sign disagrees with the rule break ties
            let mut against = 0usize;
            for q in 0..scores.len() {
                for c in (0..scores.n_options).filter(|&c| c != scores.correct[q]) {
                    against += usize::from(scores.get(q, c, k) * f64::from(rule) < 0.0);
                }
            }
            (NeuronStat { neuron: k, consistency: pos.max(neg) as f64 / n, rule }, against)
        })
        .collect();
    keyed.sort_by(|(a, x), (b, y)| b.consistency.total_cmp(&a.consistency).then(y.cmp(x)).then(a.neuron.cmp(&b.neuron)));
    let ranking = keyed.into_iter().map(|(s, _)| s).collect();
    Ok(VoteProbe { kind: VoteKind::Polar, n_options: scores.n_options, ranking, size: scores.n_neurons, act_means: None })
}

pub fn train_magn(scores: &Scores) -> Result<VoteProbe> {
    check_train(scores)?;
    Ok(VoteProbe {
        kind: VoteKind::Magn,
        n_options: scores.n_options,
        ranking: magn_stats(scores),
        size: scores.n_neurons,
        act_means: None,
    })
}

fn magn_stats(scores: &Scores) -> Vec<NeuronStat> {
    let n = scores.len() as f64;
    let stats = (0..scores.n_neurons)
        .map(|k| {
            let (mut hi, mut lo) = (0usize, 0usize);
            for q in 0..scores.len() {
                hi += usize::from(scores.argmax(q, k) == scores.correct[q]);
                lo += usize::from(scores.argmin(q, k) == scores.correct[q]);
            }
            let rule = if hi >= lo { 1 } else { -1 };
            NeuronStat { neuron: k, consistency: hi.max(lo) as f64 / n, rule }
        })
        .collect();
    rank(stats)
}

/// `[option][neuron]` mean activation over train queries answered by each
/// option.
fn class_means(table: &FeatureTable) -> Vec<f64> {
    let (n, k) = (table.n_options(), table.n_neurons());
    let mut sums = vec![0.0; n * k];
    let mut counts = vec![0usize; n];
    for (q, &c) in table.correct().iter().enumerate() {
        counts[c] += 1;
        for j in 0..k {
            sums[c * k + j] += table.activation(q, j);
        }
    }
    for c in 0..n {
        for j in 0..k {
            sums[c * k + j] /= counts[c].max(1) as f64;
        }
    }
    sums
}

fn act_scores(table: &FeatureTable, means: &[f64]) -> Result<Scores> {
    let (n, k) = (table.n_options(), table.n_neurons());
    if means.len() != n * k {
        return input_err("activation means do not match the feature table");
    }
    let mut s = Scores::new(n, k);
    let mut row = vec![0.0; n * k];
    for q in 0..table.len() {
        for c in 0..n {
            for j in 0..k {
                row[c * k + j] = -(table.activation(q, j) - means[c * k + j]).abs();
            }
        }
        s.push(&row, table.correct()[q])?;
    }
    Ok(s)
}

pub fn train_act(table: &FeatureTable) -> Result<VoteProbe> {
    check_train(&table.neurgrad)?;
    let means = class_means(table);
    let scores = act_scores(table, &means)?;
    Ok(VoteProbe {
        kind: VoteKind::Act,
        n_options: scores.n_options,
        ranking: magn_stats(&scores),
        size: scores.n_neurons,
        act_means: Some(means),
    })
}

impl VoteProbe {
    pub fn train(kind: VoteKind, table: &FeatureTable) -> Result<VoteProbe> {
        match kind {
            VoteKind::Polar => train_polar(&table.neurgrad),
            VoteKind::Magn => train_magn(&table.neurgrad),
            VoteKind::Act => train_act(table),
        }
    }

    /// The scores this probe votes over.
    pub fn scores<'a>(&self, table: &'a FeatureTable) -> Result<Cow<'a, Scores>> {
        match (self.kind, &self.act_means) {
            (VoteKind::Act, Some(m)) => Ok(Cow::Owned(act_scores(table, m)?)),
            (VoteKind::Act, None) => input_err("activation probe lacks its class means"),
            _ => Ok(Cow::Borrowed(&table.neurgrad)),
        }
    }

    /// Top-`size` neurons, best first.
    pub fn neurons(&self) -> &[NeuronStat] {
        &self.ranking[..self.size.min(self.ranking.len())]
    }

    /// Prediction for one query using `voters`.
    pub fn predict_with(&self, scores: &Scores, query: usize, voters: &[NeuronStat]) -> Result<usize> {
        if scores.n_options != self.n_options {
            return input_err("feature option count does not match the probe");
        }
        let mut votes = vec![0.0; self.n_options];
        for st in voters {
            if st.neuron >= scores.n_neurons {
                return input_err(format!("no feature for neuron {}", st.neuron));
            }
            match self.kind {
                VoteKind::Polar => {
                    for (j, v) in votes.iter_mut().enumerate() {
                        let x = scores.get(query, j, st.neuron);
                        if (st.rule > 0 && x > 0.0) || (st.rule < 0 && x < 0.0) {
                            *v += 1.0;
                        }
                    }
                }
                VoteKind::Magn | VoteKind::Act => {
                    let j = if st.rule > 0 { scores.argmax(query, st.neuron) } else { scores.argmin(query, st.neuron) };
                    votes[j] += 1.0;
                }
            }
        }
        Ok(argmax(&votes))
    }

    pub fn predict(&self, scores: &Scores, query: usize) -> Result<usize> {
        self.predict_with(scores, query, self.neurons())
    }

    pub fn predict_all(&self, table: &FeatureTable) -> Result<Vec<usize>> {
        let s = self.scores(table)?;
        (0..s.len()).map(|q| self.predict(&s, q)).collect()
    }

    pub fn accuracy(&self, table: &FeatureTable) -> Result<f64> {
        accuracy(&self.predict_all(table)?, table.correct())
    }

    /// Accuracy when only ranks `start..end` vote.
    pub fn window_accuracy(&self, table: &FeatureTable, start: usize, end: usize) -> Result<f64> {
        let end = end.min(self.ranking.len());
        if start >= end {
            return input_err("empty neuron window");
        }
        let s = self.scores(table)?;
        let preds = (0..s.len())
            .map(|q| self.predict_with(&s, q, &self.ranking[start..end]))
            .collect::<Result<Vec<_>>>()?;
        accuracy(&preds, table.correct())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeChoice {
    pub size: usize,
    pub accuracy: f64,
    /// `(size, accuracy)` for every candidate size.
    pub curve: Vec<(usize, f64)>,
}

/// Tries the top `2^n` neurons for every `2^n <= ranking length` on `valid`,
/// sets the probe to the most accurate size (ties to the smaller) and
/// returns the choice.
pub fn select_neuron_size(probe: &mut VoteProbe, valid: &FeatureTable) -> Result<SizeChoice> {
    let total = probe.ranking.len();
    if total == 0 {
        return input_err("probe has no ranked neurons");
    }
    let mut curve = Vec::new();
    let mut size = 1;
    while size <= total {
        curve.push((size, probe.window_accuracy(valid, 0, size)?));
        size *= 2;
    }
    let (size, acc) = curve.iter().copied().fold((0, f64::NEG_INFINITY), |best, c| if c.1 > best.1 { c } else { best });
    probe.size = size;
    Ok(SizeChoice { size, accuracy: acc, curve })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Binary scores from a closure `(query, candidate, neuron) -> value`.
    fn scores(n_queries: usize, n_neurons: usize, f: impl Fn(usize, usize, usize) -> f64) -> Scores {
        let mut s = Scores::new(2, n_neurons);
        for q in 0..n_queries {
            let row: Vec<f64> = (0..2).flat_map(|c| (0..n_neurons).map(move |k| (c, k))).map(|(c, k)| f(q, c, k)).collect();
            s.push(&row, q % 2).unwrap();
        }
        s
    }

    fn table(s: Scores) -> FeatureTable {
        let n = s.len() * s.n_neurons;
        FeatureTable { n_layers: 1, d_ff: s.n_neurons, activations: vec![0.0; n], candidate_probs: vec![0.5; s.len() * 2], neurgrad: s }
    }

    #[test]
    fn always_positive_for_the_answer_ranks_first() {
        // neuron 2 is positive exactly for the correct candidate
        let s = scores(40, 4, |q, c, k| if k == 2 { if c == q % 2 { 1.0 } else { -1.0 } } else { 1.0 + c as f64 });
        let p = train_polar(&s).unwrap();
        assert_eq!(p.ranking[0].neuron, 2);
        assert_eq!(p.ranking[0].consistency, 1.0);
        assert_eq!(p.ranking[0].rule, 1);
    }

    #[test]
    fn coin_flip_polarity_is_near_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 2000;
        let flips: Vec<f64> = (0..n * 2).map(|_| if rng.random_bool(0.5) { 1.0 } else { -1.0 }).collect();
        let s = scores(n, 1, |q, c, _| flips[q * 2 + c]);
        let p = train_polar(&s).unwrap();
        // dominant side of 2000 fair flips: within 0.5 + 3 sd
        assert!(p.ranking[0].consistency >= 0.5 && p.ranking[0].consistency <= 0.5 + 3.0 * (0.25f64 / n as f64).sqrt());
    }

    #[test]
    fn identical_neurons_rank_in_index_order() {
        let s = scores(10, 5, |q, c, _| if c == q % 2 { 0.5 } else { 0.2 });
        for p in [train_polar(&s).unwrap(), train_magn(&s).unwrap()] {
            let order: Vec<usize> = p.ranking.iter().map(|r| r.neuron).collect();
            assert_eq!(order, vec![0, 1, 2, 3, 4]);
        }
    }

    #[test]
    fn single_class_is_degenerate() {
        let mut s = Scores::new(2, 1);
        s.push(&[1.0, 0.0], 0).unwrap();
        s.push(&[1.0, 0.0], 0).unwrap();
        assert!(matches!(train_magn(&s), Err(Error::Degenerate(_))));
    }

    #[test]
    fn vote_rules_and_ties() {
        let probe = |kind, rules: &[i8]| VoteProbe {
            kind,
            n_options: 2,
            ranking: rules.iter().enumerate().map(|(k, &r)| NeuronStat { neuron: k, consistency: 1.0, rule: r }).collect(),
            size: rules.len(),
            act_means: None,
        };
        let mut s = Scores::new(2, 2);
        // neuron 0 favours candidate 1, neuron 1 favours candidate 0
        s.push(&[-1.0, 2.0, 1.0, -2.0], 0).unwrap();
        let one = VoteProbe { size: 1, ..probe(VoteKind::Magn, &[1, 1]) };
        assert_eq!(one.predict(&s, 0).unwrap(), 1);
        assert_eq!(probe(VoteKind::Magn, &[1, 1]).predict(&s, 0).unwrap(), 0);
        assert_eq!(probe(VoteKind::Polar, &[1, 1]).predict(&s, 0).unwrap(), 0);
        let mut narrow = Scores::new(2, 1);
        narrow.push(&[1.0, 2.0], 0).unwrap();
        assert!(probe(VoteKind::Magn, &[1, 1]).predict(&narrow, 0).is_err());
    }

    #[test]
    fn rescaling_features_keeps_predictions() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let vals: Vec<f64> = (0..60 * 2 * 6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let s = scores(60, 6, |q, c, k| vals[(q * 2 + c) * 6 + k]);
        let scaled = Scores { values: s.values.iter().map(|v| v * 7.5).collect(), ..s.clone() };
        for kind in [VoteKind::Polar, VoteKind::Magn] {
            let a = VoteProbe::train(kind, &table(s.clone())).unwrap();
            let b = VoteProbe::train(kind, &table(scaled.clone())).unwrap();
            assert_eq!(a.predict_all(&table(s.clone())).unwrap(), b.predict_all(&table(scaled.clone())).unwrap());
        }
    }

    #[test]
    fn flat_accuracy_picks_size_one() {
        let s = scores(20, 8, |_, c, _| c as f64);
        let t = table(s);
        let mut p = train_magn(&t.neurgrad).unwrap();
        let choice = select_neuron_size(&mut p, &t).unwrap();
        assert_eq!(choice.size, 1);
        assert_eq!(choice.curve.iter().map(|c| c.0).collect::<Vec<_>>(), vec![1, 2, 4, 8]);
    }

    #[test]
    fn a_perfect_neuron_is_found_alone() {
        let s = scores(20, 8, |q, c, k| if k == 5 { if c == q % 2 { 1.0 } else { 0.0 } } else { c as f64 });
        let t = table(s);
        let mut p = train_magn(&t.neurgrad).unwrap();
        let choice = select_neuron_size(&mut p, &t).unwrap();
        assert_eq!((choice.size, choice.accuracy), (1, 1.0));
        assert_eq!(p.neurons()[0].neuron, 5);
    }
}
