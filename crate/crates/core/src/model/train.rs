use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::params::round_to_f32;
use super::{argmax, Model};
use crate::error::{input_err, Error, Result};

/// One training sequence with next-token targets at chosen positions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub tokens: Vec<usize>,
    /// `(position, token)`: the distribution read at `position` should put
    /// its mass on `token`.
    pub targets: Vec<(usize, usize)>,
    /// When non-empty, accuracy is judged by argmax over these tokens only
    /// (LM-Prob); otherwise over the whole vocabulary.
    pub candidates: Vec<usize>,
}

impl Example {
    /// Next-token targets at every position of a corpus sequence.
    pub fn from_sequence(tokens: Vec<usize>) -> Self {
        let targets = (0..tokens.len().saturating_sub(1)).map(|i| (i, tokens[i + 1])).collect();
        let mut tokens = tokens;
        tokens.pop();
        Example { tokens, targets, candidates: Vec::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    /// Mass moved from the target to the example's other candidates.
    pub label_smoothing: f64,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions { steps: 600, learning_rate: 3e-3, batch_size: 32, grad_clip: 1.0, label_smoothing: 0.0, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean per-target cross-entropy of each step's batch.
    pub losses: Vec<f64>,
    pub final_loss: f64,
    /// Accuracy on the held-out examples (NaN when none were given).
    pub heldout_accuracy: f64,
}

// Examples per gradient work unit. Fixed so the summation order, and hence
// the result, does not depend on the thread count.
const CHUNK: usize = 4;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Model {
    /// Adam on mean cross-entropy. Deterministic for a fixed seed regardless
    /// of the rayon pool size. Parameters are rounded to `f32` at the end.
    pub fn train(&self, data: &[Example], heldout: &[Example], opts: &TrainOptions) -> Result<(Model, TrainReport)> {
        if data.is_empty() {
            return input_err("training data is empty");
        }
        if !(0.0..1.0).contains(&opts.label_smoothing) {
            return input_err("label_smoothing must be in [0, 1)");
        }
        if opts.batch_size == 0 {
            return input_err("batch_size must be at least 1");
        }
        let cfg = self.config();
        for ex in data.iter().chain(heldout) {
            validate_example(ex, cfg.vocab_size, cfg.max_seq)?;
        }

        let mut model = self.clone();
        let n = model.n_params();
        let mut m = vec![0.0; n];
        let mut v = vec![0.0; n];
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut cursor = order.len();
        let mut losses = Vec::with_capacity(opts.steps);

        for step in 0..opts.steps {
            let mut batch = Vec::with_capacity(opts.batch_size);
            while batch.len() < opts.batch_size {
                if cursor == order.len() {
                    order.shuffle(&mut rng);
                    cursor = 0;
                }
                batch.push(order[cursor]);
                cursor += 1;
            }

            let parts: Vec<(f64, usize, Vec<f64>)> = batch
                .par_chunks(CHUNK)
                .map(|chunk| {
                    let mut g = vec![0.0; n];
                    let mut loss = 0.0;
                    let mut count = 0;
                    for &i in chunk {
                        let ex = &data[i];
                        loss += model.cross_entropy_backward(&ex.tokens, &ex.targets, Some((&ex.candidates, opts.label_smoothing)), &mut g);
                        count += ex.targets.len();
                    }
                    (loss, count, g)
                })
                .collect();
            let mut grad = vec![0.0; n];
            let mut loss = 0.0;
            let mut count = 0;
            for (l, c, g) in &parts {
                loss += l;
                count += c;
                for (a, b) in grad.iter_mut().zip(g) {
                    *a += b;
                }
            }
            let count = count.max(1) as f64;
            let loss = loss / count;
            if !loss.is_finite() {
                return Err(Error::Divergence { step, loss });
            }
            losses.push(loss);
            grad.iter_mut().for_each(|g| *g /= count);

            if opts.grad_clip > 0.0 {
                let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
                if norm > opts.grad_clip {
                    let s = opts.grad_clip / norm;
                    grad.iter_mut().for_each(|g| *g *= s);
                }
            }
            let t = (step + 1) as i32;
            let bc1 = 1.0 - BETA1.powi(t);
            let bc2 = 1.0 - BETA2.powi(t);
            for i in 0..n {
                m[i] = BETA1 * m[i] + (1.0 - BETA1) * grad[i];
                v[i] = BETA2 * v[i] + (1.0 - BETA2) * grad[i] * grad[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                model.data[i] -= opts.learning_rate * mh / (vh.sqrt() + ADAM_EPS);
            }
            if model.data.iter().any(|x| !x.is_finite()) {
                return Err(Error::Divergence { step, loss: f64::NAN });
            }
        }
        round_to_f32(&mut model.data);

        let heldout_accuracy = if heldout.is_empty() { f64::NAN } else { model.accuracy(heldout)? };
        let final_loss = losses.last().copied().unwrap_or(f64::NAN);
        Ok((model, TrainReport { losses, final_loss, heldout_accuracy }))
    }

    /// Fraction of targets whose argmax (over the example's candidates, or
    /// the vocabulary) is the target token.
    pub fn accuracy(&self, data: &[Example]) -> Result<f64> {
        let cfg = self.config();
        let v = cfg.vocab_size;
        let (hits, total) = data
            .par_iter()
            .map(|ex| -> Result<(usize, usize)> {
                validate_example(ex, v, cfg.max_seq)?;
                let cache = self.forward_full(&ex.tokens, None);
                let mut hits = 0;
                for &(pos, tok) in &ex.targets {
                    let p = &cache.probs[pos * v..(pos + 1) * v];
                    let pred = if ex.candidates.is_empty() {
                        argmax(p)
                    } else {
                        let scores: Vec<f64> = ex.candidates.iter().map(|&c| p[c]).collect();
                        ex.candidates[argmax(&scores)]
                    };
                    hits += usize::from(pred == tok);
                }
                Ok((hits, ex.targets.len()))
            })
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .fold((0, 0), |(a, b), (c, d)| (a + c, b + d));
        if total == 0 {
            return input_err("no targets to score");
        }
        Ok(hits as f64 / total as f64)
    }
}

fn validate_example(ex: &Example, vocab: usize, max_seq: usize) -> Result<()> {
    if ex.tokens.is_empty() || ex.tokens.len() > max_seq {
        return input_err(format!("example length {} outside 1..={max_seq}", ex.tokens.len()));
    }
    if ex.tokens.iter().chain(ex.candidates.iter()).any(|&t| t >= vocab) {
        return input_err("token id out of vocabulary");
    }
    for &(pos, tok) in &ex.targets {
        if pos >= ex.tokens.len() || tok >= vocab {
            return input_err(format!("target ({pos}, {tok}) out of range"));
        }
    }
    Ok(())
}
