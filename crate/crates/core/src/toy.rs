//! Training the toy model on a task set or a token corpus.

use crate::error::{input_err, Result};
use crate::model::{Example, Model, ModelConfig, Prompt, TrainOptions, TrainReport};
use crate::tasks::{candidates_in_style, ContextSpec, Split, TaskSet, ANSWER};

pub enum ToyData<'a> {
    Tasks(&'a TaskSet),
    /// Token sequences trained with next-token targets everywhere.
    Corpus(&'a [Vec<usize>]),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyOptions {
    pub train: TrainOptions,
    /// Contexts every train task is rendered in. Validation uses the first.
    pub contexts: Vec<ContextSpec>,
}

impl Default for ToyOptions {
    fn default() -> Self {
        let mut contexts = vec![ContextSpec::zero_shot()];
        contexts.extend(ContextSpec::grid());
        for instruction in 1..crate::tasks::N_INSTRUCTIONS {
            for candidate_style in 0..crate::tasks::N_CANDIDATE_STYLES {
                contexts.push(ContextSpec { instruction, demos: None, candidate_style });
            }
        }
        contexts.push(ContextSpec { candidate_style: 1, ..ContextSpec::zero_shot() });
        let train = TrainOptions { steps: 200, label_smoothing: 0.1, ..TrainOptions::default() };
        ToyOptions { train, contexts }
    }
}

/// Training example for a rendered prompt: the answer after every `A:` cue
/// (demonstrations included) is a target.
pub fn prompt_example(prompt: &Prompt, candidates: Vec<usize>) -> Example {
    let last = prompt.answer_position;
    let tokens = prompt.tokens[..=last].to_vec();
    let mut targets: Vec<(usize, usize)> =
        (0..last).filter(|&i| tokens[i] == ANSWER).map(|i| (i, tokens[i + 1])).collect();
    targets.push((last, prompt.target_token));
    Example { tokens, targets, candidates }
}

/// Final-answer-only example, scored by LM-Prob over `candidates`.
fn heldout_example(prompt: &Prompt, candidates: Vec<usize>) -> Example {
    let last = prompt.answer_position;
    Example { tokens: prompt.tokens[..=last].to_vec(), targets: vec![(last, prompt.target_token)], candidates }
}

/// Rendered examples for `split` in each of `contexts`.
pub fn task_examples(set: &TaskSet, split: Split, contexts: &[ContextSpec], heldout: bool) -> Result<Vec<Example>> {
    let mut out = Vec::new();
    for ctx in contexts {
        let prompts = ctx.render_split(set, split)?;
        for (p, t) in prompts.iter().zip(set.split(split)) {
            let cands = candidates_in_style(t, ctx.candidate_style);
            out.push(if heldout { heldout_example(p, cands) } else { prompt_example(p, cands) });
        }
    }
    Ok(out)
}

/// Trains a freshly initialized model. For tasks, the report's held-out
/// accuracy is LM-Prob on the validation split in the first context; for a
/// corpus it is next-token accuracy on the corpus itself.
pub fn train_toy(data: ToyData<'_>, config: &ModelConfig, opts: &ToyOptions) -> Result<(Model, TrainReport)> {
    let model = Model::init(config.clone())?;
    let (train, heldout) = match data {
        ToyData::Tasks(set) => {
            if opts.contexts.is_empty() {
                return input_err("at least one training context is required");
            }
            let train = task_examples(set, Split::Train, &opts.contexts, false)?;
            let heldout = if set.valid.is_empty() {
                Vec::new()
            } else {
                task_examples(set, Split::Valid, &opts.contexts[..1], true)?
            };
            (train, heldout)
        }
        ToyData::Corpus(seqs) => {
            let ex: Vec<Example> = seqs.iter().filter(|s| s.len() >= 2).map(|s| Example::from_sequence(s.clone())).collect();
            (ex.clone(), ex)
        }
    };
    model.train(&train, &heldout, &opts.train)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::{generate_synthetic, TaskGenSpec, TaskKind};

    #[test]
    fn demonstration_answers_are_targets() {
        let set = generate_synthetic(&TaskGenSpec { kind: TaskKind::CopyMatch, n_options: 2, n_examples: 160, seed: 1 }).unwrap();
        let ctx = ContextSpec { demos: Some(0), ..ContextSpec::zero_shot() };
        let ex = task_examples(&set, Split::Train, &[ctx], false).unwrap();
        assert!(ex.iter().all(|e| e.targets.len() == 3));
        let e = &ex[0];
        for &(pos, tok) in &e.targets[..2] {
            assert_eq!(e.tokens[pos], ANSWER);
            assert_eq!(e.tokens[pos + 1], tok);
        }
    }

    #[test]
    fn memorizes_a_bigram_corpus() {
        let cfg = ModelConfig { n_layers: 1, d_model: 16, d_ff: 32, n_heads: 2, vocab_size: 12, max_seq: 12, seed: 3, ..Default::default() };
        let corpus: Vec<Vec<usize>> = (0..4).map(|s| (0..10).map(|i| (s + 3 * i) % 12).collect()).collect();
        let opts = ToyOptions { train: TrainOptions { steps: 300, learning_rate: 1e-2, batch_size: 4, ..Default::default() }, contexts: vec![] };
        let (_, report) = train_toy(ToyData::Corpus(&corpus), &cfg, &opts).unwrap();
        assert!(report.heldout_accuracy >= 0.95, "{}", report.heldout_accuracy);
    }
}
