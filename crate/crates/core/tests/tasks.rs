use neglab::tasks::*;
use proptest::prelude::*;

fn kind() -> impl Strategy<Value = TaskKind> {
    prop_oneof![Just(TaskKind::Parity), Just(TaskKind::LexiconLookup), Just(TaskKind::CopyMatch)]
}

fn spec() -> impl Strategy<Value = TaskGenSpec> {
    (kind(), 2usize..=5, 1usize..6, any::<u64>())
        .prop_map(|(kind, n_options, blocks, seed)| TaskGenSpec { kind, n_options, n_examples: n_options * 8 * blocks, seed })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn generated_sets_are_balanced(s in spec()) {
        let set = generate_synthetic(&s).unwrap();
        prop_assert!(set.imbalance().is_empty());
        let per = s.n_examples / s.n_options;
        prop_assert_eq!(set.correct_counts(Split::Train), vec![per * 6 / 8; s.n_options]);
        prop_assert_eq!(set.correct_counts(Split::Valid), vec![per / 8; s.n_options]);
        prop_assert_eq!(set.correct_counts(Split::Test), vec![per / 8; s.n_options]);
        for t in set.split(Split::Train) {
            prop_assert!(t.validate().is_ok());
        }
    }

    #[test]
    fn distinct_tasks_render_distinct_prompts(s in spec(), style in 0usize..2, instruction in 0usize..3) {
        let set = generate_synthetic(&s).unwrap();
        let ctx = RenderContext { instruction, candidate_style: Some(style) };
        let mut seen = std::collections::HashMap::new();
        for t in set.split(Split::Train) {
            let p = render_prompt(t, &[], ctx).unwrap();
            prop_assert_eq!(p.tokens[p.answer_position], ANSWER);
            prop_assert_eq!(p.target_token, candidate_token(style, t.correct));
            if let Some(prev) = seen.insert(p.tokens.clone(), t.clone()) {
                prop_assert_eq!(&prev, t);
            }
        }
    }

    #[test]
    fn wire_format_round_trips(s in spec()) {
        let set = generate_synthetic(&s).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tasks.jsonl");
        export(&set, &path).unwrap();
        let back = ingest(&path).unwrap();
        prop_assert!(back.imbalance.is_empty());
        prop_assert_eq!(back.tasks, set);
    }
}

/// Multinomial logistic regression on bag-of-query-token counts.
fn logistic_accuracy(set: &TaskSet, vocab: usize) -> f64 {
    let n = set.n_options;
    let feats = |t: &ChoiceTask| {
        let mut x = vec![0.0; vocab];
        for &tok in &t.query {
            x[tok] += 1.0;
        }
        x
    };
    let train: Vec<(Vec<f64>, usize)> = set.train.iter().map(|t| (feats(t), t.correct)).collect();
    let mut w = vec![vec![0.0; vocab + 1]; n];
    let lr = 0.5;
    for _ in 0..200 {
        let mut grad = vec![vec![0.0; vocab + 1]; n];
        for (x, y) in &train {
            let z: Vec<f64> = w.iter().map(|wj| wj[vocab] + x.iter().zip(wj).map(|(a, b)| a * b).sum::<f64>()).collect();
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            for j in 0..n {
                let d = e[j] / s - f64::from(u8::from(j == *y));
                for k in 0..vocab {
                    grad[j][k] += d * x[k];
                }
                grad[j][vocab] += d;
            }
        }
        for j in 0..n {
            for k in 0..=vocab {
                w[j][k] -= lr * grad[j][k] / train.len() as f64;
            }
        }
    }
    let hits = set
        .test
        .iter()
        .filter(|t| {
            let x = feats(t);
            let z: Vec<f64> = w.iter().map(|wj| wj[vocab] + x.iter().zip(wj).map(|(a, b)| a * b).sum::<f64>()).collect();
            (0..n).max_by(|&a, &b| z[a].total_cmp(&z[b]).then(b.cmp(&a))).unwrap() == t.correct
        })
        .count();
    hits as f64 / set.test.len() as f64
}

#[test]
fn copy_match_is_learnable_from_query_tokens() {
    for n_options in [2, 3, 5] {
        let set = generate_synthetic(&TaskGenSpec { kind: TaskKind::CopyMatch, n_options, n_examples: n_options * 320, seed: 7 }).unwrap();
        let acc = logistic_accuracy(&set, MIN_VOCAB);
        assert!(acc >= 0.95, "{n_options} options: {acc}");
    }
}

#[test]
fn lexicon_lookup_is_learnable_from_query_tokens() {
    let set = generate_synthetic(&TaskGenSpec { kind: TaskKind::LexiconLookup, n_options: 2, n_examples: 1600, seed: 3 }).unwrap();
    let acc = logistic_accuracy(&set, MIN_VOCAB);
    assert!(acc >= 0.95, "{acc}");
}

#[test]
fn imbalanced_files_are_reported_not_repaired() {
    let mut set = generate_synthetic(&TaskGenSpec { kind: TaskKind::Parity, n_options: 2, n_examples: 160, seed: 1 }).unwrap();
    set.test.retain(|t| t.correct == 0);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.jsonl");
    export(&set, &path).unwrap();
    let back = ingest(&path).unwrap();
    assert_eq!(back.imbalance.len(), 1);
    assert_eq!(back.imbalance[0].split, Split::Test);
    assert_eq!(back.tasks.test.len(), 10);
    assert!(back.tasks.balanced().imbalance().is_empty());
}
