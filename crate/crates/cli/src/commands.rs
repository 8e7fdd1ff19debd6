use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use neglab::control::{self, AttributionMethod};
use neglab::estimators::{self, GradientEstimate, Method, TimingOptions};
use neglab::intervene::{self, SweepSpec};
use neglab::metrics::{self, ProbeFamily};
use neglab::model::{self, Model, ModelConfig, Nonlinearity, NeuronId, PatchMode, Prompt, TrainOptions};
use neglab::probes::{self, io::Probe, ForestOptions, MaxFeatures, VoteKind};
use neglab::stats;
use neglab::tasks::{self, ContextSpec, Split, TaskGenSpec, TaskKind, TaskSet};
use neglab::toy::{self, ToyData, ToyOptions};

use crate::params::*;
use crate::run::RunDir;
use crate::UsageError;

pub const MODEL_FILE: &str = "model.nglb";
pub const TASK_FILE: &str = "tasks.jsonl";

fn required<'a>(p: &'a Path, flag: &str) -> anyhow::Result<&'a Path> {
    if p.as_os_str().is_empty() {
        return Err(UsageError(format!("--{flag} is required")).into());
    }
    Ok(p)
}

/// A file, or a run directory holding `default`.
fn resolve_file(p: &Path, default: &str) -> PathBuf {
    if p.is_dir() {
        p.join(default)
    } else {
        p.to_path_buf()
    }
}

fn load_model(p: &Path, run: &mut RunDir) -> anyhow::Result<Model> {
    let path = resolve_file(required(p, "model")?, MODEL_FILE);
    run.input(&path)?;
    Ok(model::load_model(&path).with_context(|| format!("loading {}", path.display()))?)
}

/// Reads a task file; an imbalanced file is a module error.
fn load_tasks(p: &Path, run: &mut RunDir) -> anyhow::Result<TaskSet> {
    let path = resolve_file(required(p, "tasks")?, TASK_FILE);
    run.input(&path)?;
    let ing = tasks::ingest(&path).with_context(|| format!("loading {}", path.display()))?;
    if !ing.imbalance.is_empty() {
        let issues: Vec<String> = ing.imbalance.iter().map(|i| i.to_string()).collect();
        bail!("task file is not balanced: {}", issues.join("; "));
    }
    Ok(ing.tasks)
}

fn split(s: &str) -> anyhow::Result<Split> {
    Ok(match s {
        "train" => Split::Train,
        "valid" => Split::Valid,
        "test" => Split::Test,
        _ => bail!("unknown split {s:?}"),
    })
}

fn mode(s: &str) -> anyhow::Result<PatchMode> {
    Ok(match s {
        "sign-relative" => PatchMode::SignRelativeDelta,
        "absolute" => PatchMode::AbsoluteDelta,
        _ => bail!("unknown shift mode {s:?} (sign-relative or absolute)"),
    })
}

fn max_features(s: &str) -> anyhow::Result<MaxFeatures> {
    Ok(match s {
        "sqrt" => MaxFeatures::Sqrt,
        "all" => MaxFeatures::All,
        _ => bail!("unknown max-features {s:?} (sqrt or all)"),
    })
}

/// The first `n` prompts of a split in a context.
fn prompts(set: &TaskSet, context: &str, split_name: &str, n: usize) -> anyhow::Result<Vec<Prompt>> {
    let ctx: ContextSpec = context.parse()?;
    let mut ps = ctx.render_split(set, split(split_name)?)?;
    if n > ps.len() {
        bail!("{n} prompts requested, the {split_name} split has {}", ps.len());
    }
    ps.truncate(n);
    Ok(ps)
}

/// Per-item seed derived from the run seed.
fn derive(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ b.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn csv_rows<W: std::io::Write>(out: W, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> neglab::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.flush()?;
    Ok(())
}

fn gen_spec(kind: &str, n_options: usize, n_examples: usize, seed: u64) -> anyhow::Result<TaskGenSpec> {
    Ok(TaskGenSpec { kind: kind.parse::<TaskKind>()?, n_options, n_examples, seed })
}

fn write_balance(run: &mut RunDir, set: &TaskSet) -> anyhow::Result<()> {
    let mut rows = Vec::new();
    for s in Split::ALL {
        for (j, c) in set.correct_counts(s).into_iter().enumerate() {
            rows.push(vec![s.name().to_string(), j.to_string(), c.to_string()]);
        }
    }
    run.write_with("balance.csv", |b| csv_rows(b, &["split", "option", "count"], rows))
}

pub fn gen_tasks(p: &GenTasksParams, seed: u64, run: &mut RunDir) -> anyhow::Result<()> {
    let set = tasks::generate_synthetic(&gen_spec(&p.kind, p.n_options, p.n_examples, seed)?)?;
    if !set.imbalance().is_empty() {
        bail!("generated set failed the balance check");
    }
    tasks::export(&set, &run.output(TASK_FILE))?;
    write_balance(run, &set)
}

pub fn train(p: &TrainParams, seed: u64, run: &mut RunDir) -> anyhow::Result<()> {
    let set = if p.tasks.as_os_str().is_empty() {
        let set = tasks::generate_synthetic(&gen_spec(&p.kind, p.n_options, p.n_examples, seed)?)?;
        tasks::export(&set, &run.output(TASK_FILE))?;
        set
    } else {
        load_tasks(&p.tasks, run)?
    };
    let nonlinearity = match p.nonlinearity.as_str() {
        "gelu" => Nonlinearity::Gelu,
        "relu" => Nonlinearity::Relu,
        s => bail!("unknown nonlinearity {s:?}"),
    };
    let config = ModelConfig {
        n_layers: p.n_layers,
        d_model: p.d_model,
        d_ff: p.d_ff,
        n_heads: p.n_heads,
        vocab_size: p.vocab_size,
        max_seq: p.max_seq,
        nonlinearity,
        seed,
    };
    let contexts = if p.contexts == "all" {
        ToyOptions::default().contexts
    } else {
        list::<ContextSpec>(&p.contexts, "contexts")?
    };
    let opts = ToyOptions {
        train: TrainOptions {
            steps: p.steps,
            learning_rate: p.learning_rate,
            batch_size: p.batch_size,
            grad_clip: p.grad_clip,
            label_smoothing: p.label_smoothing,
            seed,
        },
        contexts,
    };
    let (model, report) = toy::train_toy(ToyData::Tasks(&set), &config, &opts)?;
    model::save_model(&model, &run.output(MODEL_FILE))?;
    model::write_config_sidecar(model.config(), &run.output("model.toml"))?;
    let log = report.losses.iter().enumerate().map(|(i, l)| vec![(i + 1).to_string(), l.to_string()]);
    run.write_with("train_log.csv", |b| csv_rows(b, &["step", "loss"], log))?;
    let summary = vec![vec![report.final_loss.to_string(), report.heldout_accuracy.to_string()]];
    run.write_with("train_summary.csv", |b| csv_rows(b, &["final_loss", "heldout_accuracy"], summary))
}

pub fn sweep(p: &SweepParams, seed: u64, run: &mut RunDir) -> anyhow::Result<()> {
    let model = load_model(&p.model, run)?;
    let set = load_tasks(&p.tasks, run)?;
    let ps = prompts(&set, &p.context, &p.split, p.n_prompts)?;
    let spec = SweepSpec { lo: p.lo, hi: p.hi, step: p.step, fit_window: p.fit_window, mode: mode(&p.mode)? };
    spec.validate()?;
    let total = model.config().n_neurons();
    if p.n_neurons == 0 || p.n_neurons > total {
        bail!("--n-neurons must be in 1..={total}");
    }
    let per_prompt: Vec<(Vec<intervene::SweepCurve>, Vec<intervene::NegRecord>)> = ps
        .par_iter()
        .enumerate()
        .map(|(i, prompt)| -> anyhow::Result<_> {
            let prep = model.prepare(prompt)?;
            let mut rng = ChaCha8Rng::seed_from_u64(derive(seed, i as u64, 0));
            let mut picked = sample(&mut rng, total, p.n_neurons).into_vec();
            picked.sort_unstable();
            let mut curves = Vec::with_capacity(picked.len());
            let mut recs = Vec::with_capacity(picked.len());
            for k in picked {
                let c = intervene::sweep_prepared(&prep, prompt.target_token, i, model.config().neuron_at(k), &spec)?;
                recs.push(intervene::fit_neg(&c, &spec, p.threshold)?);
                curves.push(c);
            }
            Ok((curves, recs))
        })
        .collect::<anyhow::Result<_>>()?;
    let (curves, recs): (Vec<_>, Vec<_>) = per_prompt.into_iter().unzip();
    let curves: Vec<_> = curves.into_iter().flatten().collect();
    let recs: Vec<_> = recs.into_iter().flatten().collect();
    run.write_with("sweeps.csv", |b| intervene::write_sweeps_csv(b, &curves))?;
    run.write_with("negs.csv", |b| intervene::write_negs_csv(b, &recs))?;
    let s = intervene::aggregate_stats(&recs)?;
    let g = s.generality;
    let rows = [
        ("n_records", s.n_records as f64),
        ("linear_ratio", s.linear_ratio),
        ("positive_ratio", s.positive_ratio),
        ("negative_ratio", s.negative_ratio),
        ("null_ratio", s.null_ratio),
        ("lg", g.lg),
        ("pg", g.pg),
        ("coverage_layer", g.coverage_layer),
        ("coverage_prompt", g.coverage_prompt),
        ("distribution_layer", g.distribution_layer),
        ("distribution_prompt", g.distribution_prompt),
    ]
    .map(|(k, v)| vec![k.to_string(), v.to_string()]);
    run.write_with("stats.csv", |b| csv_rows(b, &["statistic", "value"], rows))
}

pub fn estimate(p: &EstimateParams, run: &mut RunDir) -> anyhow::Result<()> {
    let model = load_model(&p.model, run)?;
    let set = load_tasks(&p.tasks, run)?;
    let ps = prompts(&set, &p.context, &p.split, p.n_prompts)?;
    let total = model.config().n_neurons();
    let n_ig = if p.ig_neurons == 0 { total } else { p.ig_neurons.min(total) };
    let ig_ids: Vec<NeuronId> = (0..n_ig).map(|k| model.config().neuron_at(k)).collect();
    let rows: Vec<(usize, Vec<GradientEstimate>)> = ps
        .par_iter()
        .enumerate()
        .map(|(i, prompt)| -> anyhow::Result<_> {
            let prep = model.prepare(prompt)?;
            let mut est = estimators::estimate_prepared(&prep, prompt.target_token);
            if p.ig_steps > 0 {
                for (k, (_, v)) in estimators::estimate_ig_prepared(&prep, prompt.target_token, &ig_ids, p.ig_steps)?.into_iter().enumerate() {
                    est[k].ig = Some(v);
                }
            }
            Ok((i, est))
        })
        .collect::<anyhow::Result<_>>()?;
    run.write_with("estimates.csv", |b| estimators::write_estimates_csv(b, &rows))
}

pub fn eval_estimators(p: &EvalEstimatorsParams, seed: u64, run: &mut RunDir) -> anyhow::Result<()> {
    let model = load_model(&p.model, run)?;
    let set = load_tasks(&p.tasks, run)?;
    let n_split = set.split(split(&p.split)?).len();
    let ps = prompts(&set, &p.context, &p.split, n_split)?;
    let methods: Vec<Method> = list::<String>(&p.methods, "methods")?
        .iter()
        .map(|m| {
            Ok(match m.as_str() {
                "cg" => Method::Cg,
                "neurgrad" => Method::NeurGrad,
                "ig" => Method::Ig,
                _ => bail!("unknown estimator {m:?}"),
            })
        })
        .collect::<anyhow::Result<_>>()?;
    if p.n_pairs == 0 {
        bail!("--n-pairs must be positive");
    }
    let total = model.config().n_neurons();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pairs: Vec<(usize, NeuronId)> =
        (0..p.n_pairs).map(|_| (rng.random_range(0..ps.len()), model.config().neuron_at(rng.random_range(0..total)))).collect();
    let spec = SweepSpec::window(p.fit_window, p.step, PatchMode::SignRelativeDelta);
    spec.validate()?;
    let want_ig = methods.contains(&Method::Ig);
    let scored: Vec<(intervene::NegRecord, GradientEstimate)> = pairs
        .par_iter()
        .enumerate()
        .map(|(i, &(pi, id))| -> anyhow::Result<_> {
            let prompt = &ps[pi];
            let prep = model.prepare(prompt)?;
            let curve = intervene::sweep_prepared(&prep, prompt.target_token, i, id, &spec)?;
            let rec = intervene::fit_neg(&curve, &spec, intervene::DEFAULT_LINEARITY_THRESHOLD)?;
            let cg = prep.grad(prompt.target_token, model::Objective::Prob).get(id);
            let mut est = GradientEstimate::new(id, cg, prep.activations().get(id));
            if want_ig {
                let ig = estimators::estimate_ig_prepared(&prep, prompt.target_token, &[id], p.ig_steps)?[0].1;
                // IG attributes the whole activation; per unit of sign-relative shift
                est.ig = Some(if est.activation == 0.0 { 0.0 } else { ig / est.activation.abs() });
            }
            Ok((rec, est))
        })
        .collect::<anyhow::Result<_>>()?;
    let truth: Vec<_> = scored.iter().map(|(r, _)| r.clone()).collect();
    let estimates: Vec<(usize, Vec<GradientEstimate>)> = scored.iter().enumerate().map(|(i, (_, e))| (i, vec![*e])).collect();
    let report = estimators::evaluate_estimators(&truth, &estimates, &methods)?;
    run.write_with("negs.csv", |b| intervene::write_negs_csv(b, &truth))?;
    run.write_with("report.csv", |b| estimators::write_report_csv(b, &report))?;

    let timing_prompts: Vec<Prompt> = ps.iter().take(10).cloned().collect();
    let ig_ids: Vec<NeuronId> = (0..16.min(total)).map(|k| model.config().neuron_at(k)).collect();
    let opts = TimingOptions { reps: p.reps, ..TimingOptions::default() };
    let mut timings = serde_json::Map::new();
    for &m in &methods {
        let t = estimators::time_method(&model, &timing_prompts, m, &ig_ids, p.ig_steps, opts)?;
        timings.insert(m.name().into(), t.into());
    }
    run.extra.insert("seconds_per_prompt".into(), timings.into());
    Ok(())
}

fn attribution_method(name: &str, ig_steps: usize, seed: u64) -> anyhow::Result<AttributionMethod> {
    Ok(match name {
        "neurgrad" => AttributionMethod::NeurGrad,
        "cg" => AttributionMethod::Cg,
        "ig" => AttributionMethod::Ig(ig_steps),
        "random" => AttributionMethod::Random(seed),
        _ => bail!("unknown attribution method {name:?}"),
    })
}

pub fn attribute(p: &AttributeParams, seed: u64, run: &mut RunDir) -> anyhow::Result<()> {
    let model = load_model(&p.model, run)?;
    let set = load_tasks(&p.tasks, run)?;
    let ps = prompts(&set, &p.context, &p.split, p.n_prompts)?;
    let ks: Vec<usize> = list(&p.ks, "ks")?;
    let names: Vec<String> = list(&p.methods, "methods")?;
    if names.is_empty() || ks.is_empty() {
        bail!("at least one method and one K are required");
    }
    for n in &names {
        attribution_method(n, p.ig_steps, 0)?;
    }
    let grid = control::shift_grid(p.lo, p.hi, p.step)?;
    // deltas[method][k][prompt][shift]
    let mut deltas: Vec<Vec<Vec<Vec<f64>>>> = Vec::new();
    for name in &names {
        let mut per_k = Vec::new();
        for &k in &ks {
            let rows: Vec<Vec<f64>> = ps
                .par_iter()
                .enumerate()
                .map(|(i, prompt)| -> anyhow::Result<_> {
                    let m = attribution_method(name, p.ig_steps, derive(seed, i as u64, 1))?;
                    Ok(control::topk_enhance(&model, prompt, m, k, &grid, None)?)
                })
                .collect::<anyhow::Result<_>>()?;
            per_k.push(rows);
        }
        deltas.push(per_k);
    }
    let mut mean_rows = Vec::new();
    let mut prompt_rows = Vec::new();
    for (mi, name) in names.iter().enumerate() {
        for (ki, &k) in ks.iter().enumerate() {
            for (si, &s) in grid.iter().enumerate() {
                let col: Vec<f64> = deltas[mi][ki].iter().map(|r| r[si]).collect();
                mean_rows.push((name.clone(), k, s, stats::mean(&col)));
                for (pi, v) in col.iter().enumerate() {
                    prompt_rows.push(vec![name.clone(), k.to_string(), pi.to_string(), s.to_string(), v.to_string()]);
                }
            }
        }
    }
    run.write_with("enhance.csv", |b| control::write_enhance_csv(b, &mean_rows))?;
    run.write_with("enhance_prompts.csv", |b| csv_rows(b, &["method", "k", "prompt_id", "shift", "delta_prob"], prompt_rows))?;
    if let Some(ri) = names.iter().position(|n| n == "random") {
        let last = grid.len() - 1;
        let mut rows = Vec::new();
        for (mi, name) in names.iter().enumerate().filter(|&(mi, _)| mi != ri) {
            for (ki, &k) in ks.iter().enumerate() {
                let a: Vec<f64> = deltas[mi][ki].iter().map(|r| r[last]).collect();
                let b: Vec<f64> = deltas[ri][ki].iter().map(|r| r[last]).collect();
                let t = stats::sign_test(&a, &b);
                rows.push(vec![
                    name.clone(),
                    k.to_string(),
                    grid[last].to_string(),
                    t.wins.to_string(),
                    t.losses.to_string(),
                    t.ties.to_string(),
                    t.p_value.to_string(),
                ]);
            }
        }
        run.write_with("sign_tests.csv", |b| csv_rows(b, &["method", "k", "shift", "wins", "losses", "ties", "p_value"], rows))?;
    }
    Ok(())
}

pub fn multi(p: &MultiParams, seed: u64, run: &mut RunDir) -> anyhow::Result<()> {
    let model = load_model(&p.model, run)?;
    let set = load_tasks(&p.tasks, run)?;
    let ps = prompts(&set, &p.context, &p.split, p.n_prompts)?;
    let ns: Vec<usize> = list(&p.ns, "ns")?;
    let grid = control::shift_grid(p.lo, p.hi, p.step)?;
    let mut rows = Vec::new();
    let mut summary = Vec::new();
    for &n in &ns {
        let res: Vec<(usize, control::AdditivityResult)> = ps
            .par_iter()
            .enumerate()
            .map(|(i, prompt)| Ok((i, control::multi_neuron_run(&model, prompt, n, &grid, derive(seed, i as u64, n as u64))?)))
            .collect::<anyhow::Result<_>>()?;
        let rs: Vec<f64> = res.iter().map(|(_, a)| a.r).collect();
        summary.push(vec![n.to_string(), stats::median(&rs).to_string()]);
        rows.extend(res);
    }
    run.write_with("additivity.csv", |b| control::write_additivity_csv(b, &rows))?;
    run.write_with("additivity_summary.csv", |b| csv_rows(b, &["n_neurons", "median_r"], summary))?;
    let mags: Vec<f64> = ps
        .par_iter()
        .map(|prompt| -> anyhow::Result<Vec<f64>> {
            let prep = model.prepare(prompt)?;
            Ok(estimators::estimate_prepared(&prep, prompt.target_token).iter().map(|e| e.neurgrad).collect())
        })
        .collect::<anyhow::Result<Vec<_>>>()?
        .concat();
    let curve = control::cumulative_neg_distribution(&mags)?;
    run.write_with("distribution.csv", |b| control::write_distribution_csv(b, &curve))
}

fn forest_options(n_trees: usize, max_depth: usize, bootstrap: bool, mf: &str, seed: u64) -> anyhow::Result<ForestOptions> {
    Ok(ForestOptions {
        n_trees,
        max_depth: (max_depth > 0).then_some(max_depth),
        bootstrap,
        max_features: max_features(mf)?,
        seed,
    })
}

pub fn probe(p: &ProbeParams, seed: u64, run: &mut RunDir) -> anyhow::Result<()> {
    let model = load_model(&p.model, run)?;
    let set = load_tasks(&p.tasks, run)?;
    let ctx: ContextSpec = p.context.parse()?;
    let forest = forest_options(p.n_trees, p.max_depth, p.bootstrap, &p.max_features, seed)?;
    let suite = probes::run_probes(&model, &set, &ctx, &p.task, &forest)?;
    run.write_with("probes.csv", |b| probes::write_summary_csv(b, std::slice::from_ref(&suite.summary)))?;
    run.write_with("size_curves.csv", |b| probes::write_size_curves_csv(b, &suite.sizes))?;
    let opp = match suite.opposition {
        Some(o) => vec![vec![o.opposite_fraction.to_string(), o.r.to_string(), String::new()]],
        None => vec![vec![String::new(), String::new(), "undefined".into()]],
    };
    run.write_with("opposition.csv", |b| csv_rows(b, &["opposite_fraction", "r", "flag"], opp))?;
    let d_ff = model.config().d_ff;
    for (name, probe) in [
        ("polar.jsonl", Probe::Vote(suite.polar)),
        ("magn.jsonl", Probe::Vote(suite.magn)),
        ("act.jsonl", Probe::Vote(suite.act)),
        ("tree.jsonl", Probe::Tree(suite.forest)),
    ] {
        probes::io::save_probe(&probe, d_ff, &run.output(name))?;
    }
    Ok(())
}

pub fn metrics(p: &MetricsParams, seed: u64, run: &mut RunDir) -> anyhow::Result<()> {
    let model = load_model(&p.model, run)?;
    let set = load_tasks(&p.tasks, run)?;
    let which: Vec<String> = if p.which == "all" {
        vec!["robustness".into(), "substitutability".into(), "trees".into()]
    } else {
        list(&p.which, "which")?
    };
    if let Some(w) = which.iter().find(|w| !["robustness", "substitutability", "trees"].contains(&w.as_str())) {
        bail!("unknown metric {w:?}");
    }
    let forest = forest_options(1, 0, p.bootstrap, &p.max_features, seed)?;
    let contexts: Vec<ContextSpec> = if p.contexts == "grid" { ContextSpec::grid() } else { list(&p.contexts, "contexts")? };
    let home: ContextSpec = p.context.parse()?;
    let mut wanted = Vec::new();
    if which.iter().any(|w| w == "robustness") {
        wanted.extend(contexts.iter().copied());
    }
    if which.iter().any(|w| w != "robustness") && !wanted.contains(&home) {
        wanted.push(home);
    }
    let feats = metrics::context_features(&model, &set, &wanted)?;
    let home_feats = || feats.iter().find(|f| f.label == home.label()).expect("home context extracted");

    if which.iter().any(|w| w == "robustness") {
        let family = match p.family.as_str() {
            "polar" => ProbeFamily::Vote(VoteKind::Polar),
            "magn" => ProbeFamily::Vote(VoteKind::Magn),
            "act" => ProbeFamily::Vote(VoteKind::Act),
            "tree" => ProbeFamily::Tree(ForestOptions { n_trees: 100, max_depth: None, ..forest }),
            f => bail!("unknown probe family {f:?}"),
        };
        let feats = &feats[..contexts.len()];
        let acc = metrics::cross_accuracies(feats, family, p.size)?;
        let labels: Vec<String> = feats.iter().map(|f| f.label.clone()).collect();
        let cells = metrics::robustness_cells(&labels, &acc, probes::rand_accuracy(set.n_options))?;
        for c in cells.iter().filter(|c| c.train == c.eval) {
            if c.value.is_some_and(|v| v != 1.0) {
                bail!("diagonal robustness cell {} is not 1", c.train);
            }
        }
        let acc_rows: Vec<metrics::LongRow> = labels
            .iter()
            .enumerate()
            .flat_map(|(x, lx)| {
                labels.iter().enumerate().map(move |(y, ly)| (x, y, lx.clone(), ly.clone()))
            })
            .map(|(x, y, lx, ly)| metrics::LongRow { row: lx, col: ly, value: Some(acc[x][y]), flag: String::new() })
            .collect();
        run.write_with("robustness.csv", |b| metrics::write_long_csv(b, &metrics::robustness_rows(&cells)))?;
        run.write_with("robustness_accuracy.csv", |b| metrics::write_long_csv(b, &acc_rows))?;
    }
    if which.iter().any(|w| w == "substitutability") {
        let f = home_feats();
        let probe = probes::train_magn(&f.train.neurgrad)?;
        let windows = metrics::substitutability_sweep(&probe, &f.test, p.window)?;
        run.write_with("substitutability.csv", |b| metrics::write_long_csv(b, &metrics::substitutability_rows(&windows)))?;
    }
    if which.iter().any(|w| w == "trees") {
        let f = home_feats();
        let cells = metrics::tree_hyperparam_sweep(&f.train, &f.test, &metrics::tree_grid(p.cap), &forest)?;
        run.write_with("trees.csv", |b| metrics::write_long_csv(b, &metrics::tree_rows(&cells)))?;
    }
    Ok(())
}
