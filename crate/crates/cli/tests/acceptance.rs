//! Acceptance suite: one test per criterion, each printing a PASS/FAIL line.
//!
//! The trained toy model is shared (default config, default toy training,
//! copy-match with two options, 1600 examples, seed 0). Tests hold a global
//! lock so that timing-based criteria do not compete for cores.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use neglab::control::{cumulative_neg_distribution, multi_neuron_run, shift_grid, topk_enhance, AttributionMethod};
use neglab::estimators::{estimate_ig_prepared, estimate_prepared, time_method, Method, TimingOptions};
use neglab::intervene::{central_difference, coverage_distribution, fit_neg, sweep_prepared, SweepSpec, DEFAULT_LINEARITY_THRESHOLD};
use neglab::metrics::robustness_value;
use neglab::model::{Model, ModelConfig, NeuronId, Objective, PatchMode, PatchSpec, Prompt};
use neglab::probes::forest::Node;
use neglab::probes::{run_probes, train_tree, ForestOptions, MaxFeatures};
use neglab::stats;
use neglab::tasks::{generate_synthetic, ContextSpec, Split, TaskGenSpec, TaskKind, TaskSet};
use neglab::toy::{train_toy, ToyData, ToyOptions};

struct Lab {
    set: TaskSet,
    model: Model,
    test: Vec<Prompt>,
}

fn lab() -> &'static Lab {
    static LAB: OnceLock<Lab> = OnceLock::new();
    LAB.get_or_init(|| {
        let set = generate_synthetic(&TaskGenSpec { kind: TaskKind::CopyMatch, n_options: 2, n_examples: 1600, seed: 0 }).unwrap();
        let (model, _) = train_toy(ToyData::Tasks(&set), &ModelConfig::default(), &ToyOptions::default()).unwrap();
        let test = ContextSpec::zero_shot().render_split(&set, Split::Test).unwrap();
        Lab { set, model, test }
    })
}

fn serial() -> MutexGuard<'static, ()> {
    static LOCK: Mutex<()> = Mutex::new(());
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

/// Writes past the test harness's output capture.
fn verdict(n: u32, name: &str, pass: bool, detail: String) {
    let tag = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stdout(), "criterion {n:>2} [{tag}] {name}: {detail}");
    assert!(pass, "criterion {n} ({name}) failed: {detail}");
}

/// `n` random (prompt index, neuron) pairs.
fn pairs(model: &Model, n_prompts: usize, n: usize, seed: u64) -> Vec<(usize, NeuronId)> {
    let cfg = model.config();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| (rng.random_range(0..n_prompts), cfg.neuron_at(rng.random_range(0..cfg.n_neurons())))).collect()
}

#[test]
fn criterion_01_gradient_correctness() {
    let lab = lab();
    let _g = serial();
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let cfg = lab.model.config();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    for p in lab.test.iter().take(10) {
        let prep = lab.model.prepare(p).unwrap();
        let grad = prep.grad(p.target_token, Objective::Prob);
        for _ in 0..100 {
            let id = cfg.neuron_at(rng.random_range(0..cfg.n_neurons()));
            let fd = central_difference(&prep, p.target_token, id, PatchMode::AbsoluteDelta, 1e-3).unwrap();
            let cg = grad.get(id);
            let rel = (cg - fd).abs() / cg.abs().max(fd.abs()).max(1e-8);
            worst = worst.max(rel);
        }
    }
    let elapsed = start.elapsed();
    verdict(
        1,
        "CG vs central difference",
        worst <= 1e-3 && elapsed < Duration::from_secs(10),
        format!("max relative error {worst:.3e} over 1000 pairs in {elapsed:.2?}"),
    );
}

struct PairFits {
    slopes: Vec<f64>,
    fd: Vec<f64>,
    linear: Vec<bool>,
    neurgrad: Vec<f64>,
    elapsed: Duration,
}

fn pair_fits(lab: &'static Lab) -> &'static PairFits {
    static FITS: OnceLock<PairFits> = OnceLock::new();
    FITS.get_or_init(|| compute_fits(lab))
}

fn compute_fits(lab: &Lab) -> PairFits {
    let spec = SweepSpec::default();
    let start = Instant::now();
    let mut out = PairFits { slopes: vec![], fd: vec![], linear: vec![], neurgrad: vec![], elapsed: Duration::ZERO };
    for (i, (pi, id)) in pairs(&lab.model, lab.test.len(), 1000, 202).into_iter().enumerate() {
        let p = &lab.test[pi];
        let prep = lab.model.prepare(p).unwrap();
        let curve = sweep_prepared(&prep, p.target_token, i, id, &spec).unwrap();
        let rec = fit_neg(&curve, &spec, DEFAULT_LINEARITY_THRESHOLD).unwrap();
        out.fd.push(central_difference(&prep, p.target_token, id, spec.mode, 1e-3).unwrap());
        out.slopes.push(rec.slope);
        out.linear.push(rec.is_linear);
        out.neurgrad.push(estimate_prepared(&prep, p.target_token)[lab.model.config().flat_index(id)].neurgrad);
    }
    out.elapsed = start.elapsed();
    out
}

#[test]
fn criterion_02_local_linearity() {
    let lab = lab();
    let _g = serial();
    let f = pair_fits(lab);
    let n_lin = f.linear.iter().filter(|&&l| l).count();
    let off: usize = (0..f.slopes.len()).filter(|&i| f.linear[i] && (f.slopes[i] - f.fd[i]).abs() > 0.05 * f.fd[i].abs()).count();
    let ratio = n_lin as f64 / f.slopes.len() as f64;
    verdict(
        2,
        "local linearity",
        ratio >= 0.8 && off == 0 && f.elapsed < Duration::from_secs(300),
        format!("{n_lin}/1000 linear, {off} linear slopes off FD by > 5%, {:.2?}", f.elapsed),
    );
}

#[test]
fn criterion_03_neurgrad_fidelity() {
    let lab = lab();
    let _g = serial();
    let f = pair_fits(lab);
    let r = stats::pearson(&f.neurgrad, &f.slopes).unwrap();
    let mae = stats::mean_abs_error(&f.neurgrad, &f.slopes);
    let mean_abs = f.slopes.iter().map(|s| s.abs()).sum::<f64>() / f.slopes.len() as f64;
    let prompts: Vec<Prompt> = lab.test.iter().take(10).cloned().collect();
    let opts = TimingOptions::default();
    let t_cg = time_method(&lab.model, &prompts, Method::Cg, &[], 1, opts).unwrap();
    let t_ng = time_method(&lab.model, &prompts, Method::NeurGrad, &[], 1, opts).unwrap();
    verdict(
        3,
        "NeurGrad fidelity",
        r >= 0.99 && mae <= 0.1 * mean_abs && t_ng <= 1.5 * t_cg,
        format!("r {r:.6}, MAE {mae:.3e} vs mean |slope| {mean_abs:.3e}, time ratio {:.3}", t_ng / t_cg),
    );
}

#[test]
fn criterion_04_ig_completeness() {
    let lab = lab();
    let _g = serial();
    let mut worst: f64 = 0.0;
    for (pi, id) in pairs(&lab.model, lab.test.len(), 100, 404) {
        let p = &lab.test[pi];
        let prep = lab.model.prepare(p).unwrap();
        let ig = estimate_ig_prepared(&prep, p.target_token, &[id], 300).unwrap()[0].1;
        let zeroed = prep.patched(&PatchSpec::single(id, PatchMode::SetValue, 0.0)).unwrap().prob(p.target_token);
        worst = worst.max((ig - (prep.output().prob(p.target_token) - zeroed)).abs());
    }
    verdict(4, "IG completeness", worst <= 1e-3, format!("max gap {worst:.3e} over 100 neurons at m = 300"));
}

#[test]
fn criterion_05_attribution_beats_random() {
    let lab = lab();
    let _g = serial();
    let start = Instant::now();
    let mut worst_p: f64 = 0.0;
    let mut detail = Vec::new();
    for k in [1, 4, 16] {
        let (mut ng, mut rnd) = (vec![], vec![]);
        for (i, p) in lab.test.iter().take(200).enumerate() {
            ng.push(topk_enhance(&lab.model, p, AttributionMethod::NeurGrad, k, &[0.5], None).unwrap()[0]);
            rnd.push(topk_enhance(&lab.model, p, AttributionMethod::Random(i as u64), k, &[0.5], Some(PatchMode::SignRelativeDelta)).unwrap()[0]);
        }
        let t = stats::sign_test(&ng, &rnd);
        worst_p = worst_p.max(t.p_value);
        detail.push(format!("K={k}: {}/{} wins p={:.1e}", t.wins, t.wins + t.losses, t.p_value));
    }
    let elapsed = start.elapsed();
    verdict(
        5,
        "top-K NeurGrad vs random at shift 0.5",
        worst_p < 0.01 && elapsed < Duration::from_secs(600),
        format!("{}; {elapsed:.2?}", detail.join(", ")),
    );
}

#[test]
fn criterion_06_multi_neuron_additivity() {
    let lab = lab();
    let _g = serial();
    let grid = shift_grid(0.0, 0.5, 0.01).unwrap();
    let mut medians = Vec::new();
    for e in 0..=8 {
        let rs: Vec<f64> = lab.test.iter().take(50).enumerate().map(|(i, p)| multi_neuron_run(&lab.model, p, 1 << e, &grid, i as u64).unwrap().r).collect();
        medians.push(stats::median(&rs));
    }
    let monotone = medians.windows(2).all(|w| w[1] <= w[0]);
    verdict(
        6,
        "multi-neuron additivity",
        medians[0] >= 0.99 && monotone && medians[8] >= 0.5,
        format!("median r by N=2^0..2^8: {}", medians.iter().map(|m| format!("{m:.5}")).collect::<Vec<_>>().join(" ")),
    );
}

#[test]
fn criterion_07_neg_distribution() {
    let lab = lab();
    let _g = serial();
    let mut mags = Vec::new();
    for p in lab.test.iter().take(50) {
        let prep = lab.model.prepare(p).unwrap();
        mags.extend(estimate_prepared(&prep, p.target_token).iter().map(|e| e.neurgrad));
    }
    let curve = cumulative_neg_distribution(&mags).unwrap();
    let last = *curve.last().unwrap();
    let full_only_at_end = last == (100.0, 1.0) && curve[..curve.len() - 1].iter().all(|&(_, s)| s < 1.0);
    let half_late = curve.iter().all(|&(q, s)| s <= 0.5 || q > 50.0);
    let crossing = curve.iter().find(|&&(_, s)| s > 0.5).map(|c| c.0).unwrap_or(f64::NAN);
    verdict(
        7,
        "cumulative NEG magnitude curve",
        full_only_at_end && half_late,
        format!("share first exceeds 0.5 at percentile {crossing:.2}; reaches 1.0 at {:.0}", last.0),
    );
}

#[test]
fn criterion_08_and_09_probes() {
    let lab = lab();
    let _g = serial();
    let start = Instant::now();
    let suite = run_probes(&lab.model, &lab.set, &ContextSpec::zero_shot(), "copy-match", &ForestOptions::default()).unwrap();
    let elapsed = start.elapsed();
    let s = &suite.summary;
    let pass8 = s.lm_prob >= 0.9
        && s.magn >= s.rand + 0.15
        && s.polar >= s.rand + 0.15
        && s.tree >= s.polar.max(s.magn) - 0.02
        && elapsed < Duration::from_secs(900);
    let r = suite.opposition.map(|o| o.r).unwrap_or(f64::NAN);
    let detail8 = format!(
        "LM-Prob {:.3}, Rand {:.3}, Polar {:.3} (size {}), Magn {:.3} (size {}), Tree {:.3}; {elapsed:.2?}",
        s.lm_prob, s.rand, s.polar, s.polar_size, s.magn, s.magn_size, s.tree
    );
    let _ = std::panic::catch_unwind(|| verdict(8, "probing", pass8, detail8));
    let _ = std::panic::catch_unwind(|| verdict(9, "polarity opposition", r <= -0.9, format!("corr {r:.6}")));
    assert!(pass8, "criterion 8 failed");
    assert!(r <= -0.9, "criterion 9 failed");
}

/// Exhaustive best equality stump: `(impurity, feature, value)`, ties to the
/// first in feature-then-value order; `None` when pure or nothing splits.
fn oracle_stump(xs: &[Vec<u8>], ys: &[usize], k: usize) -> Option<(f64, usize, u8)> {
    let gini = |rows: &[usize]| {
        let n = rows.len() as f64;
        let mut c = vec![0.0; k];
        for &r in rows {
            c[ys[r]] += 1.0;
        }
        1.0 - c.iter().map(|x: &f64| (x / n) * (x / n)).sum::<f64>()
    };
    if ys.iter().all(|&y| y == ys[0]) {
        return None;
    }
    let all: Vec<usize> = (0..ys.len()).collect();
    let mut best: Option<(f64, usize, u8)> = None;
    for f in 0..xs[0].len() {
        for v in 0..=u8::MAX {
            let (yes, no): (Vec<usize>, Vec<usize>) = all.iter().partition(|&&r| xs[r][f] == v);
            if yes.is_empty() || no.is_empty() {
                continue;
            }
            let n = ys.len() as f64;
            let imp = yes.len() as f64 / n * gini(&yes) + no.len() as f64 / n * gini(&no);
            if best.is_none_or(|b| imp < b.0 - 1e-12) {
                best = Some((imp, f, v));
            }
        }
    }
    best
}

fn plurality(rows: impl Iterator<Item = usize>, k: usize) -> usize {
    let mut c = vec![0usize; k];
    rows.for_each(|y| c[y] += 1);
    (0..k).fold(0, |b, j| if c[j] > c[b] { j } else { b })
}

#[test]
fn criterion_10_stump_oracle() {
    let _g = serial();
    let opts = ForestOptions { n_trees: 1, max_depth: Some(1), bootstrap: false, max_features: MaxFeatures::All, seed: 0 };
    let mut failures = Vec::new();
    for case in 0..200u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(10_000 + case);
        let k = rng.random_range(2..=4);
        let nf = rng.random_range(1..=8);
        let n = rng.random_range(1..=64);
        let n_values = rng.random_range(1..=4u8);
        let xs: Vec<Vec<u8>> = (0..n).map(|_| (0..nf).map(|_| rng.random_range(0..n_values)).collect()).collect();
        let ys: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let forest = train_tree(&xs, &ys, k, &opts).unwrap();
        let tree = &forest.trees[0];
        let oracle = oracle_stump(&xs, &ys, k);
        let preds_oracle: Vec<usize> = match oracle {
            None => vec![plurality(ys.iter().copied(), k); n],
            Some((_, f, v)) => {
                let yes = plurality((0..n).filter(|&r| xs[r][f] == v).map(|r| ys[r]), k);
                let no = plurality((0..n).filter(|&r| xs[r][f] != v).map(|r| ys[r]), k);
                xs.iter().map(|x| if x[f] == v { yes } else { no }).collect()
            }
        };
        let same_split = match (oracle, &tree.nodes[0]) {
            (None, Node::Leaf { .. }) => true,
            (Some((_, f, v)), Node::Split { feature, value, .. }) => (f, v) == (*feature, *value),
            _ => false,
        };
        let preds = forest.predict_all(&xs).unwrap();
        if !same_split || preds != preds_oracle || tree.depth() > 1 {
            failures.push(case);
        }
    }
    verdict(10, "1-tree depth-1 forest equals best Gini stump", failures.is_empty(), format!("{} of 200 cases differ {failures:?}", failures.len()));
}

#[test]
fn criterion_11_balance_and_splits() {
    let _g = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(1111);
    let kinds = [TaskKind::Parity, TaskKind::LexiconLookup, TaskKind::CopyMatch];
    let mut bad = Vec::new();
    for i in 0..50 {
        let n_options = rng.random_range(2..=5);
        let spec = TaskGenSpec {
            kind: kinds[rng.random_range(0..3)],
            n_options,
            n_examples: n_options * 8 * rng.random_range(1..=20),
            seed: rng.random(),
        };
        let set = generate_synthetic(&spec).unwrap();
        let per = spec.n_examples / n_options;
        let ok = set.imbalance().is_empty()
            && set.correct_counts(Split::Train) == vec![per * 6 / 8; n_options]
            && set.correct_counts(Split::Valid) == vec![per / 8; n_options]
            && set.correct_counts(Split::Test) == vec![per / 8; n_options];
        if !ok {
            bad.push(i);
        }
    }
    verdict(11, "balance and 6:1:1 splits", bad.is_empty(), format!("50 random specs, failing: {bad:?}"));
}

#[test]
fn criterion_12_generality_and_robustness_algebra() {
    let _g = serial();
    let (cu, du) = coverage_distribution(&[3, 3, 3, 3]);
    let (cs, ds) = coverage_distribution(&[0, 7, 0, 0]);
    let checks = [
        ("uniform LG", cu * du == 1.0),
        ("single-bin coverage", cs == 0.25),
        ("single-bin distribution", ds == 0.0),
        ("X = Y", robustness_value(0.8, 0.8, 0.5) == Some(1.0)),
        ("X = Y, 3 options", robustness_value(0.7, 0.7, 1.0 / 3.0) == Some(1.0)),
        ("chance accuracy", robustness_value(0.5, 0.9, 0.5) == Some(0.0)),
        ("below chance", robustness_value(0.2, 0.9, 0.25) == Some(0.0)),
    ];
    let failed: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    verdict(12, "generality and robustness algebra", failed.is_empty(), format!("{} cases, failing: {failed:?}", checks.len()));
}

fn neglab(out: &Path, args: &[&str]) -> PathBuf {
    let o = Command::new(env!("CARGO_BIN_EXE_neglab")).arg("--out").arg(out).args(args).output().unwrap();
    assert!(o.status.success(), "neglab {args:?}: {}", String::from_utf8_lossy(&o.stderr));
    PathBuf::from(String::from_utf8(o.stdout).unwrap().trim())
}

/// Every file but the manifest, by name.
fn results(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap() != "manifest.json")
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    v.sort();
    v
}

/// Runs the whole pipeline into `out`, returning each run directory.
fn pipeline(out: &Path, jobs: &str) -> Vec<(String, PathBuf)> {
    let common = ["--seed", "13", "--jobs", jobs];
    let run = |args: &[&str]| neglab(out, &[&common[..], args].concat());
    let tasks = run(&["gen-tasks", "--n-examples", "320"]);
    let t = tasks.to_str().unwrap().to_owned();
    let model = run(&["train", "--tasks", &t, "--steps", "15", "--contexts", "i0-z-s0,i1-d0-s1"]);
    let m = model.to_str().unwrap().to_owned();
    let mt = ["--model", m.as_str(), "--tasks", t.as_str()];
    let mut runs = vec![("gen-tasks".to_string(), tasks), ("train".to_string(), model)];
    let steps: [(&str, Vec<&str>); 8] = [
        ("sweep", vec!["--n-prompts", "3", "--n-neurons", "8"]),
        ("estimate", vec!["--n-prompts", "3", "--ig-steps", "4", "--ig-neurons", "5"]),
        ("eval-estimators", vec!["--n-pairs", "30", "--ig-steps", "4", "--reps", "1"]),
        ("attribute", vec!["--n-prompts", "12", "--ks", "1,4", "--methods", "neurgrad,cg,ig,random", "--ig-steps", "3"]),
        ("multi", vec!["--n-prompts", "4", "--ns", "1,8", "--step", "0.05"]),
        ("probe", vec!["--n-trees", "12"]),
        ("metrics", vec!["--contexts", "i0-z-s0,i0-d1-s1,i2-z-s0", "--size", "8", "--window", "200", "--cap", "4"]),
        ("metrics", vec!["--which", "robustness", "--contexts", "i0-z-s0,i1-z-s1", "--family", "tree", "--size", "4"]),
    ];
    for (cmd, extra) in steps {
        let args: Vec<&str> = [&[cmd][..], &mt[..], &extra[..]].concat();
        runs.push((cmd.to_string(), run(&args)));
    }
    runs.push(("report".to_string(), run(&["report"])));
    runs
}

#[test]
fn criterion_13_determinism() {
    let _g = serial();
    let root = tempfile::tempdir().unwrap();
    let a = pipeline(&root.path().join("a"), "1");
    let b = pipeline(&root.path().join("b"), "2");
    let mut differing = Vec::new();
    let mut n_files = 0;
    // report tables name their source runs; replace those timestamped names by position
    let names = |runs: &[(String, PathBuf)]| -> Vec<String> { runs.iter().map(|r| r.1.file_name().unwrap().to_string_lossy().into_owned()).collect() };
    let normalize = |files: Vec<(String, Vec<u8>)>, names: &[String]| -> Vec<(String, Vec<u8>)> {
        files
            .into_iter()
            .map(|(n, c)| {
                let Ok(mut c) = String::from_utf8(c.clone()) else { return (n, c) };
                let mut n = n;
                for (i, name) in names.iter().enumerate() {
                    n = n.replace(name, &format!("run{i}"));
                    c = c.replace(name, &format!("run{i}"));
                }
                (n, c.into_bytes())
            })
            .collect()
    };
    let (na, nb) = (names(&a), names(&b));
    for ((cmd, da), (_, db)) in a.iter().zip(&b) {
        let (ra, rb) = (normalize(results(da), &na), normalize(results(db), &nb));
        n_files += ra.len();
        if ra != rb {
            differing.push(cmd.clone());
        }
    }
    verdict(
        13,
        "determinism",
        differing.is_empty() && a.len() == 11,
        format!("{} runs, {n_files} result files compared; differing: {differing:?}", a.len()),
    );
}
