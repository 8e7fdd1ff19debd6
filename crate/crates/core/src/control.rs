//! Top-K enhancement, multi-neuron additivity, and the NEG magnitude
//! distribution.

use std::io::Write;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{input_err, Error, Result};
use crate::estimators::{estimate_ig_prepared, estimate_prepared};
use crate::model::{sign, Model, NeuronId, Objective, PatchMode, PatchSpec, Prepared, Prompt};
use crate::stats;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttributionMethod {
    Cg,
    /// Integrated gradients with this many steps.
    Ig(usize),
    NeurGrad,
    /// Seeded uniform values in (-1, 1).
    Random(u64),
}

impl AttributionMethod {
    pub fn name(self) -> &'static str {
        match self {
            AttributionMethod::Cg => "cg",
            AttributionMethod::Ig(_) => "ig",
            AttributionMethod::NeurGrad => "neurgrad",
            AttributionMethod::Random(_) => "random",
        }
    }

    /// The shift convention under which the method's value is a slope:
    /// absolute for CG and random, sign-relative for NeurGrad and IG.
    pub fn natural_mode(self) -> PatchMode {
        match self {
            AttributionMethod::Cg | AttributionMethod::Random(_) => PatchMode::AbsoluteDelta,
            AttributionMethod::Ig(_) | AttributionMethod::NeurGrad => PatchMode::SignRelativeDelta,
        }
    }
}

/// Ranked neurons with their enhancement directions and the shift grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnhancePlan {
    pub neurons: Vec<NeuronId>,
    pub directions: Vec<f64>,
    pub grid: Vec<f64>,
    pub mode: PatchMode,
}

impl EnhancePlan {
    pub fn validate(&self) -> Result<()> {
        if self.neurons.len() != self.directions.len() {
            return input_err("one direction per neuron is required");
        }
        check_grid(&self.grid, 1)
    }
}

fn check_grid(grid: &[f64], min_len: usize) -> Result<()> {
    if grid.len() < min_len {
        return input_err(format!("shift grid has {} points, need at least {min_len}", grid.len()));
    }
    if grid.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
        return input_err("shift grid must be finite and nonnegative");
    }
    if grid.windows(2).any(|w| w[1] <= w[0]) {
        return input_err("shift grid must be strictly increasing");
    }
    Ok(())
}

/// `lo, lo + step, ..., hi` (inclusive within rounding).
pub fn shift_grid(lo: f64, hi: f64, step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0) || hi < lo {
        return input_err("shift grid needs step > 0 and hi >= lo");
    }
    let n = ((hi - lo) / step + 1e-9).floor() as usize;
    Ok((0..=n).map(|i| lo + i as f64 * step).collect())
}

/// Attribution value of every neuron, in flat `(layer, neuron)` order.
pub fn attribution_values(prep: &Prepared<'_>, target: usize, method: AttributionMethod) -> Result<Vec<f64>> {
    let cfg = prep.model().config();
    Ok(match method {
        AttributionMethod::Cg => prep.grad(target, Objective::Prob).as_slice().to_vec(),
        AttributionMethod::NeurGrad => estimate_prepared(prep, target).iter().map(|e| e.neurgrad).collect(),
        AttributionMethod::Ig(m) => {
            let ids: Vec<NeuronId> = cfg.neurons().collect();
            estimate_ig_prepared(prep, target, &ids, m)?.into_iter().map(|x| x.1).collect()
        }
        AttributionMethod::Random(seed) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..cfg.n_neurons()).map(|_| rng.random_range(-1.0..1.0)).collect()
        }
    })
}

/// The `k` neurons with largest `|value|` (ties to the lower flat index),
/// each with direction `sign(value)` (`+1` for zero values).
pub fn top_k(model: &Model, values: &[f64], k: usize) -> Result<(Vec<NeuronId>, Vec<f64>)> {
    let cfg = model.config();
    if k == 0 || k > values.len() {
        return input_err(format!("K = {k} outside 1..={}", values.len()));
    }
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].abs().total_cmp(&values[a].abs()).then(a.cmp(&b)));
    order.truncate(k);
    let ids = order.iter().map(|&i| cfg.neuron_at(i)).collect();
    let dirs = order.iter().map(|&i| if values[i] == 0.0 { 1.0 } else { sign(values[i]) }).collect();
    Ok((ids, dirs))
}

pub fn plan_enhancement(prep: &Prepared<'_>, target: usize, method: AttributionMethod, k: usize, grid: Vec<f64>, mode: Option<PatchMode>) -> Result<EnhancePlan> {
    let values = attribution_values(prep, target, method)?;
    let (neurons, directions) = top_k(prep.model(), &values, k)?;
    let plan = EnhancePlan { neurons, directions, grid, mode: mode.unwrap_or(method.natural_mode()) };
    plan.validate()?;
    Ok(plan)
}

/// Target-probability change at each grid shift when every planned neuron
/// is shifted by `shift * direction`.
pub fn apply_plan(prep: &Prepared<'_>, target: usize, plan: &EnhancePlan) -> Result<Vec<f64>> {
    plan.validate()?;
    let base = prep.output().prob(target);
    plan.grid
        .iter()
        .map(|&d| {
            let patch = PatchSpec::uniform(&plan.neurons, plan.mode, d, &plan.directions)?;
            Ok(prep.patched(&patch)?.prob(target) - base)
        })
        .collect()
}

/// Ranks neurons by `|method value|`, shifts the top `k` towards raising the
/// target, and returns the probability change per grid point. `mode`
/// defaults to the method's natural convention.
pub fn topk_enhance(model: &Model, prompt: &Prompt, method: AttributionMethod, k: usize, grid: &[f64], mode: Option<PatchMode>) -> Result<Vec<f64>> {
    if k == 0 {
        return input_err("K must be at least 1");
    }
    let prep = model.prepare(prompt)?;
    let plan = plan_enhancement(&prep, prompt.target_token, method, k, grid.to_vec(), mode)?;
    apply_plan(&prep, prompt.target_token, &plan)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdditivityResult {
    pub n_neurons: usize,
    pub grid: Vec<f64>,
    pub predicted: Vec<f64>,
    pub actual: Vec<f64>,
    /// Pearson r of predicted vs actual; 0 when undefined.
    pub r: f64,
}

/// Samples `n` neurons (seeded), shifts each by `+delta * sign(gbar)`
/// sign-relatively (`+delta` where `gbar = 0`), and compares the actual
/// probability change with the sum `sum |gbar_i| * delta`.
pub fn multi_neuron_run(model: &Model, prompt: &Prompt, n: usize, grid: &[f64], seed: u64) -> Result<AdditivityResult> {
    check_grid(grid, 3)?;
    let total = model.config().n_neurons();
    if n == 0 || n > total {
        return input_err(format!("N = {n} outside 1..={total}"));
    }
    let prep = model.prepare(prompt)?;
    let target = prompt.target_token;
    let est = estimate_prepared(&prep, target);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked: Vec<usize> = sample(&mut rng, total, n).into_vec();
    picked.sort_unstable();
    let ids: Vec<NeuronId> = picked.iter().map(|&i| est[i].neuron).collect();
    let dirs: Vec<f64> = picked.iter().map(|&i| if est[i].neurgrad == 0.0 { 1.0 } else { sign(est[i].neurgrad) }).collect();
    let gsum: f64 = picked.iter().map(|&i| est[i].neurgrad.abs()).sum();
    let base = prep.output().prob(target);
    let mut predicted = Vec::with_capacity(grid.len());
    let mut actual = Vec::with_capacity(grid.len());
    for &d in grid {
        let patch = PatchSpec::uniform(&ids, PatchMode::SignRelativeDelta, d, &dirs)?;
        predicted.push(gsum * d);
        actual.push(prep.patched(&patch)?.prob(target) - base);
    }
    let r = match stats::pearson(&predicted, &actual) {
        Ok(r) => r,
        Err(Error::UndefinedCorrelation(_)) => 0.0,
        Err(e) => return Err(e),
    };
    Ok(AdditivityResult { n_neurons: n, grid: grid.to_vec(), predicted, actual, r })
}

/// Lorenz-style curve of NEG magnitudes: magnitudes sorted ascending,
/// returning `(percentile, cumulative share of the total)` at every count
/// from 0 to all neurons.
pub fn cumulative_neg_distribution(values: &[f64]) -> Result<Vec<(f64, f64)>> {
    if values.is_empty() {
        return input_err("no NEG values");
    }
    let mut mags: Vec<f64> = values.iter().map(|v| v.abs()).collect();
    if mags.iter().any(|m| !m.is_finite()) {
        return input_err("non-finite NEG value");
    }
    mags.sort_by(f64::total_cmp);
    let total: f64 = mags.iter().sum();
    if total == 0.0 {
        return Err(Error::Degenerate("all NEG magnitudes are zero".into()));
    }
    let n = mags.len() as f64;
    let mut acc = 0.0;
    let mut curve = vec![(0.0, 0.0)];
    for (i, m) in mags.iter().enumerate() {
        acc += m;
        curve.push((100.0 * (i + 1) as f64 / n, acc / total));
    }
    if let Some(last) = curve.last_mut() {
        last.1 = 1.0;
    }
    Ok(curve)
}

/// `method,k,shift,mean_delta_prob` rows.
pub fn write_enhance_csv<W: Write>(out: W, rows: &[(String, usize, f64, f64)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["method", "k", "shift", "mean_delta_prob"])?;
    for (m, k, s, v) in rows {
        w.write_record([m.clone(), k.to_string(), s.to_string(), v.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// `prompt_id,n_neurons,r,max_abs_error` rows.
pub fn write_additivity_csv<W: Write>(out: W, rows: &[(usize, AdditivityResult)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["prompt_id", "n_neurons", "r", "max_abs_error"])?;
    for (p, a) in rows {
        let err = a.predicted.iter().zip(&a.actual).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        w.write_record([p.to_string(), a.n_neurons.to_string(), a.r.to_string(), err.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// `percentile,cumulative_share`
pub fn write_distribution_csv<W: Write>(out: W, curve: &[(f64, f64)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["percentile", "cumulative_share"])?;
    for (p, c) in curve {
        w.write_record([p.to_string(), c.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equal_magnitudes_give_the_identity_line() {
        let c = cumulative_neg_distribution(&[0.5, -0.5, 0.5, -0.5]).unwrap();
        for (p, s) in c {
            assert!((p / 100.0 - s).abs() < 1e-12);
        }
    }

    #[test]
    fn single_nonzero_jumps_at_the_end() {
        let c = cumulative_neg_distribution(&[0.0, 0.0, 2.0, 0.0]).unwrap();
        assert_eq!(c[3], (75.0, 0.0));
        assert_eq!(c[4], (100.0, 1.0));
        assert!(matches!(cumulative_neg_distribution(&[0.0, 0.0]), Err(Error::Degenerate(_))));
    }

    #[test]
    fn curve_is_monotone_and_normalized() {
        let c = cumulative_neg_distribution(&[0.3, -1.0, 0.01, 2.5, -0.7]).unwrap();
        assert!(c.windows(2).all(|w| w[1].1 >= w[0].1));
        assert_eq!(c.last().unwrap().1, 1.0);
    }

    #[test]
    fn grids() {
        assert_eq!(shift_grid(0.0, 0.5, 0.01).unwrap().len(), 51);
        assert_eq!(shift_grid(0.1, 1.0, 0.1).unwrap().len(), 10);
        assert!(check_grid(&[0.0], 3).is_err());
        assert!(check_grid(&[0.0, 0.2, 0.1], 1).is_err());
    }
}
