//! CG, NeurGrad and integrated-gradient estimates of NEG, scored against
//! intervention slopes.

use std::collections::HashMap;
use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{input_err, Result};
use crate::intervene::NegRecord;
use crate::model::{sign, Model, NeuronId, Objective, PatchMode, PatchSpec, Prepared, Prompt};
use crate::stats;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradientEstimate {
    pub neuron: NeuronId,
    pub cg: f64,
    pub activation: f64,
    /// `cg * sign(activation)`, 0 when the activation is exactly 0.
    pub neurgrad: f64,
    pub ig: Option<f64>,
}

impl GradientEstimate {
    pub fn new(neuron: NeuronId, cg: f64, activation: f64) -> Self {
        GradientEstimate { neuron, cg, activation, neurgrad: cg * sign(activation), ig: None }
    }

    /// The activation was exactly zero, so no direction is asserted.
    pub fn zero_activation(&self) -> bool {
        self.activation == 0.0
    }
}

/// Every neuron's estimate from one forward and one backward pass, in
/// `(layer, neuron)` order.
pub fn estimate_all(model: &Model, prompt: &Prompt) -> Result<Vec<GradientEstimate>> {
    let prep = model.prepare(prompt)?;
    Ok(estimate_prepared(&prep, prompt.target_token))
}

pub fn estimate_prepared(prep: &Prepared<'_>, target: usize) -> Vec<GradientEstimate> {
    let grads = prep.grad(target, Objective::Prob);
    let acts = prep.activations();
    grads.iter().map(|(id, g)| GradientEstimate::new(id, g, acts.get(id))).collect()
}

/// Integrated gradients from a zero-activation baseline, one neuron at a
/// time: `a * (1/m) * sum_{k=1..m} dp/da` at activation `(k/m) a`.
pub fn estimate_ig(model: &Model, prompt: &Prompt, neurons: &[NeuronId], m: usize) -> Result<Vec<(NeuronId, f64)>> {
    let prep = model.prepare(prompt)?;
    estimate_ig_prepared(&prep, prompt.target_token, neurons, m)
}

pub fn estimate_ig_prepared(prep: &Prepared<'_>, target: usize, neurons: &[NeuronId], m: usize) -> Result<Vec<(NeuronId, f64)>> {
    if m == 0 {
        return input_err("integrated gradients need at least one step");
    }
    neurons
        .iter()
        .map(|&id| {
            prep.model().config().check_neuron(id)?;
            let a = prep.activations().get(id);
            let mut total = 0.0;
            for k in 1..=m {
                let patch = PatchSpec::single(id, PatchMode::SetValue, a * k as f64 / m as f64);
                let (_, g) = prep.patched_grad(&patch, target, Objective::Prob)?;
                total += g.get(id);
            }
            Ok((id, a * total / m as f64))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Cg,
    NeurGrad,
    Ig,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Cg => "cg",
            Method::NeurGrad => "neurgrad",
            Method::Ig => "ig",
        }
    }

    pub fn value(self, e: &GradientEstimate) -> Option<f64> {
        match self {
            Method::Cg => Some(e.cg),
            Method::NeurGrad => Some(e.neurgrad),
            Method::Ig => e.ig,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodScore {
    pub method: String,
    pub n_pairs: usize,
    pub r: f64,
    pub mae: f64,
    /// Median seconds per prompt, when timed.
    pub runtime: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorReport {
    pub rows: Vec<MethodScore>,
}

impl EstimatorReport {
    pub fn get(&self, method: &str) -> Option<&MethodScore> {
        self.rows.iter().find(|r| r.method == method)
    }
}

/// Pearson r and MAE of `estimates` against the fitted slopes, over the
/// `(prompt_id, neuron)` pairs present in both.
pub fn score_method(method: &str, truth: &[NegRecord], estimates: &[(usize, NeuronId, f64)]) -> Result<MethodScore> {
    let lookup: HashMap<(usize, NeuronId), f64> = estimates.iter().map(|&(p, n, v)| ((p, n), v)).collect();
    let (est, gt): (Vec<f64>, Vec<f64>) = truth
        .iter()
        .filter_map(|t| lookup.get(&(t.prompt_id, t.neuron)).map(|&v| (v, t.slope)))
        .unzip();
    if est.len() < 2 {
        return input_err(format!("{method}: {} overlapping pairs with the ground truth, need 2", est.len()));
    }
    Ok(MethodScore {
        method: method.to_string(),
        n_pairs: est.len(),
        r: stats::pearson(&est, &gt)?,
        mae: stats::mean_abs_error(&est, &gt),
        runtime: None,
    })
}

/// Scores every method for which `estimates` carries values. Estimates are
/// keyed by prompt id.
pub fn evaluate_estimators(truth: &[NegRecord], estimates: &[(usize, Vec<GradientEstimate>)], methods: &[Method]) -> Result<EstimatorReport> {
    let mut rows = Vec::new();
    for &m in methods {
        let flat: Vec<(usize, NeuronId, f64)> = estimates
            .iter()
            .flat_map(|(p, es)| es.iter().filter_map(move |e| m.value(e).map(|v| (*p, e.neuron, v))))
            .collect();
        rows.push(score_method(m.name(), truth, &flat)?);
    }
    Ok(EstimatorReport { rows })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimingOptions {
    pub warmups: usize,
    pub reps: usize,
}

impl Default for TimingOptions {
    fn default() -> Self {
        TimingOptions { warmups: 3, reps: 20 }
    }
}

/// Median wall-clock seconds, over `reps` runs after `warmups`, of running
/// `method` on every prompt, divided by the number of prompts. IG is timed
/// over `ig_neurons` with `ig_steps`.
pub fn time_method(
    model: &Model,
    prompts: &[Prompt],
    method: Method,
    ig_neurons: &[NeuronId],
    ig_steps: usize,
    opts: TimingOptions,
) -> Result<f64> {
    if prompts.is_empty() || opts.reps == 0 {
        return input_err("timing needs prompts and at least one repetition");
    }
    let run = || -> Result<f64> {
        let mut sink = 0.0;
        for p in prompts {
            let prep = model.prepare(p)?;
            match method {
                Method::Cg => sink += prep.grad(p.target_token, Objective::Prob).as_slice().iter().sum::<f64>(),
                Method::NeurGrad => sink += estimate_prepared(&prep, p.target_token).iter().map(|e| e.neurgrad).sum::<f64>(),
                Method::Ig => {
                    sink += estimate_ig_prepared(&prep, p.target_token, ig_neurons, ig_steps)?.iter().map(|x| x.1).sum::<f64>()
                }
            }
        }
        Ok(sink)
    };
    for _ in 0..opts.warmups {
        std::hint::black_box(run()?);
    }
    let mut times = Vec::with_capacity(opts.reps);
    for _ in 0..opts.reps {
        let t = Instant::now();
        std::hint::black_box(run()?);
        times.push(t.elapsed().as_secs_f64() / prompts.len() as f64);
    }
    Ok(stats::median(&times))
}

/// `prompt_id,layer,neuron,cg,activation,neurgrad,ig`
pub fn write_estimates_csv<W: Write>(out: W, estimates: &[(usize, Vec<GradientEstimate>)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["prompt_id", "layer", "neuron", "cg", "activation", "neurgrad", "ig"])?;
    for (p, es) in estimates {
        for e in es {
            w.write_record([
                p.to_string(),
                e.neuron.layer.to_string(),
                e.neuron.neuron.to_string(),
                e.cg.to_string(),
                e.activation.to_string(),
                e.neurgrad.to_string(),
                e.ig.map(|v| v.to_string()).unwrap_or_default(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// `method,n_pairs,r,mae,runtime_s`
pub fn write_report_csv<W: Write>(out: W, report: &EstimatorReport) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["method", "n_pairs", "r", "mae", "runtime_s"])?;
    for r in &report.rows {
        w.write_record([
            r.method.clone(),
            r.n_pairs.to_string(),
            r.r.to_string(),
            r.mae.to_string(),
            r.runtime.map(|v| v.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::intervene::Polarity;

    #[test]
    fn neurgrad_sign_algebra() {
        let id = NeuronId::new(0, 0);
        assert_eq!(GradientEstimate::new(id, 0.3, -1.2).neurgrad, -0.3);
        let z = GradientEstimate::new(id, 0.3, 0.0);
        assert_eq!(z.neurgrad, 0.0);
        assert!(z.zero_activation());
    }

    fn truth(slopes: &[f64]) -> Vec<NegRecord> {
        slopes
            .iter()
            .enumerate()
            .map(|(i, &s)| NegRecord {
                neuron: NeuronId::new(0, i),
                prompt_id: 0,
                slope: s,
                r: 1.0,
                is_linear: true,
                polarity: Polarity::of(s),
                activation: 1.0,
            })
            .collect()
    }

    #[test]
    fn identical_and_offset_estimates() {
        let slopes = [0.1, -0.2, 0.05, 0.3];
        let t = truth(&slopes);
        let same: Vec<_> = slopes.iter().enumerate().map(|(i, &s)| (0, NeuronId::new(0, i), s)).collect();
        let s = score_method("x", &t, &same).unwrap();
        assert!((s.r - 1.0).abs() < 1e-12);
        assert_eq!(s.mae, 0.0);
        let off: Vec<_> = slopes.iter().enumerate().map(|(i, &s)| (0, NeuronId::new(0, i), s + 0.1)).collect();
        let s = score_method("x", &t, &off).unwrap();
        assert!((s.r - 1.0).abs() < 1e-12);
        assert!((s.mae - 0.1).abs() < 1e-12);
    }

    #[test]
    fn no_overlap_is_an_error() {
        let t = truth(&[0.1, 0.2]);
        assert!(score_method("x", &t, &[(5, NeuronId::new(0, 0), 1.0)]).is_err());
    }
}
