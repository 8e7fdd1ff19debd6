//! Activation sweeps, zero-intercept NEG fits, and linearity / generality
//! statistics.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{input_err, Error, Result};
use crate::model::{Model, NeuronId, PatchMode, PatchSpec, Prepared, Prompt};
use crate::stats;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub lo: f64,
    pub hi: f64,
    pub step: f64,
    /// Half-width of the window used for the regression.
    pub fit_window: f64,
    pub mode: PatchMode,
}

impl Default for SweepSpec {
    fn default() -> Self {
        SweepSpec { lo: -10.0, hi: 10.0, step: 0.2, fit_window: 2.0, mode: PatchMode::SignRelativeDelta }
    }
}

impl SweepSpec {
    /// `[-w, w]` in steps of `step`, fitted over the whole range.
    pub fn window(w: f64, step: f64, mode: PatchMode) -> Self {
        SweepSpec { lo: -w, hi: w, step, fit_window: w, mode }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lo.is_finite() && self.hi.is_finite() && self.lo < self.hi) {
            return input_err(format!("sweep range [{}, {}] is empty", self.lo, self.hi));
        }
        if !(self.step > 0.0) {
            return input_err("sweep step must be positive");
        }
        let n = (self.hi - self.lo) / self.step;
        if (n - n.round()).abs() > 1e-9 * n.max(1.0) {
            return input_err(format!("step {} does not divide [{}, {}]", self.step, self.lo, self.hi));
        }
        if self.mode == PatchMode::SetValue {
            return input_err("sweeps shift activations; set_value is not a shift");
        }
        if !(self.fit_window > 0.0) || self.fit_window > self.lo.abs().max(self.hi) + 1e-12 {
            return input_err(format!("fit window {} outside the sweep range", self.fit_window));
        }
        Ok(())
    }

    /// Shift values, ascending. Values within 1e-9 of zero are snapped to 0.
    pub fn grid(&self) -> Vec<f64> {
        let n = ((self.hi - self.lo) / self.step).round() as usize;
        (0..=n)
            .map(|i| {
                let x = self.lo + i as f64 * self.step;
                if x.abs() < 1e-9 {
                    0.0
                } else {
                    x
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCurve {
    pub neuron: NeuronId,
    pub prompt_id: usize,
    pub target: usize,
    pub shifts: Vec<f64>,
    pub probs: Vec<f64>,
    pub baseline_prob: f64,
    pub activation: f64,
}

/// One patched forward per shift in `spec.grid()`.
pub fn sweep(model: &Model, prompt: &Prompt, prompt_id: usize, neuron: NeuronId, spec: &SweepSpec) -> Result<SweepCurve> {
    let prep = model.prepare(prompt)?;
    sweep_prepared(&prep, prompt.target_token, prompt_id, neuron, spec)
}

/// [`sweep`] reusing an already-run prompt.
pub fn sweep_prepared(prep: &Prepared<'_>, target: usize, prompt_id: usize, neuron: NeuronId, spec: &SweepSpec) -> Result<SweepCurve> {
    spec.validate()?;
    prep.model().config().check_neuron(neuron)?;
    let shifts = spec.grid();
    let probs = shifts
        .iter()
        .map(|&s| Ok(prep.patched(&PatchSpec::single(neuron, spec.mode, s))?.prob(target)))
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepCurve {
        neuron,
        prompt_id,
        target,
        shifts,
        probs,
        baseline_prob: prep.output().prob(target),
        activation: prep.activations().get(neuron),
    })
}

/// Central difference `(p(+h) - p(-h)) / 2h` of the target probability with
/// respect to a shift of `neuron` in `mode`.
pub fn central_difference(prep: &Prepared<'_>, target: usize, neuron: NeuronId, mode: PatchMode, h: f64) -> Result<f64> {
    let up = prep.patched(&PatchSpec::single(neuron, mode, h))?.prob(target);
    let down = prep.patched(&PatchSpec::single(neuron, mode, -h))?.prob(target);
    Ok((up - down) / (2.0 * h))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Positive,
    Negative,
    Null,
}

impl Polarity {
    pub fn of(x: f64) -> Polarity {
        if x > 0.0 {
            Polarity::Positive
        } else if x < 0.0 {
            Polarity::Negative
        } else {
            Polarity::Null
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Polarity::Positive => "positive",
            Polarity::Negative => "negative",
            Polarity::Null => "null",
        }
    }
}

impl fmt::Display for Polarity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NegRecord {
    pub neuron: NeuronId,
    pub prompt_id: usize,
    /// Probability change per unit shift.
    pub slope: f64,
    /// Pearson r on the fitted points; 0 when undefined (flat curve).
    pub r: f64,
    pub is_linear: bool,
    pub polarity: Polarity,
    pub activation: f64,
}

pub const DEFAULT_LINEARITY_THRESHOLD: f64 = 0.95;

/// Zero-intercept regression of `prob - baseline` on shift over the points
/// with `|shift| <= fit_window`.
pub fn fit_neg(curve: &SweepCurve, spec: &SweepSpec, threshold: f64) -> Result<NegRecord> {
    if curve.shifts.len() != curve.probs.len() {
        return input_err("sweep curve lists differ in length");
    }
    let tol = 1e-9 * spec.fit_window.max(1.0);
    let (xs, ys): (Vec<f64>, Vec<f64>) = curve
        .shifts
        .iter()
        .zip(&curve.probs)
        .filter(|(s, _)| s.abs() <= spec.fit_window + tol)
        .map(|(&s, &p)| (s, p - curve.baseline_prob))
        .unzip();
    if xs.len() < 3 {
        return input_err(format!("only {} sweep points inside the fit window", xs.len()));
    }
    let slope = stats::zero_intercept_slope(&xs, &ys)?;
    let r = match stats::pearson(&xs, &ys) {
        Ok(r) => r,
        Err(Error::UndefinedCorrelation(_)) => 0.0,
        Err(e) => return Err(e),
    };
    Ok(NegRecord {
        neuron: curve.neuron,
        prompt_id: curve.prompt_id,
        slope,
        r,
        is_linear: r.abs() >= threshold,
        polarity: Polarity::of(slope),
        activation: curve.activation,
    })
}

/// Coverage and spread of linear neurons over layers and prompts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeneralityStats {
    pub lg: f64,
    pub pg: f64,
    pub coverage_layer: f64,
    pub coverage_prompt: f64,
    pub distribution_layer: f64,
    pub distribution_prompt: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregateStats {
    pub n_records: usize,
    pub linear_ratio: f64,
    pub positive_ratio: f64,
    pub negative_ratio: f64,
    pub null_ratio: f64,
    pub generality: GeneralityStats,
}

/// `(coverage, distribution)` for per-bin linear-neuron counts.
///
/// `distribution = 1 - Var(counts) / maxVar`, where `maxVar = T^2 (B-1) / B^2`
/// is the population variance when all `T` linear neurons sit in one of the
/// `B` bins. With no linear neurons the distribution is 0; with one bin it
/// is 1.
pub fn coverage_distribution(counts: &[usize]) -> (f64, f64) {
    let b = counts.len();
    if b == 0 {
        return (0.0, 0.0);
    }
    let total: usize = counts.iter().sum();
    let coverage = counts.iter().filter(|&&c| c > 0).count() as f64 / b as f64;
    let distribution = if total == 0 {
        0.0
    } else if b == 1 {
        1.0
    } else {
        let xs: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
        let t = total as f64;
        let bf = b as f64;
        let max_var = t * t * (bf - 1.0) / (bf * bf);
        (1.0 - stats::variance(&xs) / max_var).clamp(0.0, 1.0)
    };
    (coverage, distribution)
}

/// Ratios over all records and generality over the layers and prompts that
/// occur in them.
pub fn aggregate_stats(records: &[NegRecord]) -> Result<AggregateStats> {
    if records.is_empty() {
        return input_err("no records to aggregate");
    }
    let n = records.len() as f64;
    let count = |f: &dyn Fn(&NegRecord) -> bool| records.iter().filter(|r| f(r)).count() as f64 / n;
    let mut by_layer: BTreeMap<usize, usize> = BTreeMap::new();
    let mut by_prompt: BTreeMap<usize, usize> = BTreeMap::new();
    for r in records {
        *by_layer.entry(r.neuron.layer).or_default() += usize::from(r.is_linear);
        *by_prompt.entry(r.prompt_id).or_default() += usize::from(r.is_linear);
    }
    let (cl, dl) = coverage_distribution(&by_layer.values().copied().collect::<Vec<_>>());
    let (cp, dp) = coverage_distribution(&by_prompt.values().copied().collect::<Vec<_>>());
    Ok(AggregateStats {
        n_records: records.len(),
        linear_ratio: count(&|r| r.is_linear),
        positive_ratio: count(&|r| r.polarity == Polarity::Positive),
        negative_ratio: count(&|r| r.polarity == Polarity::Negative),
        null_ratio: count(&|r| r.polarity == Polarity::Null),
        generality: GeneralityStats {
            lg: cl * dl,
            pg: cp * dp,
            coverage_layer: cl,
            coverage_prompt: cp,
            distribution_layer: dl,
            distribution_prompt: dp,
        },
    })
}

/// Mean `|r|` per prompt, then over prompts, for each fit window.
pub fn mean_abs_r_by_window(curves: &[SweepCurve], spec: &SweepSpec, windows: &[f64]) -> Result<Vec<(f64, f64)>> {
    windows
        .iter()
        .map(|&w| {
            let s = SweepSpec { fit_window: w, ..*spec };
            let mut per_prompt: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
            for c in curves {
                per_prompt.entry(c.prompt_id).or_default().push(fit_neg(c, &s, DEFAULT_LINEARITY_THRESHOLD)?.r.abs());
            }
            let means: Vec<f64> = per_prompt.values().map(|v| stats::mean(v)).collect();
            Ok((w, stats::mean(&means)))
        })
        .collect()
}

/// `prompt_id,layer,neuron,shift,prob`
pub fn write_sweeps_csv<W: Write>(out: W, curves: &[SweepCurve]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["prompt_id", "layer", "neuron", "shift", "prob"])?;
    for c in curves {
        for (s, p) in c.shifts.iter().zip(&c.probs) {
            w.write_record([
                c.prompt_id.to_string(),
                c.neuron.layer.to_string(),
                c.neuron.neuron.to_string(),
                s.to_string(),
                p.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// `prompt_id,layer,neuron,slope,r,is_linear,polarity,activation`
pub fn write_negs_csv<W: Write>(out: W, records: &[NegRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["prompt_id", "layer", "neuron", "slope", "r", "is_linear", "polarity", "activation"])?;
    for r in records {
        w.write_record([
            r.prompt_id.to_string(),
            r.neuron.layer.to_string(),
            r.neuron.neuron.to_string(),
            r.slope.to_string(),
            r.r.to_string(),
            r.is_linear.to_string(),
            r.polarity.to_string(),
            r.activation.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn curve(spec: &SweepSpec, f: impl Fn(f64) -> f64) -> SweepCurve {
        let shifts = spec.grid();
        let probs = shifts.iter().map(|&s| 0.3 + f(s)).collect();
        SweepCurve { neuron: NeuronId::new(0, 0), prompt_id: 0, target: 0, shifts, probs, baseline_prob: 0.3, activation: 1.0 }
    }

    fn rec(layer: usize, prompt_id: usize, linear: bool) -> NegRecord {
        NegRecord {
            neuron: NeuronId::new(layer, 0),
            prompt_id,
            slope: 0.1,
            r: if linear { 1.0 } else { 0.0 },
            is_linear: linear,
            polarity: Polarity::Positive,
            activation: 0.0,
        }
    }

    #[test]
    fn grid_arithmetic() {
        let s = SweepSpec::window(2.0, 0.2, PatchMode::AbsoluteDelta);
        let g = s.grid();
        assert_eq!(g.len(), 21);
        assert_eq!(g[10], 0.0);
        assert_eq!(SweepSpec::default().grid().len(), 101);
    }

    #[test]
    fn spec_validation() {
        assert!(SweepSpec { step: 0.3, ..SweepSpec::window(1.0, 0.2, PatchMode::AbsoluteDelta) }.validate().is_err());
        assert!(SweepSpec { fit_window: 3.0, ..SweepSpec::window(2.0, 0.2, PatchMode::AbsoluteDelta) }.validate().is_err());
        assert!(SweepSpec { lo: 1.0, hi: 1.0, ..SweepSpec::default() }.validate().is_err());
        assert!(SweepSpec::default().validate().is_ok());
    }

    #[test]
    fn exact_line_fit() {
        let s = SweepSpec::default();
        let r = fit_neg(&curve(&s, |x| 0.5 * x), &s, 0.95).unwrap();
        assert!((r.slope - 0.5).abs() < 1e-12);
        assert!((r.r - 1.0).abs() < 1e-12);
        assert!(r.is_linear);
        assert_eq!(r.polarity, Polarity::Positive);
    }

    #[test]
    fn flat_curve_is_null_and_not_linear() {
        let s = SweepSpec::default();
        let r = fit_neg(&curve(&s, |_| 0.0), &s, 0.95).unwrap();
        assert_eq!(r.slope, 0.0);
        assert_eq!(r.polarity, Polarity::Null);
        assert!(!r.is_linear);
    }

    #[test]
    fn fit_uses_only_the_window() {
        let s = SweepSpec::default();
        // Linear inside +-2, wild outside.
        let r = fit_neg(&curve(&s, |x| if x.abs() <= 2.0 + 1e-9 { -0.1 * x } else { 5.0 }), &s, 0.95).unwrap();
        assert!((r.slope + 0.1).abs() < 1e-12);
        assert_eq!(r.polarity, Polarity::Negative);
    }

    #[test]
    fn too_few_points() {
        let s = SweepSpec { fit_window: 0.3, ..SweepSpec::window(1.0, 0.5, PatchMode::AbsoluteDelta) };
        assert!(fit_neg(&curve(&s, |x| x), &s, 0.95).is_err());
    }

    #[test]
    fn perfect_generality() {
        let recs: Vec<NegRecord> = (0..4).flat_map(|l| (0..3).map(move |p| rec(l, p, true))).collect();
        let a = aggregate_stats(&recs).unwrap();
        assert_eq!(a.generality.lg, 1.0);
        assert_eq!(a.generality.pg, 1.0);
        assert_eq!(a.linear_ratio, 1.0);
    }

    #[test]
    fn single_layer_skew() {
        let recs: Vec<NegRecord> = (0..4).flat_map(|l| (0..3).map(move |p| rec(l, p, l == 2))).collect();
        let a = aggregate_stats(&recs).unwrap();
        assert_eq!(a.generality.coverage_layer, 0.25);
        assert_eq!(a.generality.distribution_layer, 0.0);
        assert_eq!(a.generality.lg, 0.0);
    }

    #[test]
    fn polarity_ratios_partition() {
        let mut recs = vec![rec(0, 0, true), rec(1, 0, false), rec(2, 1, true)];
        recs[1].polarity = Polarity::Null;
        recs[2].polarity = Polarity::Negative;
        let a = aggregate_stats(&recs).unwrap();
        assert!((a.positive_ratio + a.negative_ratio + a.null_ratio - 1.0).abs() < 1e-12);
        assert!(aggregate_stats(&[]).is_err());
    }

    #[test]
    fn csv_layout() {
        let s = SweepSpec::window(0.4, 0.2, PatchMode::AbsoluteDelta);
        let mut buf = Vec::new();
        write_sweeps_csv(&mut buf, &[curve(&s, |x| x)]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("prompt_id,layer,neuron,shift,prob\n"));
        assert_eq!(text.lines().count(), 6);
    }
}
