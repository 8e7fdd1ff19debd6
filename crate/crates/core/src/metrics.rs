//! Cross-context robustness, substitutability windows and forest
//! hyperparameter surfaces.
//!
//! All three persist as long-format CSV with columns `row,col,value,flag`;
//! an undefined value is written empty with a flag.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{input_err, Result};
use crate::model::Model;
use crate::probes::{accuracy, extract_features, rand_accuracy, train_tree, FeatureTable, ForestOptions, VoteKind, VoteProbe};
use crate::tasks::{ContextSpec, Split, TaskSet};

/// Default Tree-Probe grid cap: cells with `N + M < 10`.
pub const DEFAULT_TREE_GRID_CAP: u32 = 10;
pub const DEFAULT_WINDOW: usize = 64;

/// One cell of a long-format table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LongRow {
    pub row: String,
    pub col: String,
    pub value: Option<f64>,
    pub flag: String,
}

pub fn write_long_csv<W: Write>(out: W, rows: &[LongRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["row", "col", "value", "flag"])?;
    for r in rows {
        let v = r.value.map(|v| v.to_string()).unwrap_or_default();
        w.write_record([r.row.as_str(), r.col.as_str(), v.as_str(), r.flag.as_str()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_long_csv<R: std::io::Read>(input: R) -> Result<Vec<LongRow>> {
    let mut r = csv::Reader::from_reader(input);
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        if rec.len() != 4 {
            return input_err("long-format rows need four fields");
        }
        let value = if rec[2].is_empty() {
            None
        } else {
            Some(rec[2].parse::<f64>().map_err(|e| crate::Error::Input(format!("bad value {:?}: {e}", &rec[2])))?)
        };
        rows.push(LongRow { row: rec[0].into(), col: rec[1].into(), value, flag: rec[3].into() });
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessCell {
    /// Context the probe was trained in.
    pub train: String,
    /// Context it was evaluated in.
    pub eval: String,
    /// `None` when the in-context probe is at or below chance.
    pub value: Option<f64>,
}

/// `max(acc_xy - alpha, 0) / max(acc_yy - alpha, 0)`, `None` when the
/// denominator is zero.
pub fn robustness_value(acc_xy: f64, acc_yy: f64, alpha: f64) -> Option<f64> {
    let den = (acc_yy - alpha).max(0.0);
    if den == 0.0 {
        return None;
    }
    Some((acc_xy - alpha).max(0.0) / den)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ProbeFamily {
    Vote(VoteKind),
    /// Forest over argmax features of every neuron.
    Tree(ForestOptions),
}

/// Features of one context: train split for fitting, test split for scoring.
pub struct ContextFeatures {
    pub label: String,
    pub train: FeatureTable,
    pub test: FeatureTable,
}

pub fn context_features(model: &Model, set: &TaskSet, contexts: &[ContextSpec]) -> Result<Vec<ContextFeatures>> {
    contexts
        .iter()
        .map(|c| {
            Ok(ContextFeatures {
                label: c.label(),
                train: extract_features(model, set, Split::Train, c)?,
                test: extract_features(model, set, Split::Test, c)?,
            })
        })
        .collect()
}

/// `acc[x][y]`: probe trained in context `x`, evaluated in context `y`.
/// Vote probes use the top `size` neurons.
pub fn cross_accuracies(features: &[ContextFeatures], family: ProbeFamily, size: usize) -> Result<Vec<Vec<f64>>> {
    if features.len() < 2 {
        return input_err("robustness needs at least two contexts");
    }
    if size == 0 {
        return input_err("neuron count must be positive");
    }
    features
        .iter()
        .map(|x| -> Result<Vec<f64>> {
            match family {
                ProbeFamily::Vote(kind) => {
                    let mut p = VoteProbe::train(kind, &x.train)?;
                    if size > p.ranking.len() {
                        return input_err(format!("neuron count {size} exceeds {}", p.ranking.len()));
                    }
                    p.size = size;
                    features.iter().map(|y| p.accuracy(&y.test)).collect()
                }
                ProbeFamily::Tree(opts) => {
                    let f = train_tree(&x.train.argmax_features(), x.train.correct(), x.train.n_options(), &opts)?;
                    features.iter().map(|y| accuracy(&f.predict_all(&y.test.argmax_features())?, y.test.correct())).collect()
                }
            }
        })
        .collect()
}

/// Cells in row-major `(train, eval)` order.
pub fn robustness_cells(labels: &[String], acc: &[Vec<f64>], alpha: f64) -> Result<Vec<RobustnessCell>> {
    if acc.len() != labels.len() || acc.iter().any(|r| r.len() != labels.len()) {
        return input_err("accuracy matrix must be square and match the labels");
    }
    let mut cells = Vec::with_capacity(labels.len() * labels.len());
    for (x, row) in acc.iter().enumerate() {
        for (y, &a) in row.iter().enumerate() {
            cells.push(RobustnessCell { train: labels[x].clone(), eval: labels[y].clone(), value: robustness_value(a, acc[y][y], alpha) });
        }
    }
    Ok(cells)
}

pub fn robustness_matrix(model: &Model, set: &TaskSet, contexts: &[ContextSpec], family: ProbeFamily, size: usize) -> Result<Vec<RobustnessCell>> {
    let feats = context_features(model, set, contexts)?;
    let acc = cross_accuracies(&feats, family, size)?;
    let labels: Vec<String> = feats.iter().map(|f| f.label.clone()).collect();
    robustness_cells(&labels, &acc, rand_accuracy(set.n_options))
}

pub fn robustness_rows(cells: &[RobustnessCell]) -> Vec<LongRow> {
    cells
        .iter()
        .map(|c| LongRow {
            row: c.train.clone(),
            col: c.eval.clone(),
            value: c.value,
            flag: if c.value.is_none() { "undefined".into() } else { String::new() },
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowAccuracy {
    pub index: usize,
    /// Ranks `start..end` of the probe's ranking.
    pub start: usize,
    pub end: usize,
    pub accuracy: f64,
}

/// Magn-Probe accuracy of every disjoint `window` of consecutive ranks,
/// best window first. A final shorter window covers the remainder.
pub fn substitutability_sweep(probe: &VoteProbe, table: &FeatureTable, window: usize) -> Result<Vec<WindowAccuracy>> {
    let total = probe.ranking.len();
    if window == 0 || window > total {
        return input_err(format!("window {window} outside 1..={total}"));
    }
    (0..total.div_ceil(window))
        .into_par_iter()
        .map(|i| {
            let (start, end) = (i * window, ((i + 1) * window).min(total));
            Ok(WindowAccuracy { index: i, start, end, accuracy: probe.window_accuracy(table, start, end)? })
        })
        .collect()
}

pub fn substitutability_rows(windows: &[WindowAccuracy]) -> Vec<LongRow> {
    windows
        .iter()
        .map(|w| LongRow {
            row: w.index.to_string(),
            col: "accuracy".into(),
            value: Some(w.accuracy),
            flag: if w.end - w.start < windows[0].end - windows[0].start { "partial".into() } else { String::new() },
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TreeCell {
    pub n: u32,
    pub m: u32,
    pub n_trees: usize,
    pub max_depth: usize,
    pub accuracy: f64,
}

/// `(N, M)` pairs with `N + M < cap`, `N` major.
pub fn tree_grid(cap: u32) -> Vec<(u32, u32)> {
    (0..cap).flat_map(|n| (0..cap - n).map(move |m| (n, m))).collect()
}

/// One forest per grid cell with `2^N` trees of depth at most `2^M`; every
/// other option comes from `base`, seed included.
pub fn tree_hyperparam_sweep(
    train: &FeatureTable,
    test: &FeatureTable,
    grid: &[(u32, u32)],
    base: &ForestOptions,
) -> Result<Vec<TreeCell>> {
    if grid.is_empty() {
        return input_err("empty hyperparameter grid");
    }
    if grid.iter().any(|&(n, m)| n > 16 || m > 16) {
        return input_err("grid exponents above 16 are not supported");
    }
    let (xs, ys) = (train.argmax_features(), train.correct());
    let (tx, ty) = (test.argmax_features(), test.correct());
    grid.par_iter()
        .map(|&(n, m)| {
            let opts = ForestOptions { n_trees: 1 << n, max_depth: Some(1 << m), ..*base };
            let f = train_tree(&xs, ys, train.n_options(), &opts)?;
            let acc = accuracy(&f.predict_all(&tx)?, ty)?;
            Ok(TreeCell { n, m, n_trees: opts.n_trees, max_depth: 1 << m, accuracy: acc })
        })
        .collect()
}

pub fn tree_rows(cells: &[TreeCell]) -> Vec<LongRow> {
    cells
        .iter()
        .map(|c| LongRow { row: c.n_trees.to_string(), col: c.max_depth.to_string(), value: Some(c.accuracy), flag: String::new() })
        .collect()
}
