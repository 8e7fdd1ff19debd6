//! JSON Lines probe files.
//!
//! The first line is a header
//! `{"format":"neglab-probe","version":1,"kind":...,...}`. Vote probes
//! follow with one line per ranked neuron (best first) and, for the
//! activation baseline, one `{"act_means":[...]}` line. Forests follow with
//! one line per tree holding its node list (root first, children by index).

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::forest::{Forest, ForestOptions, Tree};
use super::vote::{NeuronStat, VoteKind, VoteProbe};
use crate::error::{input_err, Error, Result};

pub const PROBE_FORMAT: &str = "neglab-probe";
pub const PROBE_FORMAT_VERSION: u64 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum Probe {
    Vote(VoteProbe),
    Tree(Forest),
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: u64,
    kind: String,
    n_options: usize,
    d_ff: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    n_features: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    options: Option<ForestOptions>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NeuronRecord {
    rank: usize,
    layer: usize,
    neuron: usize,
    consistency: f64,
    rule: i8,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MeansRecord {
    act_means: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TreeRecord {
    tree: usize,
    #[serde(flatten)]
    body: Tree,
}

fn line<T: Serialize>(out: &mut Vec<u8>, v: &T) -> Result<()> {
    serde_json::to_writer(&mut *out, v)?;
    out.push(b'\n');
    Ok(())
}

/// `d_ff` maps flat neuron indices to `(layer, neuron)` in the file.
pub fn save_probe(probe: &Probe, d_ff: usize, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    match probe {
        Probe::Vote(p) => {
            let header = Header {
                format: PROBE_FORMAT.into(),
                version: PROBE_FORMAT_VERSION,
                kind: p.kind.name().into(),
                n_options: p.n_options,
                d_ff,
                size: Some(p.size),
                n_features: None,
                options: None,
            };
            line(&mut out, &header)?;
            for (rank, s) in p.ranking.iter().enumerate() {
                let rec = NeuronRecord { rank, layer: s.neuron / d_ff, neuron: s.neuron % d_ff, consistency: s.consistency, rule: s.rule };
                line(&mut out, &rec)?;
            }
            if let Some(m) = &p.act_means {
                line(&mut out, &MeansRecord { act_means: m.clone() })?;
            }
        }
        Probe::Tree(f) => {
            let header = Header {
                format: PROBE_FORMAT.into(),
                version: PROBE_FORMAT_VERSION,
                kind: "tree".into(),
                n_options: f.n_classes,
                d_ff,
                size: None,
                n_features: Some(f.n_features),
                options: Some(f.options),
            };
            line(&mut out, &header)?;
            for (i, t) in f.trees.iter().enumerate() {
                line(&mut out, &TreeRecord { tree: i, body: t.clone() })?;
            }
        }
    }
    fs::File::create(path)?.write_all(&out)?;
    Ok(())
}

pub fn load_probe(path: &Path) -> Result<Probe> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut lines = Vec::new();
    for (i, l) in reader.lines().enumerate() {
        let l = l?;
        if !l.trim().is_empty() {
            lines.push((i + 1, l));
        }
    }
    let Some((hl, htext)) = lines.first() else {
        return input_err("empty probe file");
    };
    let ferr = |line: usize, e: serde_json::Error| Error::Format { line, msg: e.to_string() };
    let header: Header = serde_json::from_str(htext).map_err(|e| ferr(*hl, e))?;
    if header.format != PROBE_FORMAT || header.version != PROBE_FORMAT_VERSION {
        return Err(Error::Format { line: *hl, msg: "not a version 1 probe file".into() });
    }
    if header.d_ff == 0 {
        return Err(Error::Format { line: *hl, msg: "d_ff must be positive".into() });
    }
    let body = &lines[1..];
    if header.kind == "tree" {
        let (Some(n_features), Some(options)) = (header.n_features, header.options) else {
            return Err(Error::Format { line: *hl, msg: "forest header lacks n_features or options".into() });
        };
        let mut trees = Vec::with_capacity(body.len());
        for (ln, text) in body {
            let rec: TreeRecord = serde_json::from_str(text).map_err(|e| ferr(*ln, e))?;
            if rec.tree != trees.len() {
                return Err(Error::Format { line: *ln, msg: format!("tree {} out of order", rec.tree) });
            }
            trees.push(rec.body);
        }
        return Ok(Probe::Tree(Forest { n_classes: header.n_options, n_features, options, trees }));
    }
    let kind = match header.kind.as_str() {
        "polar" => VoteKind::Polar,
        "magn" => VoteKind::Magn,
        "act" => VoteKind::Act,
        k => return Err(Error::Format { line: *hl, msg: format!("unknown probe kind {k:?}") }),
    };
    let mut ranking = Vec::with_capacity(body.len());
    let mut act_means = None;
    for (ln, text) in body {
        if text.contains("\"act_means\"") {
            let rec: MeansRecord = serde_json::from_str(text).map_err(|e| ferr(*ln, e))?;
            act_means = Some(rec.act_means);
            continue;
        }
        let rec: NeuronRecord = serde_json::from_str(text).map_err(|e| ferr(*ln, e))?;
        if rec.rank != ranking.len() || rec.neuron >= header.d_ff {
            return Err(Error::Format { line: *ln, msg: "neuron record out of order or range".into() });
        }
        ranking.push(NeuronStat { neuron: rec.layer * header.d_ff + rec.neuron, consistency: rec.consistency, rule: rec.rule });
    }
    let size = header.size.unwrap_or(ranking.len());
    Ok(Probe::Vote(VoteProbe { kind, n_options: header.n_options, ranking, size, act_means }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::probes::forest::{train_tree, ForestOptions};

    #[test]
    fn vote_probe_round_trip() {
        let p = VoteProbe {
            kind: VoteKind::Act,
            n_options: 3,
            ranking: vec![
                NeuronStat { neuron: 9, consistency: 0.75, rule: -1 },
                NeuronStat { neuron: 2, consistency: 0.5, rule: 1 },
            ],
            size: 1,
            act_means: Some(vec![0.25; 3 * 12]),
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.jsonl");
        save_probe(&Probe::Vote(p.clone()), 4, &path).unwrap();
        assert_eq!(load_probe(&path).unwrap(), Probe::Vote(p));
    }

    #[test]
    fn forest_round_trip() {
        let xs: Vec<Vec<u8>> = (0..40).map(|i| vec![(i % 3) as u8, (i % 2) as u8, (i % 5 % 2) as u8]).collect();
        let ys: Vec<usize> = (0..40).map(|i| (i % 2 + i % 3) % 2).collect();
        let f = train_tree(&xs, &ys, 2, &ForestOptions { n_trees: 5, seed: 2, ..Default::default() }).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.jsonl");
        save_probe(&Probe::Tree(f.clone()), 3, &path).unwrap();
        assert_eq!(load_probe(&path).unwrap(), Probe::Tree(f));
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        fs::write(&path, "{\"format\":\"neglab-probe\",\"version\":1,\"kind\":\"magn\",\"n_options\":2,\"d_ff\":4,\"colour\":1}\n").unwrap();
        assert!(matches!(load_probe(&path), Err(Error::Format { line: 1, .. })));
    }
}
