//! Collects finished runs into derived tables.
//!
//! * `index.csv`: one row per output file of every run.
//! * `<run>__<file>` for every long-format table (`row,col,value,flag`),
//!   pivoted wide: one line per row key, one column per column key.
//! * `probes_all.csv`: every probe report row, prefixed with its run.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};

use neglab::metrics::read_long_csv;

use crate::run::{read_manifest, verify_outputs, Manifest, RunDir, MANIFEST};

/// Run directories under `from` (or `from` itself), in name order. Report
/// runs are skipped.
pub fn find_runs(from: &Path) -> anyhow::Result<Vec<(PathBuf, Manifest)>> {
    if from.join(MANIFEST).is_file() {
        return Ok(vec![(from.to_path_buf(), read_manifest(from)?)]);
    }
    let mut dirs: Vec<PathBuf> = match fs::read_dir(from) {
        Ok(rd) => rd.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.join(MANIFEST).is_file()).collect(),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
        Err(e) => return Err(e).with_context(|| format!("reading {}", from.display())),
    };
    dirs.sort();
    let mut out = Vec::new();
    for d in dirs {
        let m = read_manifest(&d)?;
        if m.command != "report" {
            out.push((d, m));
        }
    }
    Ok(out)
}

fn is_long(path: &Path) -> bool {
    fs::read_to_string(path).map(|t| t.lines().next() == Some("row,col,value,flag")).unwrap_or(false)
}

fn pivot(path: &Path) -> anyhow::Result<Vec<u8>> {
    let rows = read_long_csv(fs::File::open(path)?)?;
    let mut row_keys: Vec<&str> = Vec::new();
    let mut col_keys: Vec<&str> = Vec::new();
    for r in &rows {
        if !row_keys.contains(&r.row.as_str()) {
            row_keys.push(&r.row);
        }
        if !col_keys.contains(&r.col.as_str()) {
            col_keys.push(&r.col);
        }
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["row".to_string()];
    header.extend(col_keys.iter().map(|c| c.to_string()));
    w.write_record(&header)?;
    for rk in &row_keys {
        let mut line = vec![rk.to_string()];
        for ck in &col_keys {
            let cell = rows.iter().find(|r| r.row == *rk && r.col == *ck).and_then(|r| r.value);
            line.push(cell.map(|v| v.to_string()).unwrap_or_default());
        }
        w.write_record(&line)?;
    }
    Ok(w.into_inner().map_err(|e| anyhow::anyhow!("{e}"))?)
}

/// `runs` comes from [`find_runs`] and must be nonempty.
pub fn report(runs: &[(PathBuf, Manifest)], run: &mut RunDir) -> anyhow::Result<()> {
    if runs.is_empty() {
        bail!("no results found");
    }
    let mut index = csv::Writer::from_writer(Vec::new());
    index.write_record(["run", "command", "seed", "file", "sha256"])?;
    let mut probes = csv::Writer::from_writer(Vec::new());
    let mut probe_header = false;
    for (dir, m) in runs {
        verify_outputs(dir, m)?;
        run.input(&dir.join(MANIFEST))?;
        let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        for f in &m.outputs {
            index.write_record([name.as_str(), m.command.as_str(), &m.seed.to_string(), f.path.as_str(), f.sha256.as_str()])?;
            let path = dir.join(&f.path);
            if f.path.ends_with(".csv") && is_long(&path) {
                let wide = pivot(&path)?;
                run.write(&format!("{name}__{}", f.path), &wide)?;
            }
            if f.path == "probes.csv" {
                let mut r = csv::Reader::from_path(&path)?;
                if !probe_header {
                    let mut h = vec!["run".to_string()];
                    h.extend(r.headers()?.iter().map(String::from));
                    probes.write_record(&h)?;
                    probe_header = true;
                }
                for rec in r.records() {
                    let mut line = vec![name.clone()];
                    line.extend(rec?.iter().map(String::from));
                    probes.write_record(&line)?;
                }
            }
        }
    }
    run.write("index.csv", &index.into_inner().map_err(|e| anyhow::anyhow!("{e}"))?)?;
    if probe_header {
        run.write("probes_all.csv", &probes.into_inner().map_err(|e| anyhow::anyhow!("{e}"))?)?;
    }
    Ok(())
}
