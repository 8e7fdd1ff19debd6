//! Run directories and their manifests.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

pub const MANIFEST: &str = "manifest.json";
pub const MANIFEST_FORMAT: &str = "neglab-manifest";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileHash {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u64,
    pub command: String,
    pub seed: u64,
    /// Effective parameters after flags, config file and defaults.
    pub config: Value,
    pub inputs: Vec<FileHash>,
    pub outputs: Vec<FileHash>,
    pub started: String,
    pub wall_clock_s: f64,
    /// Artifact format versions written or read by this build.
    pub formats: Value,
    /// Measurements that are not byte-reproducible, such as timings.
    #[serde(default, skip_serializing_if = "Value::is_null")]
    pub extra: Value,
}

pub fn sha256_file(path: &Path) -> anyhow::Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub struct RunDir {
    pub path: PathBuf,
    command: String,
    started: String,
    clock: Instant,
    inputs: Vec<FileHash>,
    outputs: Vec<String>,
    pub extra: serde_json::Map<String, Value>,
}

impl RunDir {
    /// Creates `<root>/<UTC timestamp>-<command>`, adding a counter if that
    /// name is taken. Existing directories are never reused.
    pub fn create(root: &Path, command: &str) -> anyhow::Result<RunDir> {
        fs::create_dir_all(root).with_context(|| format!("creating {}", root.display()))?;
        let now = chrono::Utc::now();
        let stamp = now.format("%Y%m%dT%H%M%S%.3fZ").to_string();
        let base = format!("{stamp}-{command}");
        let mut path = root.join(&base);
        let mut n = 1;
        loop {
            match fs::create_dir(&path) {
                Ok(()) => break,
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                    path = root.join(format!("{base}-{n}"));
                    n += 1;
                }
                Err(e) => return Err(e).with_context(|| format!("creating {}", path.display())),
            }
        }
        Ok(RunDir {
            path,
            command: command.into(),
            started: now.to_rfc3339(),
            clock: Instant::now(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            extra: Default::default(),
        })
    }

    /// Records an input file's hash.
    pub fn input(&mut self, path: &Path) -> anyhow::Result<()> {
        let sha256 = sha256_file(path)?;
        self.inputs.push(FileHash { path: path.display().to_string(), sha256 });
        Ok(())
    }

    /// Path for an output written by a library function; the file is
    /// registered for the manifest.
    pub fn output(&mut self, name: &str) -> PathBuf {
        self.outputs.push(name.into());
        self.path.join(name)
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> anyhow::Result<()> {
        let path = self.output(name);
        fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))
    }

    /// Runs a writer into a buffer and stores the result.
    pub fn write_with(&mut self, name: &str, f: impl FnOnce(&mut Vec<u8>) -> neglab::Result<()>) -> anyhow::Result<()> {
        let mut buf = Vec::new();
        f(&mut buf)?;
        self.write(name, &buf)
    }

    /// Writes the manifest, last.
    pub fn finish(self, seed: u64, config: Value) -> anyhow::Result<PathBuf> {
        let mut outputs = Vec::with_capacity(self.outputs.len());
        for name in &self.outputs {
            let p = self.path.join(name);
            if !p.is_file() {
                bail!("declared output {name} was not written");
            }
            outputs.push(FileHash { path: name.clone(), sha256: sha256_file(&p)? });
        }
        let manifest = Manifest {
            format: MANIFEST_FORMAT.into(),
            version: 1,
            command: self.command,
            seed,
            config,
            inputs: self.inputs,
            outputs,
            started: self.started,
            wall_clock_s: self.clock.elapsed().as_secs_f64(),
            formats: serde_json::json!({
                "model": neglab::model::FORMAT_VERSION,
                "tasks": neglab::tasks::TASK_FORMAT_VERSION,
                "probe": neglab::probes::io::PROBE_FORMAT_VERSION,
            }),
            extra: if self.extra.is_empty() { Value::Null } else { Value::Object(self.extra) },
        };
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        fs::write(self.path.join(MANIFEST), text)?;
        Ok(self.path)
    }
}

pub fn read_manifest(dir: &Path) -> anyhow::Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let m: Manifest = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    if m.format != MANIFEST_FORMAT {
        bail!("{} is not a run manifest", path.display());
    }
    Ok(m)
}

/// Fails if any listed output is missing or its hash differs.
pub fn verify_outputs(dir: &Path, m: &Manifest) -> anyhow::Result<()> {
    for f in &m.outputs {
        let got = sha256_file(&dir.join(&f.path))?;
        if got != f.sha256 {
            bail!("{}: hash mismatch for {}", dir.display(), f.path);
        }
    }
    Ok(())
}
