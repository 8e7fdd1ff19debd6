//! Little-endian flat binary model files and their plain-text config sidecar.
//!
//! ```text
//! offset  size        field
//! 0       4           magic "NGLB"
//! 4       8           format version (u64) = 1
//! 12      8 x 8       n_layers, d_model, d_ff, n_heads, vocab_size, max_seq,
//!                     nonlinearity (0 = gelu, 1 = relu), seed   (u64 each)
//! 76      8           parameter count P (u64)
//! 84      4 x P       parameters as f32, tensors in this order:
//!                       tok_emb [vocab][d_model], pos_emb [max_seq][d_model],
//!                       per layer: ln1_g, ln1_b, w_qkv [d][3d], b_qkv,
//!                                  w_o [d][d], b_o, ln2_g, ln2_b,
//!                                  w_in [d][d_ff], b_in, w_out [d_ff][d], b_out,
//!                       lnf_g, lnf_b, w_u [d_model][vocab]
//! ```
//! All matrices are row-major with the input dimension first.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use super::params::Layout;
use super::{Model, ModelConfig, Nonlinearity};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"NGLB";
pub const FORMAT_VERSION: u64 = 1;

fn format_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Format { line: 0, msg: msg.into() })
}

pub fn save_model(model: &Model, path: &Path) -> Result<()> {
    let c = model.config();
    let mut buf = Vec::with_capacity(84 + 4 * model.n_params());
    buf.extend_from_slice(MAGIC);
    let nl = match c.nonlinearity {
        Nonlinearity::Gelu => 0u64,
        Nonlinearity::Relu => 1,
    };
    for x in [
        FORMAT_VERSION,
        c.n_layers as u64,
        c.d_model as u64,
        c.d_ff as u64,
        c.n_heads as u64,
        c.vocab_size as u64,
        c.max_seq as u64,
        nl,
        c.seed,
        model.n_params() as u64,
    ] {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    for &p in model.params() {
        buf.extend_from_slice(&(p as f32).to_le_bytes());
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<Model> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 84 || &bytes[..4] != MAGIC {
        return format_err("not an NGLB model file");
    }
    let word = |i: usize| u64::from_le_bytes(bytes[4 + 8 * i..12 + 8 * i].try_into().expect("8 bytes"));
    if word(0) != FORMAT_VERSION {
        return format_err(format!("unsupported model format version {}", word(0)));
    }
    let nonlinearity = match word(7) {
        0 => Nonlinearity::Gelu,
        1 => Nonlinearity::Relu,
        x => return format_err(format!("unknown nonlinearity code {x}")),
    };
    let config = ModelConfig {
        n_layers: word(1) as usize,
        d_model: word(2) as usize,
        d_ff: word(3) as usize,
        n_heads: word(4) as usize,
        vocab_size: word(5) as usize,
        max_seq: word(6) as usize,
        nonlinearity,
        seed: word(8),
    };
    config.validate()?;
    let count = word(9) as usize;
    let expected = Layout::new(&config).len;
    if count != expected || bytes.len() != 84 + 4 * count {
        return format_err(format!("parameter count {count} does not match config ({expected})"));
    }
    let data = bytes[84..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
        .collect();
    Ok(Model::from_parts(config, data))
}

/// `key = value` lines mirroring [`ModelConfig`].
pub fn write_config_sidecar(config: &ModelConfig, path: &Path) -> Result<()> {
    let nl = match config.nonlinearity {
        Nonlinearity::Gelu => "gelu",
        Nonlinearity::Relu => "relu",
    };
    let text = format!(
        "n_layers = {}\nd_model = {}\nd_ff = {}\nn_heads = {}\nvocab_size = {}\nmax_seq = {}\nnonlinearity = \"{}\"\nseed = {}\n",
        config.n_layers, config.d_model, config.d_ff, config.n_heads, config.vocab_size, config.max_seq, nl, config.seed
    );
    fs::write(path, text)?;
    Ok(())
}

pub fn read_config_sidecar(path: &Path) -> Result<ModelConfig> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut cfg = ModelConfig::default();
    let mut seen = 0;
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |msg: String| Error::Format { line: i + 1, msg };
        let (k, v) = line.split_once('=').ok_or_else(|| err(format!("expected key = value, got {line:?}")))?;
        let (k, v) = (k.trim(), v.trim().trim_matches('"'));
        let num = || v.parse::<u64>().map_err(|_| err(format!("{k}: not an integer: {v:?}")));
        match k {
            "n_layers" => cfg.n_layers = num()? as usize,
            "d_model" => cfg.d_model = num()? as usize,
            "d_ff" => cfg.d_ff = num()? as usize,
            "n_heads" => cfg.n_heads = num()? as usize,
            "vocab_size" => cfg.vocab_size = num()? as usize,
            "max_seq" => cfg.max_seq = num()? as usize,
            "seed" => cfg.seed = num()?,
            "nonlinearity" => {
                cfg.nonlinearity = match v {
                    "gelu" => Nonlinearity::Gelu,
                    "relu" => Nonlinearity::Relu,
                    _ => return Err(err(format!("unknown nonlinearity {v:?}"))),
                }
            }
            _ => return Err(err(format!("unknown field {k:?}"))),
        }
        seen += 1;
    }
    if seen != 8 {
        return format_err(format!("config sidecar has {seen} of 8 fields"));
    }
    cfg.validate()?;
    Ok(cfg)
}
