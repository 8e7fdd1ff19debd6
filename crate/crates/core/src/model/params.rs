use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::ModelConfig;
use crate::error::Result;

/// Standard deviation of the normal weight initialization.
pub(crate) const INIT_STD: f64 = 0.02;

/// Offsets of one block's tensors inside the flat parameter vector.
#[derive(Debug, Clone, Copy)]
pub(crate) struct BlockLayout {
    pub ln1_g: usize,
    pub ln1_b: usize,
    /// `[d_model][3 * d_model]`, columns are `q | k | v`.
    pub w_qkv: usize,
    pub b_qkv: usize,
    /// `[d_model][d_model]`
    pub w_o: usize,
    pub b_o: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
    /// `[d_model][d_ff]`
    pub w_in: usize,
    pub b_in: usize,
    /// `[d_ff][d_model]`; row `n` is neuron `n`'s down-projection.
    pub w_out: usize,
    pub b_out: usize,
}

/// Where every tensor lives in the flat parameter vector. The order here is
/// also the on-disk tensor order.
#[derive(Debug, Clone)]
pub(crate) struct Layout {
    /// `[vocab][d_model]`
    pub tok_emb: usize,
    /// `[max_seq][d_model]`
    pub pos_emb: usize,
    pub blocks: Vec<BlockLayout>,
    pub lnf_g: usize,
    pub lnf_b: usize,
    /// `[d_model][vocab]`; column `t` produces token `t`'s logit.
    pub w_u: usize,
    pub len: usize,
}

impl Layout {
    pub fn new(c: &ModelConfig) -> Layout {
        let (d, f, v) = (c.d_model, c.d_ff, c.vocab_size);
        let mut off = 0;
        let mut take = |n: usize| {
            let o = off;
            off += n;
            o
        };
        let tok_emb = take(v * d);
        let pos_emb = take(c.max_seq * d);
        let blocks = (0..c.n_layers)
            .map(|_| BlockLayout {
                ln1_g: take(d),
                ln1_b: take(d),
                w_qkv: take(d * 3 * d),
                b_qkv: take(3 * d),
                w_o: take(d * d),
                b_o: take(d),
                ln2_g: take(d),
                ln2_b: take(d),
                w_in: take(d * f),
                b_in: take(f),
                w_out: take(f * d),
                b_out: take(d),
            })
            .collect();
        let lnf_g = take(d);
        let lnf_b = take(d);
        let w_u = take(d * v);
        Layout { tok_emb, pos_emb, blocks, lnf_g, lnf_b, w_u, len: off }
    }

    /// `(offset, len, kind)` for every tensor in storage order.
    pub fn tensors(&self, c: &ModelConfig) -> Vec<(usize, usize, TensorKind)> {
        let (d, f, v) = (c.d_model, c.d_ff, c.vocab_size);
        let mut out = vec![
            (self.tok_emb, v * d, TensorKind::Embedding),
            (self.pos_emb, c.max_seq * d, TensorKind::Embedding),
        ];
        let residual_scale = 1.0 / ((2 * c.n_layers) as f64).sqrt();
        for b in &self.blocks {
            out.extend([
                (b.ln1_g, d, TensorKind::Ones),
                (b.ln1_b, d, TensorKind::Zeros),
                (b.w_qkv, d * 3 * d, TensorKind::Weight(1.0)),
                (b.b_qkv, 3 * d, TensorKind::Zeros),
                (b.w_o, d * d, TensorKind::Weight(residual_scale)),
                (b.b_o, d, TensorKind::Zeros),
                (b.ln2_g, d, TensorKind::Ones),
                (b.ln2_b, d, TensorKind::Zeros),
                (b.w_in, d * f, TensorKind::Weight(1.0)),
                (b.b_in, f, TensorKind::Zeros),
                (b.w_out, f * d, TensorKind::Weight(residual_scale)),
                (b.b_out, d, TensorKind::Zeros),
            ]);
        }
        out.extend([
            (self.lnf_g, d, TensorKind::Ones),
            (self.lnf_b, d, TensorKind::Zeros),
            (self.w_u, d * v, TensorKind::Weight(1.0)),
        ]);
        out
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) enum TensorKind {
    Embedding,
    /// Normal weights scaled by the factor.
    Weight(f64),
    Ones,
    Zeros,
}

/// Model configuration plus a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    pub(crate) data: Vec<f64>,
}

impl Model {
    /// Seeded initialization: weights and embeddings ~ N(0, 0.02²), residual
    /// output projections additionally scaled by `1/sqrt(2 * n_layers)`,
    /// LayerNorm gains 1, biases 0. Values are rounded to `f32`.
    pub fn init(config: ModelConfig) -> Result<Model> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut data = vec![0.0; layout.len];
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        for (off, len, kind) in layout.tensors(&config) {
            let slot = &mut data[off..off + len];
            match kind {
                TensorKind::Ones => slot.fill(1.0),
                TensorKind::Zeros => {}
                TensorKind::Embedding => slot.iter_mut().for_each(|x| *x = normal.sample(&mut rng)),
                TensorKind::Weight(s) => slot.iter_mut().for_each(|x| *x = s * normal.sample(&mut rng)),
            }
        }
        round_to_f32(&mut data);
        Ok(Model { config, data })
    }

    /// Every parameter set to zero, LayerNorm gains included.
    pub fn zeros(config: ModelConfig) -> Result<Model> {
        config.validate()?;
        let len = Layout::new(&config).len;
        Ok(Model { config, data: vec![0.0; len] })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn n_params(&self) -> usize {
        self.data.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn from_parts(config: ModelConfig, data: Vec<f64>) -> Model {
        Model { config, data }
    }

    pub(crate) fn layout(&self) -> Layout {
        Layout::new(&self.config)
    }

    /// Neuron `n`'s down-projection row in `layer`.
    pub fn down_projection_mut(&mut self, layer: usize, neuron: usize) -> &mut [f64] {
        let d = self.config.d_model;
        let off = self.layout().blocks[layer].w_out + neuron * d;
        &mut self.data[off..off + d]
    }

    /// Scale the unembedding column that produces `token`'s logit.
    pub fn scale_output_column(&mut self, token: usize, factor: f64) {
        let (d, v) = (self.config.d_model, self.config.vocab_size);
        let off = self.layout().w_u;
        for i in 0..d {
            self.data[off + i * v + token] *= factor;
        }
    }
}

pub(crate) fn round_to_f32(xs: &mut [f64]) {
    for x in xs {
        *x = *x as f32 as f64;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_covers_every_parameter_once() {
        let c = ModelConfig { n_layers: 2, d_model: 8, d_ff: 16, n_heads: 2, vocab_size: 11, max_seq: 5, ..Default::default() };
        let l = Layout::new(&c);
        let mut covered = vec![0u8; l.len];
        for (off, len, _) in l.tensors(&c) {
            covered[off..off + len].iter_mut().for_each(|x| *x += 1);
        }
        assert!(covered.iter().all(|&x| x == 1));
    }

    #[test]
    fn init_is_seeded() {
        let c = ModelConfig { n_layers: 1, d_model: 8, d_ff: 8, n_heads: 2, vocab_size: 7, max_seq: 4, ..Default::default() };
        let a = Model::init(c.clone()).unwrap();
        let b = Model::init(c.clone()).unwrap();
        assert_eq!(a, b);
        let d = Model::init(ModelConfig { seed: 1, ..c }).unwrap();
        assert_ne!(a, d);
        assert!(a.data.iter().all(|&x| x == x as f32 as f64));
    }
}
