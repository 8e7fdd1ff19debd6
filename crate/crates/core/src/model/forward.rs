use super::params::{BlockLayout, Layout};
use super::tail::TailState;
use super::{
    ForwardTrace, Model, ModelConfig, Nonlinearity, NeuronValues, Objective, PatchSpec, Prompt, TokenDistribution,
};
use crate::error::Result;

pub(crate) const LN_EPS: f64 = 1e-5;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// `y[r] = b + x[r] · W` with `W` stored `[n_in][n_out]`.
pub(crate) fn affine(x: &[f64], n_in: usize, w: &[f64], b: Option<&[f64]>, n_out: usize) -> Vec<f64> {
    let rows = x.len() / n_in;
    let mut out = vec![0.0; rows * n_out];
    for r in 0..rows {
        let y = &mut out[r * n_out..(r + 1) * n_out];
        if let Some(b) = b {
            y.copy_from_slice(b);
        }
        for (i, &xi) in x[r * n_in..(r + 1) * n_in].iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            for (yo, &wo) in y.iter_mut().zip(&w[i * n_out..(i + 1) * n_out]) {
                *yo += xi * wo;
            }
        }
    }
    out
}

/// Per-row normalization statistics kept for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct LnCache {
    pub xhat: Vec<f64>,
    pub rstd: Vec<f64>,
}

pub(crate) fn layer_norm(x: &[f64], d: usize, g: &[f64], b: &[f64]) -> (Vec<f64>, LnCache) {
    let rows = x.len() / d;
    let mut out = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = vec![0.0; rows];
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let mean = xr.iter().sum::<f64>() / d as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        rstd[r] = rs;
        for i in 0..d {
            let h = (xr[i] - mean) * rs;
            xhat[r * d + i] = h;
            out[r * d + i] = g[i] * h + b[i];
        }
    }
    (out, LnCache { xhat, rstd })
}

pub(crate) fn activate(nl: Nonlinearity, x: f64) -> f64 {
    match nl {
        Nonlinearity::Gelu => 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()),
        Nonlinearity::Relu => x.max(0.0),
    }
}

pub(crate) fn activate_grad(nl: Nonlinearity, x: f64) -> f64 {
    match nl {
        Nonlinearity::Gelu => {
            let u = GELU_C * (x + GELU_A * x * x * x);
            let t = u.tanh();
            let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
            0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
        }
        Nonlinearity::Relu => {
            if x > 0.0 {
                1.0
            } else {
                0.0
            }
        }
    }
}

pub(crate) fn softmax_in_place(xs: &mut [f64]) {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - m).exp();
        z += *x;
    }
    for x in xs.iter_mut() {
        *x /= z;
    }
}

pub(crate) struct LayerCache {
    pub x_in: Vec<f64>,
    pub ln1: LnCache,
    pub ln1_out: Vec<f64>,
    /// `[T][3D]`
    pub qkv: Vec<f64>,
    /// `[H][T][T]`, zero above the diagonal.
    pub att: Vec<f64>,
    /// Concatenated head outputs before the output projection, `[T][D]`.
    pub heads: Vec<f64>,
    pub ln2: LnCache,
    pub ln2_out: Vec<f64>,
    pub pre: Vec<f64>,
    /// Post-nonlinearity, post-patch.
    pub act: Vec<f64>,
}

pub(crate) struct FullCache {
    pub len: usize,
    pub layers: Vec<LayerCache>,
    pub lnf: LnCache,
    pub lnf_out: Vec<f64>,
    /// Softmax over the vocabulary for every position, `[T][V]`.
    pub probs: Vec<f64>,
}

/// Causal multi-head attention over all rows of `qkv`; returns
/// `(weights [H][T][T], head outputs [T][D])`.
fn attention(cfg: &ModelConfig, qkv: &[f64], t_len: usize) -> (Vec<f64>, Vec<f64>) {
    let d = cfg.d_model;
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut att = vec![0.0; cfg.n_heads * t_len * t_len];
    let mut heads = vec![0.0; t_len * d];
    for h in 0..cfg.n_heads {
        for t in 0..t_len {
            let q = &qkv[t * 3 * d + h * dh..t * 3 * d + (h + 1) * dh];
            let row = &mut att[(h * t_len + t) * t_len..(h * t_len + t + 1) * t_len];
            for s in 0..=t {
                let k = &qkv[s * 3 * d + d + h * dh..s * 3 * d + d + (h + 1) * dh];
                row[s] = scale * dot(q, k);
            }
            softmax_in_place(&mut row[..=t]);
            let out = &mut heads[t * d + h * dh..t * d + (h + 1) * dh];
            for s in 0..=t {
                let v = &qkv[s * 3 * d + 2 * d + h * dh..s * 3 * d + 2 * d + (h + 1) * dh];
                let w = row[s];
                for (o, &vi) in out.iter_mut().zip(v) {
                    *o += w * vi;
                }
            }
        }
    }
    (att, heads)
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl Model {
    pub(crate) fn block_params(&self, b: &BlockLayout) -> BlockParams<'_> {
        let c = self.config();
        let (d, f) = (c.d_model, c.d_ff);
        let p = &self.data;
        BlockParams {
            ln1_g: &p[b.ln1_g..b.ln1_g + d],
            ln1_b: &p[b.ln1_b..b.ln1_b + d],
            w_qkv: &p[b.w_qkv..b.w_qkv + d * 3 * d],
            b_qkv: &p[b.b_qkv..b.b_qkv + 3 * d],
            w_o: &p[b.w_o..b.w_o + d * d],
            b_o: &p[b.b_o..b.b_o + d],
            ln2_g: &p[b.ln2_g..b.ln2_g + d],
            ln2_b: &p[b.ln2_b..b.ln2_b + d],
            w_in: &p[b.w_in..b.w_in + d * f],
            b_in: &p[b.b_in..b.b_in + f],
            w_out: &p[b.w_out..b.w_out + f * d],
            b_out: &p[b.b_out..b.b_out + d],
        }
    }

    pub(crate) fn head_params(&self, l: &Layout) -> HeadParams<'_> {
        let c = self.config();
        let (d, v) = (c.d_model, c.vocab_size);
        let p = &self.data;
        HeadParams {
            lnf_g: &p[l.lnf_g..l.lnf_g + d],
            lnf_b: &p[l.lnf_b..l.lnf_b + d],
            w_u: &p[l.w_u..l.w_u + d * v],
        }
    }

    /// Full-sequence forward. `patch` edits activations of row `patch_row`.
    pub(crate) fn forward_full(&self, tokens: &[usize], patch: Option<(&PatchSpec, usize)>) -> FullCache {
        let c = self.config();
        let layout = self.layout();
        let (d, f, v) = (c.d_model, c.d_ff, c.vocab_size);
        let t_len = tokens.len();

        let mut x = vec![0.0; t_len * d];
        for (t, &tok) in tokens.iter().enumerate() {
            let e = &self.data[layout.tok_emb + tok * d..layout.tok_emb + (tok + 1) * d];
            let p = &self.data[layout.pos_emb + t * d..layout.pos_emb + (t + 1) * d];
            for i in 0..d {
                x[t * d + i] = e[i] + p[i];
            }
        }

        let mut layers = Vec::with_capacity(c.n_layers);
        for (li, bl) in layout.blocks.iter().enumerate() {
            let bp = self.block_params(bl);
            let (ln1_out, ln1) = layer_norm(&x, d, bp.ln1_g, bp.ln1_b);
            let qkv = affine(&ln1_out, d, bp.w_qkv, Some(bp.b_qkv), 3 * d);
            let (att, heads) = attention(c, &qkv, t_len);
            let proj = affine(&heads, d, bp.w_o, Some(bp.b_o), d);
            let x_mid: Vec<f64> = x.iter().zip(&proj).map(|(a, b)| a + b).collect();
            let (ln2_out, ln2) = layer_norm(&x_mid, d, bp.ln2_g, bp.ln2_b);
            let pre = affine(&ln2_out, d, bp.w_in, Some(bp.b_in), f);
            let mut act: Vec<f64> = pre.iter().map(|&z| activate(c.nonlinearity, z)).collect();
            if let Some((spec, row)) = patch {
                for (n, mode, val) in spec.for_layer(li) {
                    let a = &mut act[row * f + n];
                    *a = mode.apply(*a, val);
                }
            }
            let ff = affine(&act, f, bp.w_out, Some(bp.b_out), d);
            let x_out: Vec<f64> = x_mid.iter().zip(&ff).map(|(a, b)| a + b).collect();
            layers.push(LayerCache { x_in: x, ln1, ln1_out, qkv, att, heads, ln2, ln2_out, pre, act });
            x = x_out;
        }

        let hp = self.head_params(&layout);
        let (lnf_out, lnf) = layer_norm(&x, d, hp.lnf_g, hp.lnf_b);
        let mut probs = affine(&lnf_out, d, hp.w_u, None, v);
        for row in probs.chunks_mut(v) {
            softmax_in_place(row);
        }
        FullCache { len: t_len, layers, lnf, lnf_out, probs }
    }

    /// Forward pass recording every neuron's activation at the answer
    /// position.
    pub fn forward(&self, prompt: &Prompt) -> Result<ForwardTrace> {
        Ok(self.prepare(prompt)?.trace())
    }

    /// Output distribution with activations at the answer position edited
    /// by `patch`. Layers below the lowest patched layer are not recomputed.
    pub fn forward_with_patch(&self, prompt: &Prompt, patch: &PatchSpec) -> Result<TokenDistribution> {
        self.prepare(prompt)?.patched(patch)
    }

    /// Same result as [`Model::forward_with_patch`], recomputed over the whole
    /// sequence from the embeddings up. Used as an independent check on the
    /// incremental path.
    pub fn forward_with_patch_full(&self, prompt: &Prompt, patch: &PatchSpec) -> Result<TokenDistribution> {
        prompt.validate(self.config())?;
        patch.validate(self.config())?;
        let tokens = &prompt.tokens[..=prompt.answer_position];
        let cache = self.forward_full(tokens, Some((patch, prompt.answer_position)));
        let v = self.config().vocab_size;
        let last = cache.len - 1;
        Ok(TokenDistribution { probs: cache.probs[last * v..(last + 1) * v].to_vec() })
    }

    /// Derivative of the target-token probability at the answer position
    /// with respect to every neuron's activation there.
    pub fn grad_wrt_activations(&self, prompt: &Prompt) -> Result<NeuronValues> {
        Ok(self.prepare(prompt)?.grad(prompt.target_token, Objective::Prob))
    }

    /// Runs the prompt once and keeps what later patched forwards and
    /// gradient calls need.
    pub fn prepare(&self, prompt: &Prompt) -> Result<Prepared<'_>> {
        prompt.validate(self.config())?;
        let tokens = &prompt.tokens[..=prompt.answer_position];
        let cache = self.forward_full(tokens, None);
        Ok(Prepared::from_cache(self, cache))
    }
}

pub(crate) struct BlockParams<'a> {
    pub ln1_g: &'a [f64],
    pub ln1_b: &'a [f64],
    pub w_qkv: &'a [f64],
    pub b_qkv: &'a [f64],
    pub w_o: &'a [f64],
    pub b_o: &'a [f64],
    pub ln2_g: &'a [f64],
    pub ln2_b: &'a [f64],
    pub w_in: &'a [f64],
    pub b_in: &'a [f64],
    pub w_out: &'a [f64],
    pub b_out: &'a [f64],
}

pub(crate) struct HeadParams<'a> {
    pub lnf_g: &'a [f64],
    pub lnf_b: &'a [f64],
    pub w_u: &'a [f64],
}

/// A prompt that has been run once. Because the model is causal and the
/// prompt is truncated at its answer position, edits at the answer position
/// only change the last row; everything before it is reused.
pub struct Prepared<'m> {
    pub(crate) model: &'m Model,
    /// Keys and values of rows before the answer position, per layer,
    /// `[T-1][D]` each.
    pub(crate) prefix_k: Vec<Vec<f64>>,
    pub(crate) prefix_v: Vec<Vec<f64>>,
    /// Residual entering each layer at the answer position.
    pub(crate) resid_in: Vec<Vec<f64>>,
    pub(crate) position: usize,
    base: ForwardTrace,
}

impl<'m> Prepared<'m> {
    fn from_cache(model: &'m Model, cache: FullCache) -> Self {
        let c = model.config();
        let (d, f, v) = (c.d_model, c.d_ff, c.vocab_size);
        let last = cache.len - 1;
        let mut prefix_k = Vec::with_capacity(c.n_layers);
        let mut prefix_v = Vec::with_capacity(c.n_layers);
        let mut resid_in = Vec::with_capacity(c.n_layers);
        let mut activations = NeuronValues::new(c.n_layers, f);
        for (l, lc) in cache.layers.iter().enumerate() {
            let mut ks = Vec::with_capacity(last * d);
            let mut vs = Vec::with_capacity(last * d);
            for t in 0..last {
                ks.extend_from_slice(&lc.qkv[t * 3 * d + d..t * 3 * d + 2 * d]);
                vs.extend_from_slice(&lc.qkv[t * 3 * d + 2 * d..(t + 1) * 3 * d]);
            }
            prefix_k.push(ks);
            prefix_v.push(vs);
            resid_in.push(lc.x_in[last * d..(last + 1) * d].to_vec());
            activations.layer_mut(l).copy_from_slice(&lc.act[last * f..(last + 1) * f]);
        }
        let output = TokenDistribution { probs: cache.probs[last * v..(last + 1) * v].to_vec() };
        Prepared { model, prefix_k, prefix_v, resid_in, position: last, base: ForwardTrace { activations, output } }
    }

    pub fn model(&self) -> &Model {
        self.model
    }

    pub fn trace(&self) -> ForwardTrace {
        self.base.clone()
    }

    pub fn activations(&self) -> &NeuronValues {
        &self.base.activations
    }

    pub fn output(&self) -> &TokenDistribution {
        &self.base.output
    }

    /// Output distribution under `patch`.
    pub fn patched(&self, patch: &PatchSpec) -> Result<TokenDistribution> {
        patch.validate(self.model.config())?;
        let Some(start) = patch.first_layer() else {
            return Ok(self.base.output.clone());
        };
        let state = TailState::run(self, start, patch);
        Ok(state.output())
    }

    /// Activations and output under `patch`.
    pub fn patched_trace(&self, patch: &PatchSpec) -> Result<ForwardTrace> {
        patch.validate(self.model.config())?;
        let Some(start) = patch.first_layer() else {
            return Ok(self.base.clone());
        };
        let state = TailState::run(self, start, patch);
        Ok(ForwardTrace { activations: state.activations(), output: state.output() })
    }

    /// Gradient of the objective for `target` with respect to every neuron's
    /// activation at the answer position (unpatched).
    pub fn grad(&self, target: usize, objective: Objective) -> NeuronValues {
        let state = TailState::run(self, 0, &PatchSpec::empty());
        state.backward(target, objective)
    }

    /// Output distribution and activation gradients (for layers at or above
    /// the lowest patched layer) under `patch`.
    pub fn patched_grad(
        &self,
        patch: &PatchSpec,
        target: usize,
        objective: Objective,
    ) -> Result<(TokenDistribution, NeuronValues)> {
        patch.validate(self.model.config())?;
        let start = patch.first_layer().unwrap_or(0);
        let state = TailState::run(self, start, patch);
        let g = state.backward(target, objective);
        Ok((state.output(), g))
    }
}
