//! Single-row recomputation at the answer position.
//!
//! With the prompt truncated at its answer position, that position is the
//! last row. Rows before it never attend to it, so an edit there leaves their
//! keys and values untouched: the patched forward and its backward pass only
//! have to follow the last row through the layers at or above the edit.

use super::backward::layer_norm_backward_row;
use super::forward::{activate, activate_grad, affine, dot, layer_norm, softmax_in_place, LnCache, Prepared};
use super::{NeuronValues, Objective, PatchMode, PatchSpec, TokenDistribution};

struct RowLayer {
    ln1: LnCache,
    qkv: Vec<f64>,
    /// `[H][T]` attention of the last row over all rows.
    att: Vec<f64>,
    ln2: LnCache,
    pre: Vec<f64>,
    act: Vec<f64>,
    /// Neurons whose value was overwritten; no gradient reaches `pre` there.
    clamped: Vec<bool>,
}

pub(crate) struct TailState<'p, 'm> {
    prep: &'p Prepared<'m>,
    start: usize,
    layers: Vec<RowLayer>,
    lnf: LnCache,
    probs: Vec<f64>,
}

impl<'p, 'm> TailState<'p, 'm> {
    pub fn run(prep: &'p Prepared<'m>, start: usize, patch: &PatchSpec) -> Self {
        let model = prep.model;
        let c = model.config();
        let layout = model.layout();
        let (d, f, v) = (c.d_model, c.d_ff, c.vocab_size);
        let (nh, dh) = (c.n_heads, c.head_dim());
        let scale = 1.0 / (dh as f64).sqrt();
        let t_len = prep.position + 1;

        let mut x = prep.resid_in[start].clone();
        let mut layers = Vec::with_capacity(c.n_layers - start);
        for l in start..c.n_layers {
            let bp = model.block_params(&layout.blocks[l]);
            let (ln1_out, ln1) = layer_norm(&x, d, bp.ln1_g, bp.ln1_b);
            let qkv = affine(&ln1_out, d, bp.w_qkv, Some(bp.b_qkv), 3 * d);
            let pk = &prep.prefix_k[l];
            let pv = &prep.prefix_v[l];
            let mut att = vec![0.0; nh * t_len];
            let mut heads = vec![0.0; d];
            for h in 0..nh {
                let q = &qkv[h * dh..(h + 1) * dh];
                let k_self = &qkv[d + h * dh..d + (h + 1) * dh];
                let v_self = &qkv[2 * d + h * dh..2 * d + (h + 1) * dh];
                let row = &mut att[h * t_len..(h + 1) * t_len];
                for s in 0..t_len - 1 {
                    row[s] = scale * dot(q, &pk[s * d + h * dh..s * d + (h + 1) * dh]);
                }
                row[t_len - 1] = scale * dot(q, k_self);
                softmax_in_place(row);
                let out = &mut heads[h * dh..(h + 1) * dh];
                for s in 0..t_len {
                    let vs = if s + 1 == t_len { v_self } else { &pv[s * d + h * dh..s * d + (h + 1) * dh] };
                    for (o, &vi) in out.iter_mut().zip(vs) {
                        *o += row[s] * vi;
                    }
                }
            }
            let proj = affine(&heads, d, bp.w_o, Some(bp.b_o), d);
            let x_mid: Vec<f64> = x.iter().zip(&proj).map(|(a, b)| a + b).collect();
            let (ln2_out, ln2) = layer_norm(&x_mid, d, bp.ln2_g, bp.ln2_b);
            let pre = affine(&ln2_out, d, bp.w_in, Some(bp.b_in), f);
            let mut act: Vec<f64> = pre.iter().map(|&z| activate(c.nonlinearity, z)).collect();
            let mut clamped = vec![false; f];
            for (n, mode, val) in patch.for_layer(l) {
                act[n] = mode.apply(act[n], val);
                clamped[n] = mode == PatchMode::SetValue;
            }
            let ff = affine(&act, f, bp.w_out, Some(bp.b_out), d);
            x = x_mid.iter().zip(&ff).map(|(a, b)| a + b).collect();
            layers.push(RowLayer { ln1, qkv, att, ln2, pre, act, clamped });
        }

        let hp = model.head_params(&layout);
        let (lnf_out, lnf) = layer_norm(&x, d, hp.lnf_g, hp.lnf_b);
        let mut probs = affine(&lnf_out, d, hp.w_u, None, v);
        softmax_in_place(&mut probs);
        TailState { prep, start, layers, lnf, probs }
    }

    pub fn output(&self) -> TokenDistribution {
        TokenDistribution { probs: self.probs.clone() }
    }

    /// Activations after patching: recomputed layers from `start`, cached
    /// ones below.
    pub fn activations(&self) -> NeuronValues {
        let mut acts = self.prep.activations().clone();
        for (i, rl) in self.layers.iter().enumerate() {
            acts.layer_mut(self.start + i).copy_from_slice(&rl.act);
        }
        acts
    }

    /// Activation gradients for layers `start..`; lower layers are left 0.
    pub fn backward(&self, target: usize, objective: Objective) -> NeuronValues {
        let model = self.prep.model;
        let c = model.config();
        let layout = model.layout();
        let (d, f, v) = (c.d_model, c.d_ff, c.vocab_size);
        let (nh, dh) = (c.n_heads, c.head_dim());
        let scale = 1.0 / (dh as f64).sqrt();
        let t_len = self.prep.position + 1;
        let mut grads = NeuronValues::new(c.n_layers, f);

        let p_t = self.probs[target];
        let dlogits: Vec<f64> = (0..v)
            .map(|j| {
                let delta = if j == target { 1.0 } else { 0.0 };
                match objective {
                    Objective::Prob => p_t * (delta - self.probs[j]),
                    Objective::LogProb => delta - self.probs[j],
                }
            })
            .collect();
        let hp = model.head_params(&layout);
        let dlnf: Vec<f64> = (0..d).map(|i| dot(&hp.w_u[i * v..(i + 1) * v], &dlogits)).collect();
        let mut dx = layer_norm_backward_row(&dlnf, &self.lnf.xhat, self.lnf.rstd[0], hp.lnf_g);

        for (idx, rl) in self.layers.iter().enumerate().rev() {
            let l = self.start + idx;
            let bp = model.block_params(&layout.blocks[l]);

            // feed-forward
            let dact: Vec<f64> = (0..f).map(|n| dot(&bp.w_out[n * d..(n + 1) * d], &dx)).collect();
            grads.layer_mut(l).copy_from_slice(&dact);
            let dpre: Vec<f64> = (0..f)
                .map(|n| if rl.clamped[n] { 0.0 } else { dact[n] * activate_grad(c.nonlinearity, rl.pre[n]) })
                .collect();
            let dln2: Vec<f64> = (0..d).map(|i| dot(&bp.w_in[i * f..(i + 1) * f], &dpre)).collect();
            let dmid = layer_norm_backward_row(&dln2, &rl.ln2.xhat, rl.ln2.rstd[0], bp.ln2_g);
            let dx_mid: Vec<f64> = dx.iter().zip(&dmid).map(|(a, b)| a + b).collect();

            // attention
            let dheads: Vec<f64> = (0..d).map(|i| dot(&bp.w_o[i * d..(i + 1) * d], &dx_mid)).collect();
            let mut dqkv = vec![0.0; 3 * d];
            let pk = &self.prep.prefix_k[l];
            let pv = &self.prep.prefix_v[l];
            for h in 0..nh {
                let dout = &dheads[h * dh..(h + 1) * dh];
                let w = &rl.att[h * t_len..(h + 1) * t_len];
                let q = &rl.qkv[h * dh..(h + 1) * dh];
                let k_self = &rl.qkv[d + h * dh..d + (h + 1) * dh];
                let v_self = &rl.qkv[2 * d + h * dh..2 * d + (h + 1) * dh];
                let key = |s: usize| if s + 1 == t_len { k_self } else { &pk[s * d + h * dh..s * d + (h + 1) * dh] };
                let val = |s: usize| if s + 1 == t_len { v_self } else { &pv[s * d + h * dh..s * d + (h + 1) * dh] };
                let dw: Vec<f64> = (0..t_len).map(|s| dot(dout, val(s))).collect();
                let wdw: f64 = w.iter().zip(&dw).map(|(a, b)| a * b).sum();
                for s in 0..t_len {
                    let ds = w[s] * (dw[s] - wdw) * scale;
                    for (dq, &ki) in dqkv[h * dh..(h + 1) * dh].iter_mut().zip(key(s)) {
                        *dq += ds * ki;
                    }
                    if s + 1 == t_len {
                        for (dk, &qi) in dqkv[d + h * dh..d + (h + 1) * dh].iter_mut().zip(q) {
                            *dk += ds * qi;
                        }
                    }
                }
                let w_self = w[t_len - 1];
                for (dv, &o) in dqkv[2 * d + h * dh..2 * d + (h + 1) * dh].iter_mut().zip(dout) {
                    *dv += w_self * o;
                }
            }
            let dln1: Vec<f64> = (0..d).map(|i| dot(&bp.w_qkv[i * 3 * d..(i + 1) * 3 * d], &dqkv)).collect();
            let din = layer_norm_backward_row(&dln1, &rl.ln1.xhat, rl.ln1.rstd[0], bp.ln1_g);
            dx = dx_mid.iter().zip(&din).map(|(a, b)| a + b).collect();
        }
        grads
    }
}
