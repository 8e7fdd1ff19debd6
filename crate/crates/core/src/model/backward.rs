use super::forward::{activate_grad, dot, FullCache};
use super::params::Layout;
use super::Model;

/// Input gradient of one LayerNorm row.
pub(crate) fn layer_norm_backward_row(dy: &[f64], xhat: &[f64], rstd: f64, g: &[f64]) -> Vec<f64> {
    let d = dy.len() as f64;
    let dxhat: Vec<f64> = dy.iter().zip(g).map(|(a, b)| a * b).collect();
    let m1 = dxhat.iter().sum::<f64>() / d;
    let m2 = dxhat.iter().zip(xhat).map(|(a, b)| a * b).sum::<f64>() / d;
    dxhat.iter().zip(xhat).map(|(&dh, &h)| rstd * (dh - m1 - h * m2)).collect()
}

/// LayerNorm backward over all rows; accumulates gain and bias gradients.
fn layer_norm_backward(dy: &[f64], xhat: &[f64], rstd: &[f64], g: &[f64], dg: &mut [f64], db: &mut [f64]) -> Vec<f64> {
    let d = g.len();
    let mut dx = Vec::with_capacity(dy.len());
    for (r, &rs) in rstd.iter().enumerate() {
        let dyr = &dy[r * d..(r + 1) * d];
        let xr = &xhat[r * d..(r + 1) * d];
        for i in 0..d {
            dg[i] += dyr[i] * xr[i];
            db[i] += dyr[i];
        }
        dx.extend(layer_norm_backward_row(dyr, xr, rs, g));
    }
    dx
}

/// Backward of `y = b + x · W` (`W` is `[n_in][n_out]`); accumulates into
/// `dw` and `db`, returns `dx`.
fn affine_backward(
    x: &[f64],
    n_in: usize,
    w: &[f64],
    dy: &[f64],
    n_out: usize,
    dw: &mut [f64],
    db: Option<&mut [f64]>,
) -> Vec<f64> {
    let rows = x.len() / n_in;
    if let Some(db) = db {
        for r in 0..rows {
            for (b, &g) in db.iter_mut().zip(&dy[r * n_out..(r + 1) * n_out]) {
                *b += g;
            }
        }
    }
    let mut dx = vec![0.0; rows * n_in];
    for r in 0..rows {
        let dyr = &dy[r * n_out..(r + 1) * n_out];
        for i in 0..n_in {
            let xi = x[r * n_in + i];
            let wrow = &w[i * n_out..(i + 1) * n_out];
            dx[r * n_in + i] = dot(wrow, dyr);
            if xi != 0.0 {
                for (g, &d) in dw[i * n_out..(i + 1) * n_out].iter_mut().zip(dyr) {
                    *g += xi * d;
                }
            }
        }
    }
    dx
}

impl Model {
    /// Summed cross-entropy over `targets` (`(position, token)` pairs) and
    /// its gradient with respect to every parameter, accumulated into `grad`.
    /// Summed cross-entropy at `targets`, accumulating its parameter gradient
    /// into `grad`. With `smoothing = (candidates, eps)` the target token
    /// gets mass `1 - eps` and the other candidates share `eps`.
    pub(crate) fn cross_entropy_backward(
        &self,
        tokens: &[usize],
        targets: &[(usize, usize)],
        smoothing: Option<(&[usize], f64)>,
        grad: &mut [f64],
    ) -> f64 {
        let cache = self.forward_full(tokens, None);
        let c = self.config();
        let v = c.vocab_size;
        let mut dlogits = vec![0.0; cache.len * v];
        let mut loss = 0.0;
        for &(pos, tok) in targets {
            let p = &cache.probs[pos * v..(pos + 1) * v];
            let row = &mut dlogits[pos * v..(pos + 1) * v];
            for j in 0..v {
                row[j] += p[j];
            }
            let mut soft = |j: usize, q: f64| {
                loss -= q * p[j].max(f64::MIN_POSITIVE).ln();
                row[j] -= q;
            };
            match smoothing {
                Some((cands, eps)) if eps > 0.0 && cands.len() > 1 && cands.contains(&tok) => {
                    let share = eps / (cands.len() - 1) as f64;
                    for &j in cands {
                        soft(j, if j == tok { 1.0 - eps } else { share });
                    }
                }
                _ => soft(tok, 1.0),
            }
        }
        self.backward_full(tokens, &cache, &dlogits, grad);
        loss
    }

    fn backward_full(&self, tokens: &[usize], cache: &FullCache, dlogits: &[f64], grad: &mut [f64]) {
        let c = self.config();
        let layout: Layout = self.layout();
        let (d, f, v) = (c.d_model, c.d_ff, c.vocab_size);
        let (nh, dh) = (c.n_heads, c.head_dim());
        let scale = 1.0 / (dh as f64).sqrt();
        let t_len = cache.len;
        let p = &self.data;

        let dlnf = affine_backward(
            &cache.lnf_out,
            d,
            &p[layout.w_u..layout.w_u + d * v],
            dlogits,
            v,
            &mut grad[layout.w_u..layout.w_u + d * v],
            None,
        );
        let mut dx = {
            let mut dg = vec![0.0; d];
            let mut db = vec![0.0; d];
            let out = layer_norm_backward(&dlnf, &cache.lnf.xhat, &cache.lnf.rstd, &p[layout.lnf_g..layout.lnf_g + d], &mut dg, &mut db);
            add(&mut grad[layout.lnf_g..layout.lnf_g + d], &dg);
            add(&mut grad[layout.lnf_b..layout.lnf_b + d], &db);
            out
        };

        for (l, lc) in cache.layers.iter().enumerate().rev() {
            let bl = &layout.blocks[l];
            let bp = self.block_params(bl);

            // feed-forward
            let mut dw = vec![0.0; f * d];
            let mut db = vec![0.0; d];
            let dact = affine_backward(&lc.act, f, bp.w_out, &dx, d, &mut dw, Some(&mut db));
            add(&mut grad[bl.w_out..bl.w_out + f * d], &dw);
            add(&mut grad[bl.b_out..bl.b_out + d], &db);
            let dpre: Vec<f64> = dact
                .iter()
                .zip(&lc.pre)
                .map(|(&g, &z)| g * activate_grad(c.nonlinearity, z))
                .collect();
            let mut dw = vec![0.0; d * f];
            let mut db = vec![0.0; f];
            let dln2 = affine_backward(&lc.ln2_out, d, bp.w_in, &dpre, f, &mut dw, Some(&mut db));
            add(&mut grad[bl.w_in..bl.w_in + d * f], &dw);
            add(&mut grad[bl.b_in..bl.b_in + f], &db);
            let mut dg = vec![0.0; d];
            let mut db = vec![0.0; d];
            let dmid = layer_norm_backward(&dln2, &lc.ln2.xhat, &lc.ln2.rstd, bp.ln2_g, &mut dg, &mut db);
            add(&mut grad[bl.ln2_g..bl.ln2_g + d], &dg);
            add(&mut grad[bl.ln2_b..bl.ln2_b + d], &db);
            let dx_mid: Vec<f64> = dx.iter().zip(&dmid).map(|(a, b)| a + b).collect();

            // attention output projection
            let mut dw = vec![0.0; d * d];
            let mut db = vec![0.0; d];
            let dheads = affine_backward(&lc.heads, d, bp.w_o, &dx_mid, d, &mut dw, Some(&mut db));
            add(&mut grad[bl.w_o..bl.w_o + d * d], &dw);
            add(&mut grad[bl.b_o..bl.b_o + d], &db);

            let mut dqkv = vec![0.0; t_len * 3 * d];
            for h in 0..nh {
                for t in 0..t_len {
                    let dout = &dheads[t * d + h * dh..t * d + (h + 1) * dh];
                    let w = &lc.att[(h * t_len + t) * t_len..(h * t_len + t) * t_len + t + 1];
                    let dw: Vec<f64> = (0..=t)
                        .map(|s| dot(dout, &lc.qkv[s * 3 * d + 2 * d + h * dh..s * 3 * d + 2 * d + (h + 1) * dh]))
                        .collect();
                    let wdw: f64 = w.iter().zip(&dw).map(|(a, b)| a * b).sum();
                    for s in 0..=t {
                        let ds = w[s] * (dw[s] - wdw) * scale;
                        for i in 0..dh {
                            let q_i = lc.qkv[t * 3 * d + h * dh + i];
                            let k_i = lc.qkv[s * 3 * d + d + h * dh + i];
                            dqkv[t * 3 * d + h * dh + i] += ds * k_i;
                            dqkv[s * 3 * d + d + h * dh + i] += ds * q_i;
                            dqkv[s * 3 * d + 2 * d + h * dh + i] += w[s] * dout[i];
                        }
                    }
                }
            }
            let mut dw = vec![0.0; d * 3 * d];
            let mut db = vec![0.0; 3 * d];
            let dln1 = affine_backward(&lc.ln1_out, d, bp.w_qkv, &dqkv, 3 * d, &mut dw, Some(&mut db));
            add(&mut grad[bl.w_qkv..bl.w_qkv + d * 3 * d], &dw);
            add(&mut grad[bl.b_qkv..bl.b_qkv + 3 * d], &db);
            let mut dg = vec![0.0; d];
            let mut db = vec![0.0; d];
            let din = layer_norm_backward(&dln1, &lc.ln1.xhat, &lc.ln1.rstd, bp.ln1_g, &mut dg, &mut db);
            add(&mut grad[bl.ln1_g..bl.ln1_g + d], &dg);
            add(&mut grad[bl.ln1_b..bl.ln1_b + d], &db);
            dx = dx_mid.iter().zip(&din).map(|(a, b)| a + b).collect();
        }

        for (t, &tok) in tokens.iter().enumerate() {
            let row = &dx[t * d..(t + 1) * d];
            add(&mut grad[layout.tok_emb + tok * d..layout.tok_emb + (tok + 1) * d], row);
            add(&mut grad[layout.pos_emb + t * d..layout.pos_emb + (t + 1) * d], row);
        }
    }
}

fn add(dst: &mut [f64], src: &[f64]) {
    for (a, b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn tiny() -> Model {
        let cfg = ModelConfig { n_layers: 2, d_model: 8, d_ff: 16, n_heads: 2, vocab_size: 13, max_seq: 8, seed: 3, ..Default::default() };
        let mut m = Model::init(cfg).unwrap();
        // Larger weights so that every path carries measurable gradient.
        for x in m.data.iter_mut() {
            *x *= 10.0;
        }
        m
    }

    fn loss(m: &Model, tokens: &[usize], targets: &[(usize, usize)]) -> f64 {
        let mut g = vec![0.0; m.n_params()];
        m.cross_entropy_backward(tokens, targets, None, &mut g)
    }

    #[test]
    fn parameter_gradient_matches_central_differences() {
        let m = tiny();
        let tokens = [1, 4, 7, 2, 9];
        let targets = [(1, 3), (3, 5), (4, 0)];
        let mut g = vec![0.0; m.n_params()];
        m.cross_entropy_backward(&tokens, &targets, None, &mut g);
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        // every 7th parameter covers all tensors
        for i in (0..m.n_params()).step_by(7) {
            let mut plus = m.clone();
            plus.data[i] += h;
            let mut minus = m.clone();
            minus.data[i] -= h;
            let fd = (loss(&plus, &tokens, &targets) - loss(&minus, &tokens, &targets)) / (2.0 * h);
            // absolute floor covers parameters with exactly zero gradient
            let err = (fd - g[i]).abs() / (fd.abs().max(g[i].abs()) + 1e-4);
            worst = worst.max(err);
        }
        assert!(worst < 1e-4, "worst relative error {worst}");
    }
}
