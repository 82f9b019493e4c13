//! QK-normalized causal self-attention with rotary positions.

use rand::Rng;

use crate::numerics::kernels::{gemm, linear, linear_backward, sigmoid, softplus, softplus_inv};
use crate::numerics::layers::{
    l2_normalize_rows, l2_normalize_rows_backward, masked_softmax_row, masked_softmax_row_backward,
    rope_frequencies, rotate_pairs,
};
use crate::numerics::Tensor;
use crate::params::{tensor_fields, trunc_normal};

/// Projection weights for all heads plus one temperature per head.
///
/// Head `h` owns columns `h*d_head..(h+1)*d_head` of `wq`, `wk` and `wv`.
/// The temperature is `tau = softplus(temp)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub temp: Tensor,
}

tensor_fields!(AttentionParams { wq, wk, wv, wo, temp });

impl AttentionParams {
    pub fn zeros(d_model: usize, n_heads: usize) -> Self {
        AttentionParams {
            wq: Tensor::zeros(&[d_model, d_model]),
            wk: Tensor::zeros(&[d_model, d_model]),
            wv: Tensor::zeros(&[d_model, d_model]),
            wo: Tensor::zeros(&[d_model, d_model]),
            temp: Tensor::zeros(&[n_heads]),
        }
    }

    /// Temperatures start at `sqrt(d_head)`.
    pub fn init<R: Rng + ?Sized>(rng: &mut R, d_model: usize, n_heads: usize, std: f64) -> Self {
        let d_head = d_model / n_heads;
        AttentionParams {
            wq: trunc_normal(rng, &[d_model, d_model], std),
            wk: trunc_normal(rng, &[d_model, d_model], std),
            wv: trunc_normal(rng, &[d_model, d_model], std),
            wo: trunc_normal(rng, &[d_model, d_model], std),
            temp: Tensor::full(&[n_heads], softplus_inv((d_head as f64).sqrt())),
        }
    }

    pub fn n_heads(&self) -> usize {
        self.temp.len()
    }

    pub fn tau(&self, head: usize) -> f64 {
        softplus(self.temp.data()[head])
    }
}

/// Static shape information for one attention call.
#[derive(Debug, Clone, Copy)]
pub struct AttentionShape {
    pub batch: usize,
    pub tokens: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub theta_base: f64,
    pub rope_scale: f64,
}

impl AttentionShape {
    fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    fn rows(&self) -> usize {
        self.batch * self.tokens
    }
}

#[derive(Debug, Clone)]
pub struct AttentionCache {
    x: Vec<f64>,
    q_unit: Vec<f64>,
    q_norm: Vec<f64>,
    k_unit: Vec<f64>,
    k_norm: Vec<f64>,
    q_rot: Vec<f64>,
    k_rot: Vec<f64>,
    v: Vec<f64>,
    /// Raw scores per (batch, head), `tokens x tokens`.
    scores: Vec<f64>,
    probs: Vec<f64>,
    mixed: Vec<f64>,
}

impl AttentionCache {
    /// Unscaled scores `q_i^T R k_j` of batch row `b`, head `h`.
    pub fn scores(&self, shape: &AttentionShape, b: usize, h: usize) -> &[f64] {
        let nn = shape.tokens * shape.tokens;
        let off = (b * shape.n_heads + h) * nn;
        &self.scores[off..off + nn]
    }
}

fn rotate_heads(x: &mut [f64], shape: &AttentionShape, freqs: &[f64], sign: f64) {
    let dh = shape.d_head();
    for (r, row) in x.chunks_exact_mut(shape.d_model).enumerate() {
        let pos = (r % shape.tokens) as f64 * shape.rope_scale;
        for head in row.chunks_exact_mut(dh) {
            rotate_pairs(head, pos, freqs, sign);
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Attention output (before the residual) for `x: [B*N, D]`.
pub fn attention_forward(x: &[f64], params: &AttentionParams, shape: &AttentionShape) -> (Vec<f64>, AttentionCache) {
    let (d, n, dh, nh) = (shape.d_model, shape.tokens, shape.d_head(), shape.n_heads);
    let rows = shape.rows();
    let q = linear(x, rows, params.wq.data(), None, d, d);
    let k = linear(x, rows, params.wk.data(), None, d, d);
    let v = linear(x, rows, params.wv.data(), None, d, d);
    let (q_unit, q_norm) = l2_normalize_rows(&q, dh);
    let (k_unit, k_norm) = l2_normalize_rows(&k, dh);
    let freqs = rope_frequencies(dh, shape.theta_base);
    let mut q_rot = q_unit.clone();
    let mut k_rot = k_unit.clone();
    rotate_heads(&mut q_rot, shape, &freqs, 1.0);
    rotate_heads(&mut k_rot, shape, &freqs, 1.0);

    let nn = n * n;
    let mut scores = vec![0.0; shape.batch * nh * nn];
    let mut probs = vec![0.0; shape.batch * nh * nn];
    let mut mixed = vec![0.0; rows * d];
    for b in 0..shape.batch {
        for h in 0..nh {
            let off = (b * nh + h) * nn;
            let tau = params.tau(h);
            for i in 0..n {
                let qi = &q_rot[(b * n + i) * d + h * dh..][..dh];
                let srow = &mut scores[off + i * n..off + (i + 1) * n];
                for j in 0..=i {
                    srow[j] = dot(qi, &k_rot[(b * n + j) * d + h * dh..][..dh]);
                }
                let prow = &mut probs[off + i * n..off + (i + 1) * n];
                prow.copy_from_slice(srow);
                masked_softmax_row(prow, i + 1, tau);
                let out = &mut mixed[(b * n + i) * d + h * dh..][..dh];
                for j in 0..=i {
                    let p = prow[j];
                    for (o, vv) in out.iter_mut().zip(&v[(b * n + j) * d + h * dh..][..dh]) {
                        *o += p * vv;
                    }
                }
            }
        }
    }
    let out = linear(&mixed, rows, params.wo.data(), None, d, d);
    let cache = AttentionCache {
        x: x.to_vec(),
        q_unit,
        q_norm,
        k_unit,
        k_norm,
        q_rot,
        k_rot,
        v,
        scores,
        probs,
        mixed,
    };
    (out, cache)
}

/// Backward of [`attention_forward`]; accumulates into `grads`, returns `dx`.
pub fn attention_backward(
    cache: &AttentionCache,
    params: &AttentionParams,
    shape: &AttentionShape,
    dout: &[f64],
    grads: &mut AttentionParams,
) -> Vec<f64> {
    let (d, n, dh, nh) = (shape.d_model, shape.tokens, shape.d_head(), shape.n_heads);
    let rows = shape.rows();
    let dmixed = linear_backward(&cache.mixed, rows, params.wo.data(), dout, d, d, grads.wo.data_mut(), None);

    let mut dq_rot = vec![0.0; rows * d];
    let mut dk_rot = vec![0.0; rows * d];
    let mut dv = vec![0.0; rows * d];
    let nn = n * n;
    let mut dprobs = vec![0.0; n];
    let mut dscores = vec![0.0; n];
    for b in 0..shape.batch {
        for h in 0..nh {
            let off = (b * nh + h) * nn;
            let tau = params.tau(h);
            let mut dtau = 0.0;
            for i in 0..n {
                let dmi = &dmixed[(b * n + i) * d + h * dh..][..dh];
                let prow = &cache.probs[off + i * n..off + (i + 1) * n];
                for j in 0..=i {
                    let vj = (b * n + j) * d + h * dh;
                    dprobs[j] = dot(dmi, &cache.v[vj..vj + dh]);
                    let p = prow[j];
                    for (g, m) in dv[vj..vj + dh].iter_mut().zip(dmi) {
                        *g += p * m;
                    }
                }
                let srow = &cache.scores[off + i * n..off + (i + 1) * n];
                dtau += masked_softmax_row_backward(prow, srow, &dprobs, i + 1, tau, &mut dscores);
                let qi = (b * n + i) * d + h * dh;
                for (j, &g) in dscores.iter().enumerate().take(i + 1) {
                    if g == 0.0 {
                        continue;
                    }
                    let kj = (b * n + j) * d + h * dh;
                    for t in 0..dh {
                        dq_rot[qi + t] += g * cache.k_rot[kj + t];
                        dk_rot[kj + t] += g * cache.q_rot[qi + t];
                    }
                }
            }
            grads.temp.data_mut()[h] += dtau * sigmoid(params.temp.data()[h]);
        }
    }

    let freqs = rope_frequencies(dh, shape.theta_base);
    rotate_heads(&mut dq_rot, shape, &freqs, -1.0);
    rotate_heads(&mut dk_rot, shape, &freqs, -1.0);
    let dq = l2_normalize_rows_backward(&cache.q_unit, dh, &cache.q_norm, &dq_rot);
    let dk = l2_normalize_rows_backward(&cache.k_unit, dh, &cache.k_norm, &dk_rot);

    let x = &cache.x;
    let mut dx = linear_backward(x, rows, params.wq.data(), &dq, d, d, grads.wq.data_mut(), None);
    gemm(d, rows, d, 1.0, x, true, &dk, false, 1.0, grads.wk.data_mut());
    gemm(rows, d, d, 1.0, &dk, false, params.wk.data(), true, 1.0, &mut dx);
    gemm(d, rows, d, 1.0, x, true, &dv, false, 1.0, grads.wv.data_mut());
    gemm(rows, d, d, 1.0, &dv, false, params.wv.data(), true, 1.0, &mut dx);
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn shape(batch: usize, tokens: usize, d: usize, heads: usize) -> AttentionShape {
        AttentionShape {
            batch,
            tokens,
            d_model: d,
            n_heads: heads,
            theta_base: 10000.0,
            rope_scale: 1.0,
        }
    }

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn single_token_attends_to_itself() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = AttentionParams::init(&mut rng, 8, 2, 0.3);
        let x = rand_vec(&mut rng, 8);
        let sh = shape(1, 1, 8, 2);
        let (out, _) = attention_forward(&x, &p, &sh);
        let v = linear(&x, 1, p.wv.data(), None, 8, 8);
        let want = linear(&v, 1, p.wo.data(), None, 8, 8);
        for (a, b) in out.iter().zip(&want) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn scores_are_bounded_and_relative() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = AttentionParams::init(&mut rng, 8, 2, 0.5);
        let token = rand_vec(&mut rng, 8);
        let n = 7;
        let x: Vec<f64> = (0..n).flat_map(|_| token.clone()).collect();
        let sh = shape(1, n, 8, 2);
        let (_, cache) = attention_forward(&x, &p, &sh);
        for h in 0..2 {
            let s = cache.scores(&sh, 0, h);
            for i in 0..n {
                for j in 0..=i {
                    assert!(s[i * n + j].abs() <= 1.0 + 1e-12);
                    if i + 1 < n {
                        assert!((s[i * n + j] - s[(i + 1) * n + j + 1]).abs() < 1e-9);
                    }
                }
            }
        }
    }
}
