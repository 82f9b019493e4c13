//! Sparse mixture of experts with top-K affinity gating.

use rand::Rng;

use crate::numerics::kernels::{gemm, linear, linear_backward, silu, silu_grad, softmax_backward, softmax_in_place};
use crate::numerics::Tensor;
use crate::params::{tensor_fields, trunc_normal};

/// Router and expert weights.
///
/// `router` is `[D, E]` (column `j` is the affinity projection of expert `j`),
/// `w1` is `[E, D, F]` and `w2` is `[E, F, D]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MoeParams {
    pub router: Tensor,
    pub w1: Tensor,
    pub w2: Tensor,
}

tensor_fields!(MoeParams { router, w1, w2 });

impl MoeParams {
    pub fn zeros(d_model: usize, experts: usize, hidden: usize) -> Self {
        MoeParams {
            router: Tensor::zeros(&[d_model, experts]),
            w1: Tensor::zeros(&[experts, d_model, hidden]),
            w2: Tensor::zeros(&[experts, hidden, d_model]),
        }
    }

    pub fn init<R: Rng + ?Sized>(rng: &mut R, d_model: usize, experts: usize, hidden: usize, std: f64) -> Self {
        MoeParams {
            router: trunc_normal(rng, &[d_model, experts], std),
            w1: trunc_normal(rng, &[experts, d_model, hidden], std),
            w2: trunc_normal(rng, &[experts, hidden, d_model], std),
        }
    }

    pub fn experts(&self) -> usize {
        self.router.shape()[1]
    }

    pub fn d_model(&self) -> usize {
        self.router.shape()[0]
    }

    pub fn hidden(&self) -> usize {
        self.w1.shape()[2]
    }
}

/// Routing statistics of one MoE layer over a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct AuxStats {
    /// Number of (token, slot) assignments per expert.
    pub counts: Vec<usize>,
    /// Sum of affinities per expert.
    pub affinity_sum: Vec<f64>,
    pub tokens: usize,
    pub top_k: usize,
}

impl AuxStats {
    pub fn new(experts: usize, top_k: usize) -> Self {
        AuxStats {
            counts: vec![0; experts],
            affinity_sum: vec![0.0; experts],
            tokens: 0,
            top_k,
        }
    }

    /// `f_j`: share of assignments routed to expert `j`, scaled by `1/(K T)`.
    pub fn fractions(&self) -> Vec<f64> {
        let denom = (self.top_k * self.tokens).max(1) as f64;
        self.counts.iter().map(|&c| c as f64 / denom).collect()
    }

    /// `P_j`: mean affinity of expert `j`.
    pub fn mean_affinity(&self) -> Vec<f64> {
        let t = self.tokens.max(1) as f64;
        self.affinity_sum.iter().map(|&s| s / t).collect()
    }

    pub fn merge(&mut self, other: &AuxStats) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        for (a, b) in self.affinity_sum.iter_mut().zip(&other.affinity_sum) {
            *a += b;
        }
        self.tokens += other.tokens;
    }
}

/// Load-balancing loss `E * sum_j f_j P_j` of one layer.
pub fn aux_loss(stats: &AuxStats) -> f64 {
    let e = stats.counts.len() as f64;
    let f = stats.fractions();
    let p = stats.mean_affinity();
    e * f.iter().zip(&p).map(|(a, b)| a * b).sum::<f64>()
}

/// Indices of the `k` largest entries, ties broken by the lower index.
pub fn top_k_indices(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Gate values: the affinity itself for selected experts, zero elsewhere.
pub fn gates(affinity: &[f64], k: usize) -> Vec<f64> {
    let mut g = vec![0.0; affinity.len()];
    for j in top_k_indices(affinity, k) {
        g[j] = affinity[j];
    }
    g
}

#[derive(Debug, Clone)]
struct ExpertCache {
    rows: Vec<usize>,
    input: Vec<f64>,
    pre: Vec<f64>,
    act: Vec<f64>,
    out: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct MoeCache {
    x: Vec<f64>,
    affinity: Vec<f64>,
    selected: Vec<Vec<usize>>,
    experts: Vec<ExpertCache>,
    pub stats: AuxStats,
}

/// Mixture output for `x: [rows, D]` with `top_k` active experts per token.
pub fn moe_forward(x: &[f64], params: &MoeParams, top_k: usize) -> (Vec<f64>, MoeCache) {
    let (d, e, f) = (params.d_model(), params.experts(), params.hidden());
    let rows = x.len() / d;
    let mut affinity = linear(x, rows, params.router.data(), None, d, e);
    let mut stats = AuxStats::new(e, top_k);
    stats.tokens = rows;
    let mut assigned: Vec<Vec<usize>> = vec![Vec::new(); e];
    let mut selected = Vec::with_capacity(rows);
    for (r, a) in affinity.chunks_exact_mut(e).enumerate() {
        softmax_in_place(a);
        for (s, v) in stats.affinity_sum.iter_mut().zip(a.iter()) {
            *s += v;
        }
        let top = top_k_indices(a, top_k);
        for &j in &top {
            stats.counts[j] += 1;
            assigned[j].push(r);
        }
        selected.push(top);
    }

    let mut y = vec![0.0; rows * d];
    let mut experts = Vec::with_capacity(e);
    for (j, rows_j) in assigned.into_iter().enumerate() {
        let m = rows_j.len();
        let mut input = Vec::with_capacity(m * d);
        for &r in &rows_j {
            input.extend_from_slice(&x[r * d..(r + 1) * d]);
        }
        let w1 = &params.w1.data()[j * d * f..(j + 1) * d * f];
        let w2 = &params.w2.data()[j * f * d..(j + 1) * f * d];
        let pre = linear(&input, m, w1, None, d, f);
        let act: Vec<f64> = pre.iter().map(|&v| silu(v)).collect();
        let out = linear(&act, m, w2, None, f, d);
        for (k, &r) in rows_j.iter().enumerate() {
            let g = affinity[r * e + j];
            for (yy, o) in y[r * d..(r + 1) * d].iter_mut().zip(&out[k * d..(k + 1) * d]) {
                *yy += g * o;
            }
        }
        experts.push(ExpertCache {
            rows: rows_j,
            input,
            pre,
            act,
            out,
        });
    }
    let cache = MoeCache {
        x: x.to_vec(),
        affinity,
        selected,
        experts,
        stats,
    };
    (y, cache)
}

/// Backward of [`moe_forward`].
///
/// `aux_weight` is the coefficient of this layer's [`aux_loss`] in the total
/// objective; its gradient flows through the mean affinities only.
pub fn moe_backward(
    cache: &MoeCache,
    params: &MoeParams,
    dy: &[f64],
    aux_weight: f64,
    grads: &mut MoeParams,
) -> Vec<f64> {
    let (d, e, f) = (params.d_model(), params.experts(), params.hidden());
    let rows = cache.x.len() / d;
    let mut dx = vec![0.0; rows * d];
    let mut daff = vec![0.0; rows * e];

    if aux_weight != 0.0 {
        let frac = cache.stats.fractions();
        let scale = aux_weight * e as f64 / rows.max(1) as f64;
        for row in daff.chunks_exact_mut(e) {
            for (g, fj) in row.iter_mut().zip(&frac) {
                *g += scale * fj;
            }
        }
    }

    for (j, ex) in cache.experts.iter().enumerate() {
        let m = ex.rows.len();
        if m == 0 {
            continue;
        }
        let mut dout = vec![0.0; m * d];
        for (k, &r) in ex.rows.iter().enumerate() {
            let dyr = &dy[r * d..(r + 1) * d];
            let g = cache.affinity[r * e + j];
            daff[r * e + j] += dyr.iter().zip(&ex.out[k * d..(k + 1) * d]).map(|(a, b)| a * b).sum::<f64>();
            for (o, v) in dout[k * d..(k + 1) * d].iter_mut().zip(dyr) {
                *o = g * v;
            }
        }
        let w1 = &params.w1.data()[j * d * f..(j + 1) * d * f];
        let w2 = &params.w2.data()[j * f * d..(j + 1) * f * d];
        let mut dact = linear_backward(&ex.act, m, w2, &dout, f, d, &mut grads.w2.data_mut()[j * f * d..(j + 1) * f * d], None);
        dact.iter_mut().zip(&ex.pre).for_each(|(g, &p)| *g *= silu_grad(p));
        let dinput = linear_backward(&ex.input, m, w1, &dact, d, f, &mut grads.w1.data_mut()[j * d * f..(j + 1) * d * f], None);
        for (k, &r) in ex.rows.iter().enumerate() {
            for (a, b) in dx[r * d..(r + 1) * d].iter_mut().zip(&dinput[k * d..(k + 1) * d]) {
                *a += b;
            }
        }
    }

    let mut dlogits = vec![0.0; rows * e];
    for ((a, da), dl) in cache
        .affinity
        .chunks_exact(e)
        .zip(daff.chunks_exact(e))
        .zip(dlogits.chunks_exact_mut(e))
    {
        softmax_backward(a, da, dl);
    }
    gemm(d, rows, e, 1.0, &cache.x, true, &dlogits, false, 1.0, grads.router.data_mut());
    gemm(rows, e, d, 1.0, &dlogits, false, params.router.data(), true, 1.0, &mut dx);
    dx
}

impl MoeCache {
    /// Affinities of every row, `[rows, E]`.
    pub fn affinity(&self) -> &[f64] {
        &self.affinity
    }

    pub fn selected(&self) -> &[Vec<usize>] {
        &self.selected
    }
}
