//! TimeMoE and TimeSTP blocks.

use rand::Rng;

use super::attention::{attention_backward, attention_forward, AttentionCache, AttentionParams, AttentionShape};
use super::config::ModelConfig;
use super::moe::{moe_backward, moe_forward, MoeCache, MoeParams};
use crate::numerics::kernels::{linear, linear_backward};
use crate::numerics::layers::{rmsnorm_rows, rmsnorm_rows_backward};
use crate::numerics::Tensor;
use crate::params::{trunc_normal, Visit, VisitMut};

/// Pre-RMSNorm block: `u = MHA(norm(h)) + h`, `h' = MoE(norm(u)) + u`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub attn_norm: Tensor,
    pub attn: AttentionParams,
    pub moe_norm: Tensor,
    pub moe: MoeParams,
}

impl BlockParams {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        BlockParams {
            attn_norm: Tensor::zeros(&[cfg.d_model]),
            attn: AttentionParams::zeros(cfg.d_model, cfg.n_heads),
            moe_norm: Tensor::zeros(&[cfg.d_model]),
            moe: MoeParams::zeros(cfg.d_model, cfg.experts, cfg.ffn_hidden),
        }
    }

    pub fn init<R: Rng + ?Sized>(rng: &mut R, cfg: &ModelConfig, std: f64) -> Self {
        BlockParams {
            attn_norm: Tensor::full(&[cfg.d_model], 1.0),
            attn: AttentionParams::init(rng, cfg.d_model, cfg.n_heads, std),
            moe_norm: Tensor::full(&[cfg.d_model], 1.0),
            moe: MoeParams::init(rng, cfg.d_model, cfg.experts, cfg.ffn_hidden, std),
        }
    }

    pub(crate) fn visit<'a>(&'a self, prefix: &str, out: &mut Visit<'a>) {
        out.push((format!("{prefix}attn_norm"), &self.attn_norm));
        self.attn.visit(&format!("{prefix}attn."), out);
        out.push((format!("{prefix}moe_norm"), &self.moe_norm));
        self.moe.visit(&format!("{prefix}moe."), out);
    }

    pub(crate) fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut VisitMut<'a>) {
        out.push((format!("{prefix}attn_norm"), &mut self.attn_norm));
        self.attn.visit_mut(&format!("{prefix}attn."), out);
        out.push((format!("{prefix}moe_norm"), &mut self.moe_norm));
        self.moe.visit_mut(&format!("{prefix}moe."), out);
    }
}

/// Everything a block needs besides its weights.
#[derive(Debug, Clone, Copy)]
pub struct BlockShape {
    pub attn: AttentionShape,
    pub top_k: usize,
    pub norm_eps: f64,
}

impl BlockShape {
    pub fn new(cfg: &ModelConfig, batch: usize, tokens: usize) -> Self {
        BlockShape {
            attn: AttentionShape {
                batch,
                tokens,
                d_model: cfg.d_model,
                n_heads: cfg.n_heads,
                theta_base: cfg.theta_base,
                rope_scale: cfg.rope_scale,
            },
            top_k: cfg.top_k,
            norm_eps: cfg.norm_eps,
        }
    }

    fn d(&self) -> usize {
        self.attn.d_model
    }
}

#[derive(Debug, Clone)]
pub struct BlockCache {
    input: Vec<f64>,
    attn_inv: Vec<f64>,
    pub attn: AttentionCache,
    mid: Vec<f64>,
    moe_inv: Vec<f64>,
    pub moe: MoeCache,
}

pub fn timemoe_forward(h: &[f64], params: &BlockParams, shape: &BlockShape) -> (Vec<f64>, BlockCache) {
    let d = shape.d();
    let (attn_in, attn_inv) = rmsnorm_rows(h, d, params.attn_norm.data(), shape.norm_eps);
    let (a, attn) = attention_forward(&attn_in, &params.attn, &shape.attn);
    let mid: Vec<f64> = a.iter().zip(h).map(|(x, y)| x + y).collect();
    let (moe_in, moe_inv) = rmsnorm_rows(&mid, d, params.moe_norm.data(), shape.norm_eps);
    let (m, moe) = moe_forward(&moe_in, &params.moe, shape.top_k);
    let out: Vec<f64> = m.iter().zip(&mid).map(|(x, y)| x + y).collect();
    let cache = BlockCache {
        input: h.to_vec(),
        attn_inv,
        attn,
        mid,
        moe_inv,
        moe,
    };
    (out, cache)
}

pub fn timemoe_backward(
    cache: &BlockCache,
    params: &BlockParams,
    shape: &BlockShape,
    dout: &[f64],
    aux_weight: f64,
    grads: &mut BlockParams,
) -> Vec<f64> {
    let d = shape.d();
    let dm = moe_backward(&cache.moe, &params.moe, dout, aux_weight, &mut grads.moe);
    let dmid_norm = rmsnorm_rows_backward(&cache.mid, d, params.moe_norm.data(), &cache.moe_inv, &dm, grads.moe_norm.data_mut());
    let dmid: Vec<f64> = dout.iter().zip(&dmid_norm).map(|(a, b)| a + b).collect();
    let da = attention_backward(&cache.attn, &params.attn, &shape.attn, &dmid, &mut grads.attn);
    let dh_norm = rmsnorm_rows_backward(&cache.input, d, params.attn_norm.data(), &cache.attn_inv, &da, grads.attn_norm.data_mut());
    dmid.iter().zip(&dh_norm).map(|(a, b)| a + b).collect()
}

/// Fusion projection followed by an internal TimeMoE block.
#[derive(Debug, Clone, PartialEq)]
pub struct StpParams {
    pub prev_norm: Tensor,
    pub init_norm: Tensor,
    /// `[2D, D]`; row-vector form of the `D x 2D` fusion matrix.
    pub fusion: Tensor,
    pub block: BlockParams,
}

impl StpParams {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        StpParams {
            prev_norm: Tensor::zeros(&[d]),
            init_norm: Tensor::zeros(&[d]),
            fusion: Tensor::zeros(&[2 * d, d]),
            block: BlockParams::zeros(cfg),
        }
    }

    /// Fusion starts at `[I | 0]` plus noise so the block begins close to a
    /// pass-through of the previous depth.
    pub fn init<R: Rng + ?Sized>(rng: &mut R, cfg: &ModelConfig, std: f64) -> Self {
        let d = cfg.d_model;
        let mut fusion = trunc_normal(rng, &[2 * d, d], std);
        for i in 0..d {
            fusion.data_mut()[i * d + i] += 1.0;
        }
        StpParams {
            prev_norm: Tensor::full(&[d], 1.0),
            init_norm: Tensor::full(&[d], 1.0),
            fusion,
            block: BlockParams::init(rng, cfg, std),
        }
    }

    pub(crate) fn visit<'a>(&'a self, prefix: &str, out: &mut Visit<'a>) {
        out.push((format!("{prefix}prev_norm"), &self.prev_norm));
        out.push((format!("{prefix}init_norm"), &self.init_norm));
        out.push((format!("{prefix}fusion"), &self.fusion));
        self.block.visit(&format!("{prefix}block."), out);
    }

    pub(crate) fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut VisitMut<'a>) {
        out.push((format!("{prefix}prev_norm"), &mut self.prev_norm));
        out.push((format!("{prefix}init_norm"), &mut self.init_norm));
        out.push((format!("{prefix}fusion"), &mut self.fusion));
        self.block.visit_mut(&format!("{prefix}block."), out);
    }
}

#[derive(Debug, Clone)]
pub struct StpCache {
    prev: Vec<f64>,
    prev_inv: Vec<f64>,
    init: Vec<f64>,
    init_inv: Vec<f64>,
    fused_in: Vec<f64>,
    pub block: BlockCache,
}

/// `h_bar = concat(norm(h_prev), norm(h0)) M`, output `TimeMoE(h_bar)`.
pub fn timestp_forward(h_prev: &[f64], h0: &[f64], params: &StpParams, shape: &BlockShape) -> (Vec<f64>, StpCache) {
    let d = shape.d();
    let rows = h_prev.len() / d;
    let (np, prev_inv) = rmsnorm_rows(h_prev, d, params.prev_norm.data(), shape.norm_eps);
    let (ni, init_inv) = rmsnorm_rows(h0, d, params.init_norm.data(), shape.norm_eps);
    let mut fused_in = Vec::with_capacity(rows * 2 * d);
    for (a, b) in np.chunks_exact(d).zip(ni.chunks_exact(d)) {
        fused_in.extend_from_slice(a);
        fused_in.extend_from_slice(b);
    }
    let fused = linear(&fused_in, rows, params.fusion.data(), None, 2 * d, d);
    let (out, block) = timemoe_forward(&fused, &params.block, shape);
    let cache = StpCache {
        prev: h_prev.to_vec(),
        prev_inv,
        init: h0.to_vec(),
        init_inv,
        fused_in,
        block,
    };
    (out, cache)
}

/// Returns gradients w.r.t. `h_prev` and `h0`.
pub fn timestp_backward(
    cache: &StpCache,
    params: &StpParams,
    shape: &BlockShape,
    dout: &[f64],
    aux_weight: f64,
    grads: &mut StpParams,
) -> (Vec<f64>, Vec<f64>) {
    let d = shape.d();
    let rows = dout.len() / d;
    let dfused = timemoe_backward(&cache.block, &params.block, shape, dout, aux_weight, &mut grads.block);
    let din = linear_backward(&cache.fused_in, rows, params.fusion.data(), &dfused, 2 * d, d, grads.fusion.data_mut(), None);
    let mut dnp = Vec::with_capacity(rows * d);
    let mut dni = Vec::with_capacity(rows * d);
    for row in din.chunks_exact(2 * d) {
        dnp.extend_from_slice(&row[..d]);
        dni.extend_from_slice(&row[d..]);
    }
    let dprev = rmsnorm_rows_backward(&cache.prev, d, params.prev_norm.data(), &cache.prev_inv, &dnp, grads.prev_norm.data_mut());
    let dinit = rmsnorm_rows_backward(&cache.init, d, params.init_norm.data(), &cache.init_inv, &dni, grads.init_norm.data_mut());
    (dprev, dinit)
}

impl StpCache {
    pub fn aux(&self) -> &super::moe::AuxStats {
        &self.block.moe.stats
    }
}

impl BlockCache {
    pub fn aux(&self) -> &super::moe::AuxStats {
        &self.moe.stats
    }
}
