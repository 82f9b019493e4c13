//! Full model: embedder, main TimeMoE stack, TimeSTP stack and shared head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::block::{
    timemoe_backward, timemoe_forward, timestp_backward, timestp_forward, BlockCache, BlockParams, BlockShape,
    StpCache, StpParams,
};
use super::config::{ModelConfig, StpVariant};
use super::moe::AuxStats;
use crate::error::{Error, Result};
use crate::numerics::{ParamSet, Tensor};
use crate::objectives::HeadParams;
use crate::params::{Visit, VisitMut};
use crate::tokenizer::{embed_input, embed_rows, embed_rows_backward, EmbedCache, EmbedderParams, PatchBatch};

/// Standard deviation of the truncated-normal weight initialization.
pub const INIT_STD: f64 = 0.02;

/// All learnable weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub embedder: EmbedderParams,
    pub blocks: Vec<BlockParams>,
    pub stp: Vec<StpParams>,
    pub head: HeadParams,
}

impl ModelParams {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        ModelParams {
            embedder: EmbedderParams::zeros(cfg.patch_len, cfg.d_model),
            blocks: (0..cfg.main_blocks).map(|_| BlockParams::zeros(cfg)).collect(),
            stp: (0..cfg.stp_blocks).map(|_| StpParams::zeros(cfg)).collect(),
            head: HeadParams::zeros(cfg.d_model, cfg.n_quantiles(), cfg.patch_len),
        }
    }

    pub fn init(cfg: &ModelConfig, seed: u64, std: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ModelParams {
            embedder: EmbedderParams::init(&mut rng, cfg.patch_len, cfg.d_model, std),
            blocks: (0..cfg.main_blocks).map(|_| BlockParams::init(&mut rng, cfg, std)).collect(),
            stp: (0..cfg.stp_blocks).map(|_| StpParams::init(&mut rng, cfg, std)).collect(),
            head: HeadParams::init(&mut rng, cfg.d_model, cfg.n_quantiles(), cfg.patch_len, std),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, t) in z.params_mut() {
            t.fill(0.0);
        }
        z
    }

    pub fn num_values(&self) -> usize {
        self.params().iter().map(|(_, t)| t.len()).sum()
    }
}

impl ParamSet for ModelParams {
    fn params(&self) -> Vec<(String, &Tensor)> {
        let mut out: Visit<'_> = Vec::new();
        self.embedder.visit("embedder.", &mut out);
        for (l, b) in self.blocks.iter().enumerate() {
            b.visit(&format!("blocks.{l}."), &mut out);
        }
        for (j, s) in self.stp.iter().enumerate() {
            s.visit(&format!("stp.{j}."), &mut out);
        }
        self.head.visit("head.", &mut out);
        out
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: VisitMut<'_> = Vec::new();
        self.embedder.visit_mut("embedder.", &mut out);
        for (l, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&format!("blocks.{l}."), &mut out);
        }
        for (j, s) in self.stp.iter_mut().enumerate() {
            s.visit_mut(&format!("stp.{j}."), &mut out);
        }
        self.head.visit_mut("head.", &mut out);
        out
    }
}

/// A configuration together with its weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        Self::with_std(config, seed, INIT_STD)
    }

    pub fn with_std(config: ModelConfig, seed: u64, std: f64) -> Result<Self> {
        config.validate()?;
        let params = ModelParams::init(&config, seed, std);
        Ok(Model { config, params })
    }
}

/// Normalized patch tokens for one forward pass.
///
/// Rows are `[batch, n_ext, P]`; the first `n_ctx` tokens of each row are the
/// context. Extra tokens only feed the shift-token ablation.
#[derive(Debug, Clone)]
pub struct TokenInput<'a> {
    pub values: &'a [f64],
    pub masks: &'a [f64],
    pub batch: usize,
    pub n_ctx: usize,
    pub n_ext: usize,
}

impl<'a> TokenInput<'a> {
    pub fn from_batch(batch: &'a PatchBatch) -> Self {
        TokenInput {
            values: batch.patches.data(),
            masks: batch.masks.data(),
            batch: batch.batch_size(),
            n_ctx: batch.n_patches,
            n_ext: batch.n_patches,
        }
    }
}

/// Saved activations of [`forward_cached`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    embed: EmbedCache,
    blocks: Vec<BlockCache>,
    stp: Vec<StpCache>,
    batch: usize,
    n_ctx: usize,
    n_ext: usize,
}

impl ForwardCache {
    pub fn aux_stats(&self) -> Vec<AuxStats> {
        self.blocks
            .iter()
            .map(|b| b.aux().clone())
            .chain(self.stp.iter().map(|s| s.aux().clone()))
            .collect()
    }

    pub fn depth(&self) -> usize {
        self.stp.len()
    }
}

/// Per-depth outputs of a forward pass, each `[B*N, D]` row-major.
#[derive(Debug, Clone)]
pub struct ForwardOutputs {
    /// Initial patch embeddings of the context tokens.
    pub h0: Vec<f64>,
    /// Output of each main block, `h^1 ..= h^L`.
    pub main: Vec<Vec<f64>>,
    /// Output of each executed serial block, `h^{L+1} ..`.
    pub stp: Vec<Vec<f64>>,
}

impl ForwardOutputs {
    /// `h^{L+j}` for `j = 0..=depth` (`j = 0` is the main-stack output).
    pub fn at_depth(&self, j: usize) -> &[f64] {
        if j == 0 {
            self.main.last().unwrap_or(&self.h0)
        } else {
            &self.stp[j - 1]
        }
    }
}

fn gather_rows(src: &[f64], d: usize, batch: usize, n_src: usize, n: usize, offset: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(batch * n * d);
    for b in 0..batch {
        let start = (b * n_src + offset) * d;
        out.extend_from_slice(&src[start..start + n * d]);
    }
    out
}

fn scatter_add_rows(dst: &mut [f64], src: &[f64], d: usize, batch: usize, n_dst: usize, n: usize, offset: usize) {
    for b in 0..batch {
        let start = (b * n_dst + offset) * d;
        for (a, g) in dst[start..start + n * d].iter_mut().zip(&src[b * n * d..(b + 1) * n * d]) {
            *a += g;
        }
    }
}

fn fusion_offset(variant: StpVariant, j: usize) -> usize {
    match variant {
        StpVariant::Serial => 0,
        StpVariant::ShiftToken => j,
    }
}

/// Runs the embedder, all main blocks and the first `depth` serial blocks.
pub fn forward_cached(model: &Model, input: &TokenInput<'_>, depth: usize) -> Result<(ForwardOutputs, ForwardCache)> {
    let cfg = &model.config;
    let p = &model.params;
    let (d, batch, n) = (cfg.d_model, input.batch, input.n_ctx);
    if depth > cfg.stp_blocks {
        return Err(Error::config(format!(
            "depth {depth} exceeds the {} serial blocks",
            cfg.stp_blocks
        )));
    }
    if n > cfg.n_max {
        return Err(Error::ContextLength { tokens: n, max: cfg.n_max });
    }
    let needed = n + fusion_offset(cfg.stp_variant, depth);
    if input.n_ext < needed || input.values.len() != batch * input.n_ext * cfg.patch_len {
        return Err(Error::input(format!(
            "token input holds {} tokens per row, forward needs {needed}",
            input.n_ext
        )));
    }

    let z = embed_input(input.values, input.masks, cfg.patch_len);
    let (h0_ext, embed) = embed_rows(z, &p.embedder);
    let h0 = if input.n_ext == n {
        h0_ext.clone()
    } else {
        gather_rows(&h0_ext, d, batch, input.n_ext, n, 0)
    };

    let shape = BlockShape::new(cfg, batch, n);
    let mut main = Vec::with_capacity(cfg.main_blocks);
    let mut block_caches = Vec::with_capacity(cfg.main_blocks);
    let mut h = h0.clone();
    for bp in &p.blocks {
        let (out, cache) = timemoe_forward(&h, bp, &shape);
        block_caches.push(cache);
        main.push(out.clone());
        h = out;
    }

    let mut stp = Vec::with_capacity(depth);
    let mut stp_caches = Vec::with_capacity(depth);
    for (j, sp) in p.stp.iter().take(depth).enumerate() {
        let offset = fusion_offset(cfg.stp_variant, j + 1);
        let src = if offset == 0 && input.n_ext == n {
            h0.clone()
        } else {
            gather_rows(&h0_ext, d, batch, input.n_ext, n, offset)
        };
        let (out, cache) = timestp_forward(&h, &src, sp, &shape);
        stp_caches.push(cache);
        stp.push(out.clone());
        h = out;
    }

    let outputs = ForwardOutputs { h0, main, stp };
    let cache = ForwardCache {
        embed,
        blocks: block_caches,
        stp: stp_caches,
        batch,
        n_ctx: n,
        n_ext: input.n_ext,
    };
    Ok((outputs, cache))
}

/// Backpropagates gradients of the per-depth outputs.
///
/// `d_depth[j]` is `dL/dh^{L+j}` (or `None`), `aux_weight` the coefficient of
/// each MoE layer's balancing loss in the objective.
pub fn backward(
    model: &Model,
    cache: &ForwardCache,
    d_depth: &[Option<Vec<f64>>],
    aux_weight: f64,
    grads: &mut ModelParams,
) {
    let cfg = &model.config;
    let p = &model.params;
    let (d, batch, n) = (cfg.d_model, cache.batch, cache.n_ctx);
    let rows = batch * n;
    let shape = BlockShape::new(cfg, batch, n);
    let mut dh0_ext = vec![0.0; batch * cache.n_ext * d];

    let depth = cache.stp.len();
    let take = |j: usize| -> Vec<f64> {
        d_depth
            .get(j)
            .and_then(|g| g.clone())
            .unwrap_or_else(|| vec![0.0; rows * d])
    };
    let mut carry = take(depth);
    for j in (0..depth).rev() {
        let (dprev, dsrc) = timestp_backward(&cache.stp[j], &p.stp[j], &shape, &carry, aux_weight, &mut grads.stp[j]);
        let offset = fusion_offset(cfg.stp_variant, j + 1);
        scatter_add_rows(&mut dh0_ext, &dsrc, d, batch, cache.n_ext, n, offset);
        carry = dprev;
        if let Some(Some(g)) = d_depth.get(j) {
            carry.iter_mut().zip(g).for_each(|(a, b)| *a += b);
        }
    }
    for l in (0..cfg.main_blocks).rev() {
        carry = timemoe_backward(&cache.blocks[l], &p.blocks[l], &shape, &carry, aux_weight, &mut grads.blocks[l]);
    }
    scatter_add_rows(&mut dh0_ext, &carry, d, batch, cache.n_ext, n, 0);
    embed_rows_backward(&cache.embed, &p.embedder, &dh0_ext, &mut grads.embedder);
}

/// Embeddings at every depth plus routing statistics.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// `h^0, h^1, ..., h^L, h^{L+1}, ..., h^{L+depth}`, each `[B, N, D]`.
    pub embeddings: Vec<Tensor>,
    pub aux: Vec<AuxStats>,
    pub main_blocks: usize,
    /// Number of TimeMoE/TimeSTP blocks executed.
    pub block_invocations: usize,
}

impl ForwardTrace {
    /// `h^{L+j}`.
    pub fn at_depth(&self, j: usize) -> &Tensor {
        &self.embeddings[self.main_blocks + j]
    }

    pub fn depth(&self) -> usize {
        self.embeddings.len() - 1 - self.main_blocks
    }
}

/// Forward pass at the given serial depth.
pub fn model_forward(batch: &PatchBatch, model: &Model, depth: usize) -> Result<ForwardTrace> {
    if model.config.stp_variant == StpVariant::ShiftToken && depth > 0 {
        return Err(Error::Contract(
            "shift-token blocks need future inputs; use the inference module".to_string(),
        ));
    }
    let (out, cache) = forward_cached(model, &TokenInput::from_batch(batch), depth)?;
    let shape = vec![batch.batch_size(), batch.n_patches, model.config.d_model];
    let embeddings = std::iter::once(out.h0)
        .chain(out.main)
        .chain(out.stp)
        .map(|h| Tensor::new(shape.clone(), h))
        .collect::<Result<Vec<_>>>()?;
    Ok(ForwardTrace {
        block_invocations: model.config.main_blocks + depth,
        main_blocks: model.config.main_blocks,
        aux: cache.aux_stats(),
        embeddings,
    })
}
