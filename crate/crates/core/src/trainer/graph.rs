//! Training batches and the differentiable stage objective.

use crate::backbone::{aux_loss, backward, forward_cached, Model, ModelParams, StpVariant, TokenInput};
use crate::error::{Error, Result};
use crate::numerics::{ParamSet, Tensor};
use crate::objectives::{offset_loss, stage_loss, LossParts, TargetPatches};
use crate::tokenizer::{norm_stats, patchify, NormStats};

/// Normalized windows ready for a training forward pass.
#[derive(Debug, Clone)]
pub struct TrainBatch {
    /// Token patches `[B, n_ext, P]`.
    pub values: Vec<f64>,
    pub masks: Vec<f64>,
    pub n_ctx: usize,
    pub n_ext: usize,
    /// Whole-window patches `[B, N + H + 1, P]` used as targets.
    pub targets: TargetPatches,
    pub stats: Vec<NormStats>,
}

impl TrainBatch {
    /// Builds a batch from raw windows of `(N + H + 1) P` points.
    ///
    /// Each window is normalized with the statistics of its first `N P`
    /// points; targets share those statistics.
    pub fn from_windows(windows: &[Vec<f64>], model: &Model, n_ctx: usize) -> Result<Self> {
        let cfg = &model.config;
        let p = cfg.patch_len;
        let total = n_ctx + cfg.stp_blocks + 1;
        if windows.is_empty() {
            return Err(Error::input("empty training batch"));
        }
        let n_ext = match cfg.stp_variant {
            StpVariant::Serial => n_ctx,
            StpVariant::ShiftToken => total,
        };
        let mut values = Vec::with_capacity(windows.len() * n_ext * p);
        let mut masks = Vec::with_capacity(values.capacity());
        let mut t_values = Vec::with_capacity(windows.len() * total * p);
        let mut t_masks = Vec::with_capacity(t_values.capacity());
        let mut stats = Vec::with_capacity(windows.len());
        for w in windows {
            if w.len() != total * p {
                return Err(Error::input(format!(
                    "training window has {} points, expected {}",
                    w.len(),
                    total * p
                )));
            }
            let s = norm_stats(&w[..n_ctx * p])?;
            let normed: Vec<f64> = w.iter().map(|&x| s.normalize(x)).collect();
            let patches = patchify(&normed, p)?;
            values.extend_from_slice(&patches.values[..n_ext * p]);
            masks.extend_from_slice(&patches.masks[..n_ext * p]);
            t_values.extend(patches.values);
            t_masks.extend(patches.masks);
            stats.push(s);
        }
        Ok(TrainBatch {
            values,
            masks,
            n_ctx,
            n_ext,
            targets: TargetPatches {
                values: t_values,
                masks: t_masks,
                batch: windows.len(),
                total,
                patch_len: p,
            },
            stats,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.targets.batch
    }

    pub fn tokens(&self) -> TokenInput<'_> {
        TokenInput {
            values: &self.values,
            masks: &self.masks,
            batch: self.batch_size(),
            n_ctx: self.n_ctx,
            n_ext: self.n_ext,
        }
    }
}

/// Loss value, its parts, and the per-depth prediction losses.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub parts: LossParts,
    pub total: f64,
    /// Unweighted `sum_i pred_loss` at each depth `0..=H`.
    pub per_depth: Vec<f64>,
}

/// Evaluates `ntp + (1/H) sum_j w_j stp_j + alpha aux`, and its gradient when
/// `grads` is given.
pub fn loss_and_grad(
    model: &Model,
    batch: &TrainBatch,
    weights: &[f64],
    alpha: f64,
    grads: Option<&mut ModelParams>,
) -> Result<Evaluation> {
    let cfg = &model.config;
    let depth = cfg.stp_blocks;
    if weights.len() != depth {
        return Err(Error::Contract(format!(
            "{} serial weights for {depth} blocks",
            weights.len()
        )));
    }
    let (out, cache) = forward_cached(model, &batch.tokens(), depth)?;
    let levels = &cfg.quantiles;
    let n = batch.n_ctx;
    let rows = batch.batch_size() * n * cfg.d_model;
    let mut grads = grads;
    let mut d_depth: Vec<Option<Vec<f64>>> = Vec::with_capacity(depth + 1);
    let mut per_depth = Vec::with_capacity(depth + 1);
    let mut parts = LossParts::default();

    for j in 0..=depth {
        let coef = if j == 0 { 1.0 } else { weights[j - 1] / depth as f64 };
        let h = out.at_depth(j);
        let mut dh = grads.as_ref().map(|_| vec![0.0; rows]);
        let g = match (grads.as_deref_mut(), dh.as_mut()) {
            (Some(g), Some(dh)) => Some((coef, dh.as_mut_slice(), &mut g.head)),
            _ => None,
        };
        let l = offset_loss(h, n, j + 1, &batch.targets, &model.params.head, levels, g)?;
        per_depth.push(l);
        if j == 0 {
            parts.ntp = l;
        } else {
            parts.stp += coef * l;
        }
        d_depth.push(dh);
    }

    let stats = cache.aux_stats();
    let layers = stats.len().max(1) as f64;
    parts.aux = stats.iter().map(aux_loss).sum::<f64>() / layers;
    let total = stage_loss(parts, alpha);
    if !total.is_finite() {
        return Err(Error::numeric(format!("non-finite loss {total}")));
    }

    if let Some(g) = grads {
        backward(model, &cache, &d_depth, alpha / layers, g);
    }
    Ok(Evaluation { parts, total, per_depth })
}

impl ParamSet for Model {
    fn params(&self) -> Vec<(String, &Tensor)> {
        self.params.params()
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        self.params.params_mut()
    }
}
