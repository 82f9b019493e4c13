//! Forecast generation: single-pass serial decoding and the rolling baseline.

use crate::backbone::{forward_cached, Model, StpVariant, TokenInput};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::objectives::project_rows;
use crate::tokenizer::{norm_stats, patchify, NormStats};

/// Quantile forecasts in the data's original scale.
#[derive(Debug, Clone, PartialEq)]
pub struct ForecastDistribution {
    pub levels: Vec<f64>,
    /// `[Q, F]`.
    pub values: Tensor,
    /// Model forward passes issued.
    pub passes: usize,
    /// TimeMoE and TimeSTP block executions across all passes.
    pub block_invocations: usize,
}

impl ForecastDistribution {
    pub fn horizon(&self) -> usize {
        self.values.shape()[1]
    }

    /// Forecast at level index `q`.
    pub fn level(&self, q: usize) -> &[f64] {
        let f = self.horizon();
        &self.values.data()[q * f..(q + 1) * f]
    }

    /// Forecast at the level closest to 0.5.
    pub fn median(&self) -> &[f64] {
        let q = self
            .levels
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - 0.5).abs().total_cmp(&(b.1 - 0.5).abs()))
            .map_or(0, |(i, _)| i);
        self.level(q)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ForecastOptions {
    /// Sort each step's quantiles so they never cross.
    pub sort_quantiles: bool,
}

/// Serial depth used for a horizon of `f` steps within one window.
pub fn adaptive_depth(f: usize, patch_len: usize) -> usize {
    f.div_ceil(patch_len).saturating_sub(1)
}

/// Normalized context tokens of the last `n_max` patches of `history`.
struct Window {
    values: Vec<f64>,
    masks: Vec<f64>,
    n: usize,
    stats: NormStats,
}

fn window(model: &Model, history: &[f64]) -> Result<Window> {
    let max = model.config.max_context();
    let tail = &history[history.len().saturating_sub(max)..];
    let stats = norm_stats(tail)?;
    let normed: Vec<f64> = tail.iter().map(|&x| stats.normalize(x)).collect();
    let p = patchify(&normed, model.config.patch_len)?;
    Ok(Window {
        values: p.values,
        masks: p.masks,
        n: p.n,
        stats,
    })
}

/// Normalized `Q*P` predictions of the last context token at depths
/// `0..=depth`, and the number of blocks executed.
fn last_token_predictions(model: &Model, w: &Window, depth: usize) -> Result<(Vec<Vec<f64>>, usize)> {
    let cfg = &model.config;
    let d = cfg.d_model;
    let last = |h: &[f64]| project_rows(&h[(w.n - 1) * d..w.n * d], &model.params.head);
    match cfg.stp_variant {
        StpVariant::Serial => {
            let input = TokenInput {
                values: &w.values,
                masks: &w.masks,
                batch: 1,
                n_ctx: w.n,
                n_ext: w.n,
            };
            let (out, _) = forward_cached(model, &input, depth)?;
            let preds = (0..=depth).map(|j| last(out.at_depth(j))).collect();
            Ok((preds, cfg.main_blocks + depth))
        }
        StpVariant::ShiftToken => {
            // depth j reads the input patch j positions ahead, which at
            // inference is the median prediction from depth j - 1
            let p = cfg.patch_len;
            let med = cfg.median_index();
            let mut values = w.values.clone();
            let mut masks = w.masks.clone();
            let mut preds = Vec::with_capacity(depth + 1);
            let mut blocks = 0;
            for j in 0..=depth {
                let input = TokenInput {
                    values: &values,
                    masks: &masks,
                    batch: 1,
                    n_ctx: w.n,
                    n_ext: w.n + j,
                };
                let (out, _) = forward_cached(model, &input, j)?;
                blocks += cfg.main_blocks + j;
                let pred = last(out.at_depth(j));
                values.extend_from_slice(&pred[med * p..(med + 1) * p]);
                masks.extend(std::iter::repeat_n(1.0, p));
                preds.push(pred);
            }
            Ok((preds, blocks))
        }
    }
}

fn check_request(model: &Model, series: &[f64], horizon: usize) -> Result<()> {
    if series.is_empty() {
        return Err(Error::input("cannot forecast from an empty series"));
    }
    if horizon == 0 {
        return Err(Error::input("forecast horizon must be at least 1"));
    }
    model.config.validate()
}

struct Collector {
    q: usize,
    f: usize,
    p: usize,
    rows: Vec<Vec<f64>>,
    median: usize,
}

impl Collector {
    fn new(model: &Model, f: usize) -> Self {
        let q = model.config.n_quantiles();
        Collector {
            q,
            f,
            p: model.config.patch_len,
            rows: vec![Vec::with_capacity(f); q],
            median: model.config.median_index(),
        }
    }

    fn remaining(&self) -> usize {
        self.f - self.rows[0].len()
    }

    /// Appends a normalized `Q*P` patch, de-normalized with `stats`; returns
    /// the median steps that were kept.
    fn push(&mut self, pred: &[f64], stats: NormStats) -> Vec<f64> {
        let take = self.remaining().min(self.p);
        for (q, row) in self.rows.iter_mut().enumerate() {
            row.extend(pred[q * self.p..q * self.p + take].iter().map(|&v| stats.denormalize(v)));
        }
        let med = &self.rows[self.median];
        med[med.len() - take..].to_vec()
    }

    fn finish(self, levels: &[f64], opts: ForecastOptions, passes: usize, blocks: usize) -> Result<ForecastDistribution> {
        let mut data: Vec<f64> = self.rows.concat();
        if opts.sort_quantiles {
            let mut col = vec![0.0; self.q];
            for t in 0..self.f {
                for q in 0..self.q {
                    col[q] = data[q * self.f + t];
                }
                col.sort_by(f64::total_cmp);
                for q in 0..self.q {
                    data[q * self.f + t] = col[q];
                }
            }
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("forecast produced non-finite values"));
        }
        Ok(ForecastDistribution {
            levels: levels.to_vec(),
            values: Tensor::new(vec![self.q, self.f], data)?,
            passes,
            block_invocations: blocks,
        })
    }
}

/// Serial forecast of `horizon` steps. Each forward pass covers up to
/// `(H + 1) P` steps at depth `ceil(remaining / P) - 1`; longer horizons feed
/// the median back as context and re-normalize per window.
pub fn forecast(model: &Model, series: &[f64], horizon: usize, opts: ForecastOptions) -> Result<ForecastDistribution> {
    check_request(model, series, horizon)?;
    let cfg = &model.config;
    let mut history = series.to_vec();
    let mut out = Collector::new(model, horizon);
    let (mut passes, mut blocks) = (0, 0);
    while out.remaining() > 0 {
        let w = window(model, &history)?;
        let depth = adaptive_depth(out.remaining(), cfg.patch_len).min(cfg.stp_blocks);
        let (preds, b) = last_token_predictions(model, &w, depth)?;
        passes += 1;
        blocks += b;
        for pred in &preds {
            let fed = out.push(pred, w.stats);
            history.extend(fed);
        }
    }
    out.finish(&cfg.quantiles, opts, passes, blocks)
}

/// Next-token rolling baseline: serial blocks unused, one patch per main-stack
/// pass with the median fed back, full recompute each roll.
pub fn forecast_rolling_ntp(
    model: &Model,
    series: &[f64],
    horizon: usize,
    opts: ForecastOptions,
) -> Result<ForecastDistribution> {
    check_request(model, series, horizon)?;
    let cfg = &model.config;
    let mut history = series.to_vec();
    let mut out = Collector::new(model, horizon);
    let (mut passes, mut blocks) = (0, 0);
    while out.remaining() > 0 {
        let w = window(model, &history)?;
        let input = TokenInput {
            values: &w.values,
            masks: &w.masks,
            batch: 1,
            n_ctx: w.n,
            n_ext: w.n,
        };
        let (h, _) = forward_cached(model, &input, 0)?;
        let d = cfg.d_model;
        let pred = project_rows(&h.at_depth(0)[(w.n - 1) * d..w.n * d], &model.params.head);
        passes += 1;
        blocks += cfg.main_blocks;
        history.extend(out.push(&pred, w.stats));
    }
    out.finish(&cfg.quantiles, opts, passes, blocks)
}

/// Closed-form block count of [`forecast`] for the serial variant.
pub fn serial_block_count(model: &Model, horizon: usize) -> usize {
    let cfg = &model.config;
    let native = cfg.native_horizon();
    let full = horizon / native;
    let rest = horizon % native;
    let mut blocks = full * (cfg.main_blocks + cfg.stp_blocks);
    if rest > 0 {
        blocks += cfg.main_blocks + adaptive_depth(rest, cfg.patch_len);
    }
    blocks
}

/// Closed-form block count of [`forecast_rolling_ntp`].
pub fn rolling_block_count(model: &Model, horizon: usize) -> usize {
    horizon.div_ceil(model.config.patch_len) * model.config.main_blocks
}
