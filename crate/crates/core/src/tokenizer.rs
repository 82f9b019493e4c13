//! Instance re-normalization, patching, and the patch embedder.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::kernels::{linear, linear_backward, silu, silu_grad};
use crate::numerics::Tensor;
use crate::params::{tensor_fields, trunc_normal};

/// Lower bound applied to the standard deviation of a window.
pub const SIGMA_FLOOR: f64 = 1e-8;

/// Mean and (floored) standard deviation of an input window.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormStats {
    pub mu: f64,
    pub sigma: f64,
}

impl NormStats {
    pub fn normalize(&self, x: f64) -> f64 {
        (x - self.mu) / self.sigma
    }

    pub fn denormalize(&self, x: f64) -> f64 {
        self.sigma * x + self.mu
    }
}

/// Standardizes `series` by its own mean and population standard deviation.
pub fn renormalize(series: &[f64]) -> Result<(Vec<f64>, NormStats)> {
    let stats = norm_stats(series)?;
    Ok((series.iter().map(|&x| stats.normalize(x)).collect(), stats))
}

pub fn norm_stats(series: &[f64]) -> Result<NormStats> {
    if series.is_empty() {
        return Err(Error::input("cannot normalize an empty series"));
    }
    if series.iter().any(|x| !x.is_finite()) {
        return Err(Error::numeric("series contains non-finite values"));
    }
    let t = series.len() as f64;
    let mu = series.iter().sum::<f64>() / t;
    let var = series.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / t;
    Ok(NormStats {
        mu,
        sigma: var.sqrt().max(SIGMA_FLOOR),
    })
}

/// `sigma * pred + mu`, elementwise.
pub fn denormalize(pred: &Tensor, stats: NormStats) -> Tensor {
    let data = pred.data().iter().map(|&x| stats.denormalize(x)).collect();
    Tensor::new(pred.shape().to_vec(), data).expect("shape preserved")
}

/// Output of [`patchify`]: `n` rows of `patch_len` values and matching masks.
#[derive(Debug, Clone, PartialEq)]
pub struct Patches {
    pub values: Vec<f64>,
    pub masks: Vec<f64>,
    pub n: usize,
}

/// Splits `series` into `ceil(T / P)` patches, left-padding the first one.
pub fn patchify(series: &[f64], patch_len: usize) -> Result<Patches> {
    if series.is_empty() || patch_len == 0 {
        return Err(Error::input("patchify needs a non-empty series and P >= 1"));
    }
    let n = series.len().div_ceil(patch_len);
    let pad = n * patch_len - series.len();
    let mut values = vec![0.0; n * patch_len];
    let mut masks = vec![0.0; n * patch_len];
    values[pad..].copy_from_slice(series);
    masks[pad..].iter_mut().for_each(|m| *m = 1.0);
    Ok(Patches { values, masks, n })
}

/// Normalized, masked patches for a batch of equally-long windows.
#[derive(Debug, Clone)]
pub struct PatchBatch {
    /// `[B, N, P]`
    pub patches: Tensor,
    /// `[B, N, P]`, 1 = observed, 0 = left pad.
    pub masks: Tensor,
    pub stats: Vec<NormStats>,
    pub n_patches: usize,
}

impl PatchBatch {
    /// Normalizes each window by its own statistics and patches it.
    pub fn from_windows(windows: &[&[f64]], patch_len: usize) -> Result<Self> {
        let mut stats = Vec::with_capacity(windows.len());
        let mut normed = Vec::with_capacity(windows.len());
        for w in windows {
            let (x, s) = renormalize(w)?;
            stats.push(s);
            normed.push(x);
        }
        Self::from_normalized(&normed, stats, patch_len)
    }

    /// Builds a batch from windows that are already in normalized space.
    pub fn from_normalized(windows: &[Vec<f64>], stats: Vec<NormStats>, patch_len: usize) -> Result<Self> {
        let Some(first) = windows.first() else {
            return Err(Error::input("empty batch"));
        };
        let n = first.len().div_ceil(patch_len.max(1));
        let mut values = Vec::with_capacity(windows.len() * n * patch_len);
        let mut masks = Vec::with_capacity(values.capacity());
        for w in windows {
            let p = patchify(w, patch_len)?;
            if p.n != n {
                return Err(Error::input(format!(
                    "batch windows disagree on patch count ({} vs {n})",
                    p.n
                )));
            }
            values.extend(p.values);
            masks.extend(p.masks);
        }
        let shape = vec![windows.len(), n, patch_len];
        Ok(PatchBatch {
            patches: Tensor::new(shape.clone(), values)?,
            masks: Tensor::new(shape, masks)?,
            stats,
            n_patches: n,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.patches.shape()[0]
    }

    pub fn patch_len(&self) -> usize {
        self.patches.shape()[2]
    }
}

/// Weights of the residual patch embedder `R^{2P} -> R^D`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbedderParams {
    /// `[2P, D]`
    pub skip_w: Tensor,
    pub skip_b: Tensor,
    /// `[2P, D]`
    pub in_w: Tensor,
    pub in_b: Tensor,
    /// `[D, D]`
    pub out_w: Tensor,
    pub out_b: Tensor,
}

tensor_fields!(EmbedderParams { skip_w, skip_b, in_w, in_b, out_w, out_b });

impl EmbedderParams {
    pub fn zeros(patch_len: usize, d_model: usize) -> Self {
        let z = 2 * patch_len;
        EmbedderParams {
            skip_w: Tensor::zeros(&[z, d_model]),
            skip_b: Tensor::zeros(&[d_model]),
            in_w: Tensor::zeros(&[z, d_model]),
            in_b: Tensor::zeros(&[d_model]),
            out_w: Tensor::zeros(&[d_model, d_model]),
            out_b: Tensor::zeros(&[d_model]),
        }
    }

    pub fn init<R: Rng + ?Sized>(rng: &mut R, patch_len: usize, d_model: usize, std: f64) -> Self {
        let z = 2 * patch_len;
        let mut p = Self::zeros(patch_len, d_model);
        p.skip_w = trunc_normal(rng, &[z, d_model], std);
        p.in_w = trunc_normal(rng, &[z, d_model], std);
        p.out_w = trunc_normal(rng, &[d_model, d_model], std);
        p
    }

    pub fn d_model(&self) -> usize {
        self.skip_b.len()
    }

    pub fn input_width(&self) -> usize {
        self.skip_w.shape()[0]
    }
}

/// Saved activations for the embedder backward pass.
#[derive(Debug, Clone)]
pub struct EmbedCache {
    z: Vec<f64>,
    pre: Vec<f64>,
    act: Vec<f64>,
    rows: usize,
}

/// Concatenates masked patch values with their masks: rows of width `2P`.
pub fn embed_input(values: &[f64], masks: &[f64], patch_len: usize) -> Vec<f64> {
    let rows = values.len() / patch_len;
    let mut z = Vec::with_capacity(rows * 2 * patch_len);
    for (v, m) in values.chunks_exact(patch_len).zip(masks.chunks_exact(patch_len)) {
        z.extend(v.iter().zip(m).map(|(x, m)| x * m));
        z.extend_from_slice(m);
    }
    z
}

/// Embeds `rows` concatenated `[patch, mask]` vectors.
pub fn embed_rows(z: Vec<f64>, params: &EmbedderParams) -> (Vec<f64>, EmbedCache) {
    let width = params.input_width();
    let d = params.d_model();
    let rows = z.len() / width;
    let mut out = linear(&z, rows, params.skip_w.data(), Some(params.skip_b.data()), width, d);
    let pre = linear(&z, rows, params.in_w.data(), Some(params.in_b.data()), width, d);
    let act: Vec<f64> = pre.iter().map(|&x| silu(x)).collect();
    let mlp = linear(&act, rows, params.out_w.data(), Some(params.out_b.data()), d, d);
    out.iter_mut().zip(&mlp).for_each(|(o, m)| *o += m);
    (out, EmbedCache { z, pre, act, rows })
}

/// Backward of [`embed_rows`]; accumulates into `grads`, returns `dz`.
pub fn embed_rows_backward(
    cache: &EmbedCache,
    params: &EmbedderParams,
    dh: &[f64],
    grads: &mut EmbedderParams,
) -> Vec<f64> {
    let width = params.input_width();
    let d = params.d_model();
    let rows = cache.rows;
    let mut dz = linear_backward(
        &cache.z,
        rows,
        params.skip_w.data(),
        dh,
        width,
        d,
        grads.skip_w.data_mut(),
        Some(grads.skip_b.data_mut()),
    );
    let mut dact = linear_backward(
        &cache.act,
        rows,
        params.out_w.data(),
        dh,
        d,
        d,
        grads.out_w.data_mut(),
        Some(grads.out_b.data_mut()),
    );
    dact.iter_mut().zip(&cache.pre).for_each(|(g, &x)| *g *= silu_grad(x));
    let dz2 = linear_backward(
        &cache.z,
        rows,
        params.in_w.data(),
        &dact,
        width,
        d,
        grads.in_w.data_mut(),
        Some(grads.in_b.data_mut()),
    );
    dz.iter_mut().zip(&dz2).for_each(|(a, b)| *a += b);
    dz
}

/// `h0 = skip(z) + mlp_out(silu(mlp_in(z)))` with `z = concat(patch, mask)`.
pub fn embed_patches(batch: &PatchBatch, params: &EmbedderParams) -> Result<Tensor> {
    let p = batch.patch_len();
    if params.input_width() != 2 * p {
        return Err(Error::config(format!(
            "embedder expects patches of {} values, batch has {p}",
            params.input_width() / 2
        )));
    }
    let z = embed_input(batch.patches.data(), batch.masks.data(), p);
    let (h, _) = embed_rows(z, params);
    Tensor::new(vec![batch.batch_size(), batch.n_patches, params.d_model()], h)
}
