//! Shared quantile head and the training objectives built on it.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::kernels::{linear, linear_backward};
use crate::numerics::Tensor;
use crate::params::{tensor_fields, trunc_normal};

/// Denominator guard for [`wql`].
pub const WQL_EPS: f64 = 1e-8;

/// Ascending quantile levels in `(0, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantileGrid {
    levels: Vec<f64>,
}

impl QuantileGrid {
    pub fn new(levels: Vec<f64>) -> Result<Self> {
        if levels.is_empty()
            || levels.iter().any(|&q| !(q > 0.0 && q < 1.0))
            || levels.windows(2).any(|w| w[0] >= w[1])
        {
            return Err(Error::config("quantile levels must be strictly increasing in (0, 1)"));
        }
        Ok(QuantileGrid { levels })
    }

    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }
}

impl Default for QuantileGrid {
    /// `{0.1, 0.2, ..., 0.9}`
    fn default() -> Self {
        QuantileGrid {
            levels: crate::backbone::default_quantiles(),
        }
    }
}

/// Linear map `D -> Q*P` shared by every depth.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub w: Tensor,
    pub b: Tensor,
}

tensor_fields!(HeadParams { w, b });

impl HeadParams {
    pub fn zeros(d_model: usize, n_quantiles: usize, patch_len: usize) -> Self {
        HeadParams {
            w: Tensor::zeros(&[d_model, n_quantiles * patch_len]),
            b: Tensor::zeros(&[n_quantiles * patch_len]),
        }
    }

    pub fn init<R: Rng + ?Sized>(rng: &mut R, d_model: usize, n_quantiles: usize, patch_len: usize, std: f64) -> Self {
        HeadParams {
            w: trunc_normal(rng, &[d_model, n_quantiles * patch_len], std),
            b: Tensor::zeros(&[n_quantiles * patch_len]),
        }
    }

    pub fn d_model(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn out_width(&self) -> usize {
        self.w.shape()[1]
    }
}

/// Projects rows of width `D` to `Q*P` quantile values (level-major).
pub fn project_rows(h: &[f64], head: &HeadParams) -> Vec<f64> {
    let d = head.d_model();
    linear(h, h.len() / d, head.w.data(), Some(head.b.data()), d, head.out_width())
}

pub fn project_rows_backward(h: &[f64], head: &HeadParams, dy: &[f64], grads: &mut HeadParams) -> Vec<f64> {
    let d = head.d_model();
    let rows = h.len() / d;
    linear_backward(h, rows, head.w.data(), dy, d, head.out_width(), grads.w.data_mut(), Some(grads.b.data_mut()))
}

/// `PatchProject`: `[..., D] -> [..., Q, P]`.
pub fn patch_project(h: &Tensor, head: &HeadParams, patch_len: usize) -> Result<Tensor> {
    let d = head.d_model();
    if h.last_dim() != d || !head.out_width().is_multiple_of(patch_len) {
        return Err(Error::config(format!(
            "head expects width {d}, got {}",
            h.last_dim()
        )));
    }
    let q = head.out_width() / patch_len;
    let mut shape = h.shape()[..h.shape().len() - 1].to_vec();
    shape.extend([q, patch_len]);
    Tensor::new(shape, project_rows(h.data(), head))
}

/// Pinball loss of prediction `xhat` for target `x` at level `q`.
pub fn pinball(x: f64, xhat: f64, q: f64) -> f64 {
    if x < xhat {
        (1.0 - q) * (xhat - x)
    } else {
        q * (x - xhat)
    }
}

/// Derivative of [`pinball`] with respect to `xhat`.
pub fn pinball_grad(x: f64, xhat: f64, q: f64) -> f64 {
    if x < xhat {
        1.0 - q
    } else {
        -q
    }
}

/// Weighted quantile loss `2 sum rho / max(sum |x|, eps)`.
pub fn wql(x: &[f64], xhat: &[f64], q: f64) -> f64 {
    let num: f64 = x.iter().zip(xhat).map(|(&a, &b)| pinball(a, b, q)).sum();
    let den: f64 = x.iter().map(|a| a.abs()).sum();
    2.0 * num / den.max(WQL_EPS)
}

/// Mean wQL over the grid. `preds` is `[Q, P]` level-major; positions with
/// mask 0 are excluded from numerator and denominator.
pub fn pred_loss(x: &[f64], mask: &[f64], preds: &[f64], levels: &[f64]) -> f64 {
    let p = x.len();
    let den = x.iter().zip(mask).map(|(a, m)| m * a.abs()).sum::<f64>().max(WQL_EPS);
    let mut total = 0.0;
    for (k, &q) in levels.iter().enumerate() {
        let row = &preds[k * p..(k + 1) * p];
        let num: f64 = (0..p).map(|t| mask[t] * pinball(x[t], row[t], q)).sum();
        total += 2.0 * num / den;
    }
    total / levels.len() as f64
}

/// Adds `scale * d pred_loss / d preds` into `dpreds`.
pub fn pred_loss_grad(x: &[f64], mask: &[f64], preds: &[f64], levels: &[f64], scale: f64, dpreds: &mut [f64]) {
    let p = x.len();
    let den = x.iter().zip(mask).map(|(a, m)| m * a.abs()).sum::<f64>().max(WQL_EPS);
    let c = scale * 2.0 / (den * levels.len() as f64);
    for (k, &q) in levels.iter().enumerate() {
        for t in 0..p {
            if mask[t] != 0.0 {
                dpreds[k * p + t] += c * mask[t] * pinball_grad(x[t], preds[k * p + t], q);
            }
        }
    }
}

/// Normalized target patches of a batch of windows: `[B, total, P]`.
#[derive(Debug, Clone)]
pub struct TargetPatches {
    pub values: Vec<f64>,
    pub masks: Vec<f64>,
    pub batch: usize,
    pub total: usize,
    pub patch_len: usize,
}

impl TargetPatches {
    pub fn patch(&self, b: usize, index: usize) -> (&[f64], &[f64]) {
        let p = self.patch_len;
        let off = (b * self.total + index) * p;
        (&self.values[off..off + p], &self.masks[off..off + p])
    }
}

/// Batch-mean of `sum_i pred_loss(target[i + offset], project(h_i))` over
/// the `tokens` rows of each window; optionally accumulates gradients.
///
/// When `grad` is given, `scale * dL/dh` is added into its `dh` buffer.
pub fn offset_loss(
    h: &[f64],
    tokens: usize,
    offset: usize,
    targets: &TargetPatches,
    head: &HeadParams,
    levels: &[f64],
    grad: Option<(f64, &mut [f64], &mut HeadParams)>,
) -> Result<f64> {
    if tokens + offset > targets.total {
        return Err(Error::input(format!(
            "targets hold {} patches, need {}",
            targets.total,
            tokens + offset
        )));
    }
    let preds = project_rows(h, head);
    let w = head.out_width();
    let batch = targets.batch;
    let mut loss = 0.0;
    let mut dpreds = grad.as_ref().map(|_| vec![0.0; preds.len()]);
    let scale = grad.as_ref().map(|g| g.0).unwrap_or(0.0) / batch as f64;
    for b in 0..batch {
        for i in 0..tokens {
            let (x, m) = targets.patch(b, i + offset);
            let row = &preds[(b * tokens + i) * w..][..w];
            loss += pred_loss(x, m, row, levels);
            if let Some(dp) = dpreds.as_mut() {
                pred_loss_grad(x, m, row, levels, scale, &mut dp[(b * tokens + i) * w..][..w]);
            }
        }
    }
    if let (Some(dp), Some((_, dh, head_grads))) = (dpreds, grad) {
        let d = project_rows_backward(h, head, &dp, head_grads);
        dh.iter_mut().zip(&d).for_each(|(a, b)| *a += b);
    }
    Ok(loss / batch as f64)
}

/// Training stage; selects the serial-block weighting.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Pretrain,
    Posttrain,
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrain" => Ok(Stage::Pretrain),
            "posttrain" => Ok(Stage::Posttrain),
            other => Err(Error::config(format!("unknown stage '{other}'"))),
        }
    }
}

impl Stage {
    pub fn as_str(&self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Posttrain => "posttrain",
        }
    }
}

/// Per-depth weights: uniform for pre-training, `1/sqrt(j)` afterwards.
pub fn stp_weights(stage: Stage, depth: usize) -> Vec<f64> {
    (1..=depth)
        .map(|j| match stage {
            Stage::Pretrain => 1.0,
            Stage::Posttrain => 1.0 / (j as f64).sqrt(),
        })
        .collect()
}

/// Loss components of one batch.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossParts {
    pub ntp: f64,
    pub stp: f64,
    pub aux: f64,
}

/// `ntp + stp + alpha * aux`; the stage only enters through the STP weights.
pub fn stage_loss(parts: LossParts, alpha: f64) -> f64 {
    parts.ntp + parts.stp + alpha * parts.aux
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pinball_examples() {
        assert_eq!(pinball(1.3, 1.3, 0.2), 0.0);
        assert_eq!(pinball(2.0, 1.0, 0.5), 0.5);
        assert!((pinball(0.0, 1.0, 0.9) - 0.1).abs() < 1e-15);
    }

    #[test]
    fn wql_examples() {
        assert_eq!(wql(&[1.0, -2.0], &[1.0, -2.0], 0.3), 0.0);
        assert_eq!(wql(&[1.0, 1.0], &[0.0, 0.0], 0.5), 1.0);
        let v = wql(&[0.0, 0.0], &[0.5, -0.5], 0.5);
        assert!(v.is_finite() && v > 0.0);
    }

    #[test]
    fn pred_loss_reductions() {
        let x = [1.0, -3.0, 2.0];
        let m = [1.0; 3];
        let exact: Vec<f64> = x.iter().chain(&x).copied().collect();
        assert_eq!(pred_loss(&x, &m, &exact, &[0.25, 0.75]), 0.0);

        let xhat = [0.5, -1.0, 2.5];
        let mae_ratio = xhat.iter().zip(&x).map(|(a, b)| (a - b).abs()).sum::<f64>()
            / x.iter().map(|a: &f64| a.abs()).sum::<f64>();
        assert!((pred_loss(&x, &m, &xhat, &[0.5]) - mae_ratio).abs() < 1e-15);
    }

    #[test]
    fn masked_positions_are_ignored() {
        let levels = [0.1, 0.5, 0.9];
        let x = [0.0, 1.0, -2.0];
        let preds: Vec<f64> = (0..9).map(|i| i as f64 * 0.1 - 0.3).collect();
        let full = pred_loss(&x[1..], &[1.0, 1.0], &[preds[1], preds[2], preds[4], preds[5], preds[7], preds[8]], &levels);
        let mut x2 = x;
        x2[0] = 123.0;
        let masked = pred_loss(&x2, &[0.0, 1.0, 1.0], &preds, &levels);
        assert!((full - masked).abs() < 1e-15);
    }

    #[test]
    #[allow(clippy::approx_constant)]
    fn weight_vectors() {
        assert_eq!(stp_weights(Stage::Pretrain, 3), vec![1.0; 3]);
        let w = stp_weights(Stage::Posttrain, 16);
        for (a, b) in w.iter().zip([1.0, 0.70711, 0.57735, 0.5]) {
            assert!((a - b).abs() < 1e-5);
        }
        assert_eq!(w[15], 0.25);
    }

    #[test]
    fn stage_loss_arithmetic() {
        let parts = LossParts { ntp: 1.0, stp: 2.0, aux: 1.0 };
        assert!((stage_loss(parts, 0.01) - 3.01).abs() < 1e-15);
        assert_eq!(stage_loss(parts, 0.0), 3.0);
    }

    #[test]
    fn projection_shape() {
        let head = HeadParams::zeros(32, 9, 16);
        let y = patch_project(&Tensor::zeros(&[2, 32]), &head, 16).unwrap();
        assert_eq!(y.shape(), &[2, 9, 16]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }
}
