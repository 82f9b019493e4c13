//! Layer primitives with forward and backward passes.
//!
//! The row-oriented functions operate on flat row-major buffers and are what
//! the model uses; the `Tensor` wrappers at the bottom validate inputs and are
//! the public one-shot entry points.

use super::kernels::{softmax_backward, softmax_in_place};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Denominator floor for [`l2_normalize`].
pub const L2_EPS: f64 = 1e-12;

/// Forward RMSNorm over rows of width `d`. Returns outputs and per-row `1/rms`.
pub fn rmsnorm_rows(x: &[f64], d: usize, gain: &[f64], eps: f64) -> (Vec<f64>, Vec<f64>) {
    let rows = x.len() / d;
    let mut y = vec![0.0; x.len()];
    let mut inv = Vec::with_capacity(rows);
    for (xr, yr) in x.chunks_exact(d).zip(y.chunks_exact_mut(d)) {
        let ms = xr.iter().map(|v| v * v).sum::<f64>() / d as f64;
        let r = (ms + eps).sqrt();
        let ir = if r > 0.0 { 1.0 / r } else { 0.0 };
        for ((o, v), g) in yr.iter_mut().zip(xr).zip(gain) {
            *o = g * v * ir;
        }
        inv.push(ir);
    }
    (y, inv)
}

/// Backward of [`rmsnorm_rows`]; accumulates into `dgain` and returns `dx`.
pub fn rmsnorm_rows_backward(
    x: &[f64],
    d: usize,
    gain: &[f64],
    inv_rms: &[f64],
    dy: &[f64],
    dgain: &mut [f64],
) -> Vec<f64> {
    let mut dx = vec![0.0; x.len()];
    let mut dxhat = vec![0.0; d];
    for (((xr, dyr), dxr), &ir) in x
        .chunks_exact(d)
        .zip(dy.chunks_exact(d))
        .zip(dx.chunks_exact_mut(d))
        .zip(inv_rms)
    {
        let mut dot = 0.0;
        for k in 0..d {
            let xh = xr[k] * ir;
            dgain[k] += dyr[k] * xh;
            dxhat[k] = dyr[k] * gain[k];
            dot += dxhat[k] * xh;
        }
        dot /= d as f64;
        for k in 0..d {
            dxr[k] = (dxhat[k] - xr[k] * ir * dot) * ir;
        }
    }
    dx
}

/// Row-wise unit normalization. Returns outputs and the guarded norms.
pub fn l2_normalize_rows(x: &[f64], d: usize) -> (Vec<f64>, Vec<f64>) {
    let mut y = vec![0.0; x.len()];
    let mut norms = Vec::with_capacity(x.len() / d);
    for (xr, yr) in x.chunks_exact(d).zip(y.chunks_exact_mut(d)) {
        let n = xr.iter().map(|v| v * v).sum::<f64>().sqrt().max(L2_EPS);
        for (o, v) in yr.iter_mut().zip(xr) {
            *o = v / n;
        }
        norms.push(n);
    }
    (y, norms)
}

/// Backward of [`l2_normalize_rows`] given its outputs `y` and norms.
pub fn l2_normalize_rows_backward(y: &[f64], d: usize, norms: &[f64], dy: &[f64]) -> Vec<f64> {
    let mut dx = vec![0.0; y.len()];
    for (((yr, dyr), dxr), &n) in y
        .chunks_exact(d)
        .zip(dy.chunks_exact(d))
        .zip(dx.chunks_exact_mut(d))
        .zip(norms)
    {
        // On the guard branch the denominator is a constant.
        let dot = if n > L2_EPS {
            yr.iter().zip(dyr).map(|(a, b)| a * b).sum::<f64>()
        } else {
            0.0
        };
        for k in 0..d {
            dxr[k] = (dyr[k] - yr[k] * dot) / n;
        }
    }
    dx
}

/// Per-pair rotary frequencies `theta_base^(-2m/d)`.
pub fn rope_frequencies(d: usize, theta_base: f64) -> Vec<f64> {
    (0..d / 2)
        .map(|m| theta_base.powf(-2.0 * m as f64 / d as f64))
        .collect()
}

/// Rotates consecutive pairs of `v` by `sign * position * freq[m]`.
pub fn rotate_pairs(v: &mut [f64], position: f64, freqs: &[f64], sign: f64) {
    for (pair, &f) in v.chunks_exact_mut(2).zip(freqs) {
        let (s, c) = (sign * position * f).sin_cos();
        let (a, b) = (pair[0], pair[1]);
        pair[0] = a * c - b * s;
        pair[1] = a * s + b * c;
    }
}

/// Softmax of `tau * scores` over the first `valid` entries of `row`; the rest
/// are set to exactly zero.
pub fn masked_softmax_row(row: &mut [f64], valid: usize, tau: f64) {
    for x in row[..valid].iter_mut() {
        *x *= tau;
    }
    softmax_in_place(&mut row[..valid]);
    row[valid..].iter_mut().for_each(|x| *x = 0.0);
}

/// Backward of [`masked_softmax_row`]. Writes the score gradient into
/// `dscores` and returns the contribution to `d tau`.
pub fn masked_softmax_row_backward(
    probs: &[f64],
    scores: &[f64],
    dprobs: &[f64],
    valid: usize,
    tau: f64,
    dscores: &mut [f64],
) -> f64 {
    softmax_backward(&probs[..valid], &dprobs[..valid], &mut dscores[..valid]);
    let mut dtau = 0.0;
    for (g, s) in dscores[..valid].iter_mut().zip(&scores[..valid]) {
        dtau += *g * s;
        *g *= tau;
    }
    dscores[valid..].iter_mut().for_each(|x| *x = 0.0);
    dtau
}

/// RMSNorm over the last axis: `gain * x / sqrt(mean(x^2) + eps)`.
pub fn rmsnorm(x: &Tensor, gain: &Tensor, eps: f64) -> Result<Tensor> {
    let d = x.last_dim();
    if d == 0 || gain.len() != d {
        return Err(Error::config(format!(
            "rmsnorm gain has {} entries for width {d}",
            gain.len()
        )));
    }
    if !(eps >= 0.0) {
        return Err(Error::config("rmsnorm eps must be non-negative"));
    }
    x.check_finite("rmsnorm input")?;
    let (y, _) = rmsnorm_rows(x.data(), d, gain.data(), eps);
    let out = Tensor::new(x.shape().to_vec(), y)?;
    out.check_finite("rmsnorm output")?;
    Ok(out)
}

/// Unit-normalizes the last axis; zero vectors stay zero.
pub fn l2_normalize(v: &Tensor) -> Tensor {
    let d = v.last_dim().max(1);
    let (y, _) = l2_normalize_rows(v.data(), d);
    Tensor::new(v.shape().to_vec(), y).expect("shape preserved")
}

/// Rotates every last-axis vector of `v` as a token at `position`.
pub fn rotary_rotate(v: &Tensor, position: usize, theta_base: f64) -> Result<Tensor> {
    let d = v.last_dim();
    if !d.is_multiple_of(2) {
        return Err(Error::config(format!("rotary width {d} is odd")));
    }
    let freqs = rope_frequencies(d, theta_base);
    let mut out = v.clone();
    for row in out.data_mut().chunks_exact_mut(d) {
        rotate_pairs(row, position as f64, &freqs, 1.0);
    }
    Ok(out)
}

/// Row softmax of `tau * scores` with an optional lower-triangular mask.
pub fn scaled_masked_softmax(scores: &Tensor, tau: f64, causal: bool) -> Result<Tensor> {
    let shape = scores.shape();
    if shape.len() != 2 || shape[0] != shape[1] {
        return Err(Error::input(format!("scores must be square, got {shape:?}")));
    }
    if !(tau > 0.0) {
        return Err(Error::config("softmax temperature must be positive"));
    }
    scores.check_finite("attention scores")?;
    let n = shape[0];
    let mut out = scores.clone();
    for (i, row) in out.data_mut().chunks_exact_mut(n).enumerate() {
        let valid = if causal { i + 1 } else { n };
        masked_softmax_row(row, valid, tau);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f64]) -> Tensor {
        Tensor::vector(v.to_vec())
    }

    #[test]
    fn rmsnorm_examples() {
        let y = rmsnorm(&t(&[0.0, 0.0]), &t(&[1.0, 1.0]), 1e-6).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0]);

        let y = rmsnorm(&t(&[3.0, 4.0]), &t(&[1.0, 1.0]), 0.0).unwrap();
        let r = 12.5f64.sqrt();
        assert!((y.data()[0] - 3.0 / r).abs() < 1e-15);
        assert!((y.data()[1] - 4.0 / r).abs() < 1e-15);
        assert!((y.data()[0] - 0.8485).abs() < 1e-4);
        assert!((y.data()[1] - 1.1314).abs() < 1e-4);

        for c in [-2.5, 0.3, 7.0] {
            let y = rmsnorm(&t(&[c; 5]), &t(&[1.0; 5]), 0.0).unwrap();
            for v in y.data() {
                assert!((v - c.signum()).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn rmsnorm_rejects_non_finite() {
        assert!(rmsnorm(&t(&[f64::INFINITY, 1.0]), &t(&[1.0, 1.0]), 1e-6).is_err());
    }

    #[test]
    fn l2_examples() {
        assert_eq!(l2_normalize(&t(&[3.0, 4.0])).data(), &[0.6, 0.8]);
        let u = [0.6, 0.8];
        let y = l2_normalize(&t(&u));
        assert!((y.data()[0] - 0.6).abs() < 1e-15 && (y.data()[1] - 0.8).abs() < 1e-15);
        assert_eq!(l2_normalize(&t(&[0.0, 0.0])).data(), &[0.0, 0.0]);
    }

    #[test]
    fn rotary_examples() {
        let v = t(&[0.3, -1.2, 0.5, 2.0]);
        assert_eq!(rotary_rotate(&v, 0, 10000.0).unwrap(), v);
        assert!(rotary_rotate(&t(&[1.0, 2.0, 3.0]), 1, 10000.0).is_err());

        // d = 2 has a single frequency of 1, so position 1 with an angle
        // of pi/2 needs a rotation of exactly pi/2 radians.
        let mut pair = [1.0, 0.0];
        rotate_pairs(&mut pair, std::f64::consts::FRAC_PI_2, &[1.0], 1.0);
        assert!(pair[0].abs() < 1e-15 && (pair[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_examples() {
        let one = Tensor::new(vec![1, 1], vec![4.2]).unwrap();
        assert_eq!(scaled_masked_softmax(&one, 1.0, true).unwrap().data(), &[1.0]);

        let s = Tensor::new(vec![2, 2], vec![0.7, 0.7, 0.0, 3f64.ln()]).unwrap();
        let p = scaled_masked_softmax(&s, 1.0, false).unwrap();
        assert!((p.data()[0] - 0.5).abs() < 1e-15);
        assert!((p.data()[2] - 0.25).abs() < 1e-15);
        assert!((p.data()[3] - 0.75).abs() < 1e-15);

        let p = scaled_masked_softmax(&s, 5.0, true).unwrap();
        assert_eq!(p.data()[1], 0.0);
        assert_eq!(p.data()[0], 1.0);
    }
}
