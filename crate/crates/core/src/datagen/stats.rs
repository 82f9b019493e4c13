//! Dataset complexity statistics: ADF test statistic and spectral forecastability.

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{Error, Result};

/// Outcome of an ADF regression.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdfResult {
    /// t-statistic of the lagged-level coefficient; `-inf` when degenerate.
    pub statistic: f64,
    pub gamma: f64,
    pub lags: usize,
    pub nobs: usize,
    /// Singular design (e.g. a constant series).
    pub degenerate: bool,
    /// The level is almost entirely a deterministic linear trend, which the
    /// no-trend specification cannot separate from a unit root.
    pub trend_dominated: bool,
}

/// Default lag order `floor(12 (T/100)^(1/4))`.
pub fn schwert_lag(len: usize) -> usize {
    (12.0 * (len as f64 / 100.0).powf(0.25)).floor() as usize
}

/// Regression design for `dx_t = c + g x_{t-1} + sum_k phi_k dx_{t-k}`.
/// Returns the row-major `[nobs, 2 + lag]` matrix, the response and the width.
pub fn adf_design(series: &[f64], lag: usize) -> Result<(Vec<f64>, Vec<f64>, usize)> {
    let t = series.len();
    if t < lag + 10 {
        return Err(Error::input(format!(
            "ADF with {lag} lags needs at least {} points, got {t}",
            lag + 10
        )));
    }
    let dx: Vec<f64> = series.windows(2).map(|w| w[1] - w[0]).collect();
    let k = 2 + lag;
    let mut x = Vec::new();
    let mut y = Vec::new();
    // dx[i] = x_{i+1} - x_i
    for i in lag..dx.len() {
        y.push(dx[i]);
        x.push(1.0);
        x.push(series[i]);
        for j in 1..=lag {
            x.push(dx[i - j]);
        }
    }
    Ok((x, y, k))
}

fn cholesky(a: &mut [f64], k: usize) -> bool {
    for j in 0..k {
        let diag_scale = a[j * k + j].abs().max(f64::MIN_POSITIVE);
        let mut d = a[j * k + j];
        for p in 0..j {
            d -= a[j * k + p] * a[j * k + p];
        }
        if !(d > 1e-12 * diag_scale) {
            return false;
        }
        let d = d.sqrt();
        a[j * k + j] = d;
        for i in j + 1..k {
            let mut s = a[i * k + j];
            for p in 0..j {
                s -= a[i * k + p] * a[j * k + p];
            }
            a[i * k + j] = s / d;
        }
    }
    true
}

fn cholesky_solve(l: &[f64], k: usize, b: &mut [f64]) {
    for i in 0..k {
        let mut s = b[i];
        for p in 0..i {
            s -= l[i * k + p] * b[p];
        }
        b[i] = s / l[i * k + i];
    }
    for i in (0..k).rev() {
        let mut s = b[i];
        for p in i + 1..k {
            s -= l[p * k + i] * b[p];
        }
        b[i] = s / l[i * k + i];
    }
}

fn trend_r2(series: &[f64]) -> f64 {
    let n = series.len() as f64;
    let tm = (n - 1.0) / 2.0;
    let xm = series.iter().sum::<f64>() / n;
    let (mut sxy, mut stt, mut sxx) = (0.0, 0.0, 0.0);
    for (i, &v) in series.iter().enumerate() {
        let dt = i as f64 - tm;
        sxy += dt * (v - xm);
        stt += dt * dt;
        sxx += (v - xm) * (v - xm);
    }
    if sxx == 0.0 {
        return 0.0;
    }
    sxy * sxy / (stt * sxx)
}

/// ADF statistic with constant and no trend. `lag = None` uses the Schwert
/// rule, clamped so the regression keeps at least 10 points.
pub fn adf_statistic(series: &[f64], lag: Option<usize>) -> Result<AdfResult> {
    if series.iter().any(|v| !v.is_finite()) {
        return Err(Error::input("ADF input contains non-finite values"));
    }
    let lag = match lag {
        Some(l) => l,
        None => {
            if series.len() < 10 {
                return Err(Error::input("ADF needs at least 10 points"));
            }
            schwert_lag(series.len()).min(series.len() - 10)
        }
    };
    let (x, y, k) = adf_design(series, lag)?;
    let n = y.len();
    let trend_dominated = trend_r2(series) > 0.99;
    let degenerate = AdfResult {
        statistic: f64::NEG_INFINITY,
        gamma: 0.0,
        lags: lag,
        nobs: n,
        degenerate: true,
        trend_dominated,
    };
    if n <= k {
        return Ok(degenerate);
    }
    let mut xtx = vec![0.0; k * k];
    let mut xty = vec![0.0; k];
    for r in 0..n {
        let row = &x[r * k..(r + 1) * k];
        for i in 0..k {
            xty[i] += row[i] * y[r];
            for j in 0..=i {
                xtx[i * k + j] += row[i] * row[j];
            }
        }
    }
    for i in 0..k {
        for j in i + 1..k {
            xtx[i * k + j] = xtx[j * k + i];
        }
    }
    if !cholesky(&mut xtx, k) {
        return Ok(degenerate);
    }
    let mut beta = xty;
    cholesky_solve(&xtx, k, &mut beta);
    let mut rss = 0.0;
    let mut yss = 0.0;
    for r in 0..n {
        let row = &x[r * k..(r + 1) * k];
        let fit: f64 = row.iter().zip(&beta).map(|(a, b)| a * b).sum();
        rss += (y[r] - fit) * (y[r] - fit);
        yss += y[r] * y[r];
    }
    let gamma = beta[1];
    if rss <= 1e-24 * yss.max(f64::MIN_POSITIVE) {
        // exact fit: no residual noise to scale gamma by
        return Ok(AdfResult {
            statistic: 0.0,
            gamma,
            lags: lag,
            nobs: n,
            degenerate: false,
            trend_dominated: true,
        });
    }
    let s2 = rss / (n - k) as f64;
    let mut e1 = vec![0.0; k];
    e1[1] = 1.0;
    cholesky_solve(&xtx, k, &mut e1);
    let se = (s2 * e1[1]).sqrt();
    Ok(AdfResult {
        statistic: gamma / se,
        gamma,
        lags: lag,
        nobs: n,
        degenerate: false,
        trend_dominated,
    })
}

/// Periodogram power at bins `1..=floor(T/2)`.
pub fn periodogram(series: &[f64]) -> Vec<f64> {
    let t = series.len();
    let mut buf: Vec<Complex64> = series.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    FftPlanner::<f64>::new().plan_fft_forward(t).process(&mut buf);
    (1..=t / 2).map(|k| buf[k].norm_sqr()).collect()
}

/// `1 - H(p) / ln M` over the normalized periodogram (DC excluded).
pub fn forecastability(series: &[f64]) -> Result<f64> {
    if series.len() < 4 {
        return Err(Error::input(format!(
            "forecastability needs at least 4 points, got {}",
            series.len()
        )));
    }
    if series.iter().any(|v| !v.is_finite()) {
        return Err(Error::input("forecastability input contains non-finite values"));
    }
    let power = periodogram(series);
    let total: f64 = power.iter().sum();
    let energy: f64 = series.iter().map(|v| v * v).sum::<f64>() * series.len() as f64;
    if total == 0.0 || total <= 1e-20 * energy {
        return Ok(0.0);
    }
    let h: f64 = power
        .iter()
        .map(|&w| {
            let p = w / total;
            if p > 0.0 {
                -p * p.ln()
            } else {
                0.0
            }
        })
        .sum();
    let m = power.len() as f64;
    Ok((1.0 - h / m.ln()).clamp(0.0, 1.0))
}

/// A dataset's position on the (ADF, forecastability) plane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ComplexityPoint {
    pub adf: f64,
    pub forecastability: f64,
    /// Variates whose ADF regression was singular; they are left out of the
    /// ADF mean (weights renormalized) but still count for forecastability.
    pub degenerate_variates: usize,
}

/// Length-weighted ADF statistic and forecastability across variates.
pub fn dataset_complexity(variates: &[&[f64]]) -> Result<ComplexityPoint> {
    if variates.is_empty() {
        return Err(Error::input("dataset_complexity needs at least one variate"));
    }
    let total: f64 = variates.iter().map(|v| v.len() as f64).sum();
    let mut fc = 0.0;
    let mut adf = 0.0;
    let mut adf_weight = 0.0;
    let mut degenerate = 0;
    for v in variates {
        let w = v.len() as f64 / total;
        fc += w * forecastability(v)?;
        let a = adf_statistic(v, None)?;
        if a.degenerate {
            degenerate += 1;
        } else {
            adf += w * a.statistic;
            adf_weight += w;
        }
    }
    let adf = if adf_weight > 0.0 {
        adf / adf_weight
    } else {
        f64::NEG_INFINITY
    };
    Ok(ComplexityPoint {
        adf,
        forecastability: fc.clamp(0.0, 1.0),
        degenerate_variates: degenerate,
    })
}
