//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub fn noise(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = Normal::new(0.0, 1.0).unwrap();
    (0..n).map(|_| d.sample(&mut rng)).collect()
}

pub fn walk(n: usize, seed: u64) -> Vec<f64> {
    let mut acc = 0.0;
    noise(n, seed)
        .into_iter()
        .map(|e| {
            acc += e;
            acc
        })
        .collect()
}

/// OLS t-statistic of the lagged level, computed with a QR factorization.
pub fn adf_qr(x: &[f64], lag: usize) -> f64 {
    let dx: Vec<f64> = x.windows(2).map(|w| w[1] - w[0]).collect();
    let rows: Vec<usize> = (lag..dx.len()).collect();
    let k = 2 + lag;
    let a = DMatrix::from_fn(rows.len(), k, |r, c| {
        let i = rows[r];
        match c {
            0 => 1.0,
            1 => x[i],
            j => dx[i - (j - 1)],
        }
    });
    let y = DVector::from_iterator(rows.len(), rows.iter().map(|&i| dx[i]));
    let qr = a.clone().qr();
    let r = qr.r();
    let qty = qr.q().transpose() * &y;
    let beta = r.solve_upper_triangular(&qty).unwrap();
    let resid = &y - &a * &beta;
    let s2 = resid.norm_squared() / (rows.len() - k) as f64;
    let rinv = r.try_inverse().unwrap();
    let cov = &rinv * rinv.transpose() * s2;
    beta[1] / cov[(1, 1)].sqrt()
}

/// Direct O(T^2) DFT version of the spectral-entropy score.
pub fn forecastability_dft(x: &[f64]) -> f64 {
    let t = x.len();
    let power: Vec<f64> = (1..=t / 2)
        .map(|k| {
            let (mut re, mut im) = (0.0, 0.0);
            for (n, v) in x.iter().enumerate() {
                let w = -2.0 * std::f64::consts::PI * (k * n) as f64 / t as f64;
                re += v * w.cos();
                im += v * w.sin();
            }
            re * re + im * im
        })
        .collect();
    let total: f64 = power.iter().sum();
    let h: f64 = power
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|p| {
            let q = p / total;
            -q * q.ln()
        })
        .sum();
    1.0 - h / (power.len() as f64).ln()
}
