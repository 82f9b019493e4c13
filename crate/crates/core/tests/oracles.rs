//! Statistics and metrics checked against independent recomputations.

mod common;

use common::{adf_qr, forecastability_dft, noise, walk};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serialcast::datagen::{adf_statistic, dataset_complexity, forecastability, resample, Ratio};
use serialcast::inference::{eval_crps_wql, mase, ForecastDistribution};
use serialcast::numerics::Tensor;

#[test]
fn adf_matches_qr_ols() {
    for seed in 0..20 {
        let n = 60 + 23 * seed as usize;
        let base = if seed % 2 == 0 { noise(n, seed) } else { walk(n, seed) };
        let x: Vec<f64> = base.iter().enumerate().map(|(t, v)| v + (t as f64 * 0.3).sin()).collect();
        for lag in [0, 1, 4] {
            let got = adf_statistic(&x, Some(lag)).unwrap().statistic;
            let want = adf_qr(&x, lag);
            assert!((got - want).abs() <= 1e-8 * want.abs().max(1.0), "seed {seed} lag {lag}: {got} vs {want}");
        }
    }
}

#[test]
fn forecastability_matches_dft() {
    for seed in 0..10 {
        let x: Vec<f64> = noise(100 + seed as usize * 7, seed).iter().enumerate().map(|(t, v)| v + 2.0 * (t as f64 * 0.4).cos()).collect();
        let got = forecastability(&x).unwrap();
        assert!((got - forecastability_dft(&x)).abs() < 1e-9);
    }
}

#[test]
fn forecastability_extremes() {
    let t = 1024;
    for k in [1, 8, 100, 511] {
        let x: Vec<f64> = (0..t).map(|n| (2.0 * std::f64::consts::PI * (k * n) as f64 / t as f64).sin()).collect();
        let f = forecastability(&x).unwrap();
        assert!(f > 1.0 - 1e-6, "bin {k}: {f}");
    }
    for seed in 0..5 {
        let f = forecastability(&noise(t, seed)).unwrap();
        assert!((0.0..0.2).contains(&f), "{f}");
    }
}

#[test]
fn resample_period_eight_doubles() {
    let x: Vec<f64> = (0..256).map(|n| (2.0 * std::f64::consts::PI * n as f64 / 8.0).sin()).collect();
    let y = resample(&x, Ratio::new(2, 1).unwrap()).unwrap();
    assert_eq!(y.len(), 512);
    for (m, v) in y.iter().enumerate() {
        let want = (2.0 * std::f64::consts::PI * m as f64 / 16.0).sin();
        assert!((v - want).abs() < 1e-6);
    }
}

#[test]
fn resample_band_limited_sinusoid_any_factor() {
    let t = 240;
    let x: Vec<f64> = (0..t).map(|n| 1.5 + (2.0 * std::f64::consts::PI * 3.0 * n as f64 / t as f64 + 0.4).cos()).collect();
    for (num, den) in [(1, 2), (3, 2), (4, 1), (1, 3)] {
        let r = Ratio::new(num, den).unwrap();
        let y = resample(&x, r).unwrap();
        let m = y.len();
        for (i, v) in y.iter().enumerate() {
            let want = 1.5 + (2.0 * std::f64::consts::PI * 3.0 * i as f64 / m as f64 + 0.4).cos();
            assert!((v - want).abs() < 1e-9, "{r}: {v} vs {want}");
        }
    }
}

#[test]
fn complexity_is_length_weighted_mean() {
    let a = noise(300, 1);
    let b = walk(150, 2);
    let c: Vec<f64> = (0..200).map(|t| (t as f64 * 0.7).sin() + 0.1 * noise(200, 3)[t]).collect();
    let vars: Vec<&[f64]> = vec![&a, &b, &c];
    let got = dataset_complexity(&vars).unwrap();
    let total = 650.0;
    let adf: f64 = vars.iter().map(|v| v.len() as f64 / total * adf_statistic(v, None).unwrap().statistic).sum();
    let fc: f64 = vars.iter().map(|v| v.len() as f64 / total * forecastability(v).unwrap()).sum();
    assert!((got.adf - adf).abs() < 1e-12);
    assert!((got.forecastability - fc).abs() < 1e-12);
    assert_eq!(got.degenerate_variates, 0);
}

#[test]
fn crps_matches_double_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let levels = vec![0.1, 0.5, 0.9];
    let f = 12;
    let values: Vec<f64> = (0..levels.len() * f).map(|_| rng.random_range(-2.0..2.0)).collect();
    let actual: Vec<f64> = (0..f).map(|_| rng.random_range(-2.0..2.0)).collect();
    let dist = ForecastDistribution { levels: levels.clone(), values: Tensor::new(vec![levels.len(), f], values.clone()).unwrap(), passes: 1, block_invocations: 0 };
    let got = eval_crps_wql(&dist, &actual).unwrap();
    let denom: f64 = actual.iter().map(|a| a.abs()).sum();
    let mut want = 0.0;
    for (q, level) in levels.iter().enumerate() {
        let mut s = 0.0;
        for t in 0..f {
            let diff = actual[t] - values[q * f + t];
            s += if diff >= 0.0 { level * diff } else { (level - 1.0) * diff };
        }
        want += 2.0 * s / denom;
    }
    want /= levels.len() as f64;
    assert!((got - want).abs() < 1e-12);
}

#[test]
fn naive_forecast_on_random_walks_scores_one() {
    let h = 64;
    let mut scores = Vec::new();
    for seed in 0..200 {
        let x = walk(2048 + h, 1000 + seed);
        let (hist, future) = x.split_at(2048);
        // one-step naive over the horizon has the same error law as the scale
        let fc: Vec<f64> = (0..h).map(|i| x[2048 + i - 1]).collect();
        scores.push(mase(&fc, future, hist, 1).unwrap().value);
    }
    let mean = scores.iter().sum::<f64>() / scores.len() as f64;
    assert!((mean - 1.0).abs() < 0.1, "{mean}");
}
