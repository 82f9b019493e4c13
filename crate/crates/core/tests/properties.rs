use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serialcast::backbone::{model_forward, Model, ModelConfig};
use serialcast::datagen::{forecastability, resample, value_flip, Ratio};
use serialcast::dataloader::WindowSample;
use serialcast::inference::{forecast, ForecastOptions};
use serialcast::objectives::pinball;
use serialcast::tokenizer::{renormalize, NormStats, PatchBatch};
use serialcast::trainer::extend_context;

fn small() -> ModelConfig {
    ModelConfig::with_dims(32, 8, 16, 2, 3, 4, 2)
}

fn random_series(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    let level = rng.random_range(-5.0..5.0);
    let amp = rng.random_range(0.5..3.0);
    let period = rng.random_range(5.0..40.0);
    (0..len)
        .map(|t| level + amp * (t as f64 * std::f64::consts::TAU / period).sin() + rng.random_range(-0.3..0.3))
        .collect()
}

fn assert_causal(model: &Model, n: usize, seed: u64) {
    let p = model.config.patch_len;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base: Vec<f64> = (0..n * p).map(|_| rng.random_range(-2.0..2.0)).collect();
    let stats = vec![NormStats { mu: 0.0, sigma: 1.0 }];
    let depth = model.config.stp_blocks;
    let reference = model_forward(&PatchBatch::from_normalized(std::slice::from_ref(&base), stats.clone(), p).unwrap(), model, depth).unwrap();
    for i in [0, 1, n / 2, n - 1] {
        let mut x = base.clone();
        for v in &mut x[i * p..(i + 1) * p] {
            *v += 0.75;
        }
        let trace = model_forward(&PatchBatch::from_normalized(&[x], stats.clone(), p).unwrap(), model, depth).unwrap();
        let d = model.config.d_model;
        for (a, b) in reference.embeddings.iter().zip(&trace.embeddings) {
            assert_eq!(a.data()[..i * d], b.data()[..i * d], "token before {i} changed");
            assert_ne!(a.data()[i * d..], b.data()[i * d..], "perturbation at {i} had no effect");
        }
    }
}

#[test]
fn causal_at_standard_and_extended_context() {
    let model = Model::new(small(), 3).unwrap();
    assert_causal(&model, model.config.n_max, 1);
    let long = extend_context(&model, 2 * model.config.n_max, true).unwrap();
    assert_causal(&long, long.config.n_max, 2);
    let plain = extend_context(&model, 3 * model.config.n_max, false).unwrap();
    assert_causal(&plain, plain.config.n_max, 3);
}

#[test]
fn forecasts_are_affine_equivariant() {
    let model = Model::new(small(), 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let opts = ForecastOptions::default();
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let len = rng.random_range(20..200);
        let x = random_series(&mut rng, len);
        let a = 10f64.powf(rng.random_range(-2.0..2.0));
        let b = rng.random_range(-100.0..100.0);
        let y: Vec<f64> = x.iter().map(|v| a * v + b).collect();
        let horizon = rng.random_range(1..60);
        let fx = forecast(&model, &x, horizon, opts).unwrap();
        let fy = forecast(&model, &y, horizon, opts).unwrap();
        for (u, v) in fx.values.data().iter().zip(fy.values.data()) {
            let want = a * u + b;
            let rel = (v - want).abs() / want.abs().max(v.abs());
            worst = worst.max(rel);
        }
    }
    assert!(worst < 1e-6, "{worst}");
}

#[test]
fn shorter_horizons_are_prefixes() {
    let model = Model::new(small(), 9).unwrap();
    let p = model.config.patch_len;
    let full_h = (model.config.stp_blocks + 1) * p;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for len in [30, 128, 300] {
        let x = random_series(&mut rng, len);
        let full = forecast(&model, &x, full_h, ForecastOptions::default()).unwrap();
        for k in 1..=model.config.stp_blocks + 1 {
            let part = forecast(&model, &x, k * p, ForecastOptions::default()).unwrap();
            for q in 0..part.levels.len() {
                assert_eq!(part.level(q), &full.level(q)[..k * p]);
            }
        }
    }
}

#[test]
fn forecastability_falls_with_noise() {
    let mut means = Vec::new();
    for sigma in [0.0, 0.3, 1.0, 3.0] {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut total = 0.0;
        for _ in 0..10 {
            let x: Vec<f64> = (0..512)
                .map(|t| (t as f64 * std::f64::consts::TAU / 16.0).sin() + sigma * rng.random_range(-1.7..1.7))
                .collect();
            total += forecastability(&x).unwrap();
        }
        means.push(total / 10.0);
    }
    assert!(means.windows(2).all(|w| w[0] > w[1]), "{means:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn forecastability_in_unit_interval(x in prop::collection::vec(-1e6f64..1e6, 4..300)) {
        let f = forecastability(&x).unwrap();
        prop_assert!((0.0..=1.0).contains(&f));
    }

    #[test]
    fn flip_is_an_involution(input in prop::collection::vec(-1e3f64..1e3, 1..50), targets in prop::collection::vec(-1e3f64..1e3, 0..20)) {
        let s = WindowSample { input, targets, source: 0, series_id: 1, start: 2 };
        prop_assert_eq!(value_flip(&value_flip(&s)), s);
    }

    #[test]
    fn resample_length_and_mean(x in prop::collection::vec(-10f64..10.0, 8..200), pick in 0usize..4) {
        let r = [Ratio::new(1, 2).unwrap(), Ratio::new(2, 1).unwrap(), Ratio::new(3, 2).unwrap(), Ratio::new(4, 1).unwrap()][pick];
        let y = resample(&x, r).unwrap();
        prop_assert_eq!(y.len(), r.apply_len(x.len()));
        let mx = x.iter().sum::<f64>() / x.len() as f64;
        let my = y.iter().sum::<f64>() / y.len() as f64;
        prop_assert!((mx - my).abs() < 1e-9);
    }

    #[test]
    fn renormalized_windows_are_standard(x in prop::collection::vec(-1e4f64..1e4, 2..200)) {
        let (z, s) = renormalize(&x).unwrap();
        let m = z.iter().sum::<f64>() / z.len() as f64;
        prop_assert!(m.abs() < 1e-9);
        if s.sigma > 1e-6 {
            let v = z.iter().map(|a| a * a).sum::<f64>() / z.len() as f64;
            prop_assert!((v - 1.0).abs() < 1e-9);
        }
        for (a, b) in z.iter().zip(&x) {
            prop_assert!((s.denormalize(*a) - b).abs() <= 1e-9 * b.abs().max(1.0));
        }
    }

    #[test]
    fn pinball_is_nonnegative_and_zero_at_target(x in -1e3f64..1e3, xhat in -1e3f64..1e3, q in 0.01f64..0.99) {
        prop_assert!(pinball(x, xhat, q) >= 0.0);
        prop_assert_eq!(pinball(x, x, q), 0.0);
    }

    #[test]
    fn sorted_quantiles_never_cross(seed in 0u64..1000, horizon in 1usize..40) {
        let model = Model::new(ModelConfig::tiny(), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_series(&mut rng, 30);
        let f = forecast(&model, &x, horizon, ForecastOptions { sort_quantiles: true }).unwrap();
        for t in 0..horizon {
            for q in 1..f.levels.len() {
                prop_assert!(f.level(q - 1)[t] <= f.level(q)[t]);
            }
        }
    }
}
