//! Analytic-vs-finite-difference gradient harness for the whole model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::graph::{loss_and_grad, TrainBatch};
use crate::backbone::{Model, ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::numerics::{compare_gradients, finite_diff_gradient, GradCheckReport, Probe};
use crate::objectives::{stp_weights, Stage};

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
pub const GRADCHECK_ABS_FLOOR: f64 = 1e-6;
pub const GRADCHECK_EPSILON: f64 = 1e-4;
/// Initialization scale for checks; larger than training init so every
/// family carries gradient well above the absolute floor.
pub const GRADCHECK_INIT_STD: f64 = 0.3;

/// Groups a parameter name into its family, e.g. `blocks.1.attn.wq` →
/// `main.attn.wq`, `stp.0.block.moe.w1` → `stp.moe.w1`.
pub fn param_family(name: &str) -> String {
    let parts: Vec<&str> = name.split('.').collect();
    match parts.as_slice() {
        ["blocks", _, rest @ ..] => format!("main.{}", rest.join(".")),
        ["stp", _, "block", rest @ ..] => format!("stp.{}", rest.join(".")),
        ["stp", _, rest @ ..] => format!("stp.{}", rest.join(".")),
        _ => name.to_string(),
    }
}

/// Random training windows mixing a sinusoid, a trend and a random walk.
pub fn random_windows(cfg: &ModelConfig, batch: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = (cfg.n_max + cfg.stp_blocks + 1) * cfg.patch_len;
    (0..batch)
        .map(|_| {
            let period = rng.random_range(3.0..12.0);
            let slope = rng.random_range(-0.2..0.2);
            let mut walk = 0.0;
            (0..len)
                .map(|t| {
                    walk += rng.random_range(-0.5..0.5);
                    (t as f64 * std::f64::consts::TAU / period).sin() + slope * t as f64 + walk
                })
                .collect()
        })
        .collect()
}

/// Compares `analytic` against central differences of the stage loss.
pub fn check_gradients(
    model: &Model,
    batch: &TrainBatch,
    weights: &[f64],
    alpha: f64,
    analytic: &ModelParams,
    probe: Probe,
) -> Result<Vec<GradCheckReport>> {
    let fd = finite_diff_gradient(
        |m: &Model| {
            loss_and_grad(m, batch, weights, alpha, None)
                .map(|e| e.total)
                .unwrap_or(f64::NAN)
        },
        model,
        GRADCHECK_EPSILON,
        probe,
    )?;
    Ok(compare_gradients(
        analytic,
        &fd,
        param_family,
        GRADCHECK_TOLERANCE,
        GRADCHECK_ABS_FLOOR,
    ))
}

/// Checks every parameter family of a freshly initialized model on a
/// seeded batch. Requires a tiny configuration.
pub fn gradient_check_suite(cfg: &ModelConfig, seed: u64) -> Result<Vec<GradCheckReport>> {
    if cfg.d_model > 16 || cfg.main_blocks > 2 || cfg.stp_blocks > 2 || cfg.experts > 4 || cfg.n_max > 4 {
        return Err(Error::config(
            "gradient checks need D<=16, L<=2, H<=2, E<=4, N<=4",
        ));
    }
    let model = Model::with_std(cfg.clone(), seed, GRADCHECK_INIT_STD)?;
    let windows = random_windows(cfg, 2, seed ^ 0x5eed);
    let batch = TrainBatch::from_windows(&windows, &model, cfg.n_max)?;
    let weights = stp_weights(Stage::Pretrain, cfg.stp_blocks);
    let mut grads = model.params.zeros_like();
    loss_and_grad(&model, &batch, &weights, cfg.alpha, Some(&mut grads))?;
    check_gradients(&model, &batch, &weights, cfg.alpha, &grads, Probe::All)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn families() {
        assert_eq!(param_family("blocks.1.attn.wq"), "main.attn.wq");
        assert_eq!(param_family("stp.0.block.moe.w1"), "stp.moe.w1");
        assert_eq!(param_family("stp.1.fusion"), "stp.fusion");
        assert_eq!(param_family("head.w"), "head.w");
    }
}
