//! AdamW, the learning-rate schedule and global-norm clipping.

use crate::backbone::ModelParams;
use crate::numerics::{ParamSet, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.1,
        }
    }
}

/// First and second moments, one tensor per parameter in visiting order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        let zeros: Vec<Tensor> = params.params().iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        AdamState {
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// Matrices are decayed; norm gains, biases and temperatures (all rank 1)
/// are not.
pub fn decays(t: &Tensor) -> bool {
    t.shape().len() >= 2
}

/// One AdamW update with decoupled weight decay.
pub fn adamw_update(params: &mut ModelParams, grads: &ModelParams, state: &mut AdamState, lr: f64, cfg: &AdamWConfig) {
    state.t += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.t as i32);
    let grads = grads.params();
    for (i, (_, p)) in params.params_mut().into_iter().enumerate() {
        let g = grads[i].1.data();
        let decay = if decays(p) { cfg.weight_decay } else { 0.0 };
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (k, w) in p.data_mut().iter_mut().enumerate() {
            m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g[k];
            v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g[k] * g[k];
            let step = (m[k] / bc1) / ((v[k] / bc2).sqrt() + cfg.eps) + decay * *w;
            *w -= lr * step;
        }
    }
}

/// Scales `grads` so their joint l2 norm is at most `max_norm`; returns the
/// norm before clipping. `max_norm = inf` leaves them untouched.
pub fn clip_global_norm(grads: &mut ModelParams, max_norm: f64) -> f64 {
    let norm = grads.params().iter().map(|(_, t)| t.sum_sq()).sum::<f64>().sqrt();
    if norm.is_finite() && norm > max_norm {
        let s = max_norm / norm;
        for (_, t) in grads.params_mut() {
            t.data_mut().iter_mut().for_each(|g| *g *= s);
        }
    }
    norm
}

/// Linear warmup then cosine decay to `floor_frac * peak`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub peak: f64,
    pub warmup: u64,
    pub total: u64,
    pub floor_frac: f64,
}

impl LrSchedule {
    pub fn at(&self, step: u64) -> f64 {
        if step < self.warmup {
            return self.peak * (step + 1) as f64 / self.warmup as f64;
        }
        let span = self.total.saturating_sub(self.warmup).max(1) as f64;
        let progress = ((step - self.warmup) as f64 / span).min(1.0);
        let floor = self.floor_frac * self.peak;
        floor + (self.peak - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::ModelConfig;

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let cfg = ModelConfig::tiny();
        let mut p = ModelParams::init(&cfg, 1, 0.02);
        let before = p.clone();
        let g = p.zeros_like();
        let mut st = AdamState::new(&p);
        let opt = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        for _ in 0..3 {
            adamw_update(&mut p, &g, &mut st, 1e-2, &opt);
        }
        assert_eq!(p, before);
    }

    #[test]
    fn zero_lr_is_a_no_op() {
        let cfg = ModelConfig::tiny();
        let mut p = ModelParams::init(&cfg, 1, 0.02);
        let before = p.clone();
        let mut g = p.clone();
        for (_, t) in g.params_mut() {
            t.fill(0.5);
        }
        let mut st = AdamState::new(&p);
        adamw_update(&mut p, &g, &mut st, 0.0, &AdamWConfig::default());
        assert_eq!(p, before);
    }

    #[test]
    fn clipping_never_increases_norm() {
        let cfg = ModelConfig::tiny();
        let mut g = ModelParams::init(&cfg, 2, 1.0);
        let untouched = g.clone();
        let n0 = clip_global_norm(&mut g, f64::INFINITY);
        assert_eq!(g, untouched);
        let n1 = clip_global_norm(&mut g, n0 / 4.0);
        assert_eq!(n0, n1);
        let after = g.params().iter().map(|(_, t)| t.sum_sq()).sum::<f64>().sqrt();
        assert!((after - n0 / 4.0).abs() < 1e-9 * n0);
    }

    #[test]
    fn schedule_shape() {
        let s = LrSchedule {
            peak: 1.0,
            warmup: 10,
            total: 110,
            floor_frac: 0.1,
        };
        assert!((s.at(0) - 0.1).abs() < 1e-12);
        assert!((s.at(9) - 1.0).abs() < 1e-12);
        assert!((s.at(10) - 1.0).abs() < 1e-12);
        assert!((s.at(60) - 0.55).abs() < 1e-12);
        assert!((s.at(110) - 0.1).abs() < 1e-12);
        assert!((s.at(500) - 0.1).abs() < 1e-12);
    }
}
