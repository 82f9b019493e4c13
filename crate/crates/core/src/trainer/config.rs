//! Training hyperparameters as plain `key=value` text.

use std::fmt::Write;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::objectives::Stage;

/// Settings for one training stage. The auxiliary-loss weight lives on the
/// model configuration (`alpha`).
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub stage: Stage,
    pub steps: u64,
    pub batch_size: usize,
    /// Context patches per training window; `None` uses the model's `n_max`.
    pub train_context: Option<usize>,
    /// `None` means 3% of `steps` (at least one).
    pub warmup_steps: Option<u64>,
    pub peak_lr: f64,
    /// Final learning rate as a fraction of the peak.
    pub lr_floor: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub seed: u64,
    /// Post-training mixture over (post-train corpus, pre-train corpus).
    pub mixture_weights: Vec<f64>,
    /// Raises the model's `n_max` before post-training.
    pub extend_n_max: Option<usize>,
    /// Positional interpolation on context extension instead of direct extension.
    pub rope_interpolation: bool,
    pub flip_prob: f64,
    pub resample_prob: f64,
    pub checkpoint_every: u64,
    pub log_every: u64,
    pub queue_capacity: usize,
    pub rotate_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stage: Stage::Pretrain,
            steps: 1000,
            batch_size: 16,
            train_context: None,
            warmup_steps: None,
            peak_lr: 1e-3,
            lr_floor: 0.1,
            weight_decay: 0.1,
            grad_clip: 1.0,
            seed: 0,
            mixture_weights: vec![0.5, 0.5],
            extend_n_max: None,
            rope_interpolation: false,
            flip_prob: 0.5,
            resample_prob: 0.3,
            checkpoint_every: 0,
            log_every: 100,
            queue_capacity: 4,
            rotate_every: 256,
        }
    }
}

fn opt<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "auto".to_string(), T::to_string)
}

impl TrainConfig {
    pub const KEYS: [&'static str; 19] = [
        "stage", "steps", "batch_size", "train_context", "warmup_steps", "peak_lr", "lr_floor",
        "weight_decay", "grad_clip", "seed", "mixture_weights", "extend_n_max", "rope_interpolation",
        "flip_prob", "resample_prob", "checkpoint_every", "log_every", "queue_capacity", "rotate_every",
    ];

    pub fn for_stage(stage: Stage) -> Self {
        TrainConfig {
            stage,
            ..Default::default()
        }
    }

    pub fn warmup(&self) -> u64 {
        self.warmup_steps
            .unwrap_or_else(|| ((self.steps as f64 * 0.03).ceil() as u64).max(1))
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::config(m.to_string()));
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1");
        }
        if !(self.peak_lr > 0.0) {
            return fail("peak_lr must be positive");
        }
        if !(0.0..=1.0).contains(&self.lr_floor) {
            return fail("lr_floor must be in [0, 1]");
        }
        if !(self.weight_decay >= 0.0) || !(self.grad_clip > 0.0) {
            return fail("weight_decay >= 0 and grad_clip > 0 required");
        }
        if !(0.0..=1.0).contains(&self.flip_prob) || !(0.0..=1.0).contains(&self.resample_prob) {
            return fail("augmentation probabilities must be in [0, 1]");
        }
        if self.mixture_weights.iter().any(|w| !(*w >= 0.0 && w.is_finite()))
            || self.mixture_weights.iter().all(|w| *w == 0.0)
        {
            return fail("mixture_weights must be non-negative and not all zero");
        }
        if self.queue_capacity == 0 {
            return fail("queue_capacity must be at least 1");
        }
        if self.train_context == Some(0) {
            return fail("train_context must be at least 1");
        }
        Ok(())
    }

    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let w: Vec<String> = self.mixture_weights.iter().map(|w| w.to_string()).collect();
        vec![
            ("stage", self.stage.as_str().to_string()),
            ("steps", self.steps.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("train_context", opt(&self.train_context)),
            ("warmup_steps", opt(&self.warmup_steps)),
            ("peak_lr", self.peak_lr.to_string()),
            ("lr_floor", self.lr_floor.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("grad_clip", self.grad_clip.to_string()),
            ("seed", self.seed.to_string()),
            ("mixture_weights", w.join(",")),
            ("extend_n_max", opt(&self.extend_n_max)),
            ("rope_interpolation", self.rope_interpolation.to_string()),
            ("flip_prob", self.flip_prob.to_string()),
            ("resample_prob", self.resample_prob.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("log_every", self.log_every.to_string()),
            ("queue_capacity", self.queue_capacity.to_string()),
            ("rotate_every", self.rotate_every.to_string()),
        ]
    }

    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    /// Applies one setting; `Ok(false)` for keys that are not training keys.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.trim()
                .parse()
                .map_err(|_| Error::config(format!("bad value '{v}' for {key}")))
        }
        fn auto<T: FromStr>(key: &str, v: &str) -> Result<Option<T>> {
            if v.trim() == "auto" {
                Ok(None)
            } else {
                num(key, v).map(Some)
            }
        }
        match key {
            "stage" => self.stage = value.trim().parse()?,
            "steps" => self.steps = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "train_context" => self.train_context = auto(key, value)?,
            "warmup_steps" => self.warmup_steps = auto(key, value)?,
            "peak_lr" => self.peak_lr = num(key, value)?,
            "lr_floor" => self.lr_floor = num(key, value)?,
            "weight_decay" => self.weight_decay = num(key, value)?,
            "grad_clip" => self.grad_clip = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "mixture_weights" => {
                self.mixture_weights = value.split(',').map(|w| num(key, w)).collect::<Result<_>>()?;
            }
            "extend_n_max" => self.extend_n_max = auto(key, value)?,
            "rope_interpolation" => self.rope_interpolation = num(key, value)?,
            "flip_prob" => self.flip_prob = num(key, value)?,
            "resample_prob" => self.resample_prob = num(key, value)?,
            "checkpoint_every" => self.checkpoint_every = num(key, value)?,
            "log_every" => self.log_every = num(key, value)?,
            "queue_capacity" => self.queue_capacity = num(key, value)?,
            "rotate_every" => self.rotate_every = num(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Defaults overridden by the keys present in `text`.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("expected key=value, got '{line}'")))?;
            if !cfg.set(k.trim(), v)? {
                return Err(Error::config(format!("unknown training key '{}'", k.trim())));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}
