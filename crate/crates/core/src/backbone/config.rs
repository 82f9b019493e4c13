use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{Error, Result};

/// How a TimeSTP block chooses the initial embeddings it fuses with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum StpVariant {
    /// Token `i` at every depth fuses with the initial embedding of token `i`.
    #[default]
    Serial,
    /// Token `i` at depth `j` fuses with the embedding of input token `i + j`,
    /// which lies in the future for the last tokens. Ablation only.
    ShiftToken,
}

impl FromStr for StpVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "serial" => Ok(StpVariant::Serial),
            "shift_token" | "shift-token" => Ok(StpVariant::ShiftToken),
            other => Err(Error::config(format!("unknown stp_variant '{other}'"))),
        }
    }
}

impl StpVariant {
    pub fn as_str(&self) -> &'static str {
        match self {
            StpVariant::Serial => "serial",
            StpVariant::ShiftToken => "shift_token",
        }
    }
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub patch_len: usize,
    /// Maximum number of input patches accepted by the attention layers.
    pub n_max: usize,
    pub main_blocks: usize,
    pub stp_blocks: usize,
    pub experts: usize,
    pub top_k: usize,
    pub n_heads: usize,
    /// Hidden width of each expert feed-forward network.
    pub ffn_hidden: usize,
    pub quantiles: Vec<f64>,
    pub theta_base: f64,
    /// Multiplier on RoPE positions; 1.0 is direct extension, `old/new` is
    /// positional interpolation.
    pub rope_scale: f64,
    pub norm_eps: f64,
    pub alpha: f64,
    pub stp_variant: StpVariant,
}

pub fn default_quantiles() -> Vec<f64> {
    (1..=9).map(|k| k as f64 / 10.0).collect()
}

impl ModelConfig {
    /// Scale of the released model: `D=1024, P=16, N=180, L=24, H=16, E=32, K=2`.
    pub fn released() -> Self {
        Self::with_dims(1024, 16, 180, 24, 16, 32, 2)
    }

    /// Desk-scale model used for the toy training runs.
    pub fn desk() -> Self {
        Self::with_dims(64, 8, 32, 4, 4, 8, 2)
    }

    /// Smallest configuration, used for gradient checks.
    pub fn tiny() -> Self {
        let mut c = Self::with_dims(16, 4, 4, 2, 2, 4, 2);
        c.quantiles = vec![0.1, 0.5, 0.9];
        c
    }

    pub fn with_dims(
        d_model: usize,
        patch_len: usize,
        n_max: usize,
        main_blocks: usize,
        stp_blocks: usize,
        experts: usize,
        top_k: usize,
    ) -> Self {
        ModelConfig {
            d_model,
            patch_len,
            n_max,
            main_blocks,
            stp_blocks,
            experts,
            top_k,
            n_heads: (d_model / 64).max(1),
            ffn_hidden: 2 * d_model,
            quantiles: default_quantiles(),
            theta_base: 10000.0,
            rope_scale: 1.0,
            norm_eps: 1e-6,
            alpha: 0.01,
            stp_variant: StpVariant::Serial,
        }
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn n_quantiles(&self) -> usize {
        self.quantiles.len()
    }

    /// Number of steps covered by one full-depth forward pass, `(H + 1) P`.
    pub fn native_horizon(&self) -> usize {
        (self.stp_blocks + 1) * self.patch_len
    }

    pub fn max_context(&self) -> usize {
        self.n_max * self.patch_len
    }

    /// Index of the quantile level closest to the median.
    pub fn median_index(&self) -> usize {
        self.quantiles
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - 0.5).abs().total_cmp(&(b.1 - 0.5).abs()))
            .map(|(i, _)| i)
            .unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::config(m));
        if self.d_model == 0 || self.patch_len == 0 || self.n_max == 0 {
            return fail("d_model, patch_len and n_max must be positive".into());
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return fail(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if !self.d_head().is_multiple_of(2) {
            return fail(format!("head width {} must be even for rotary embedding", self.d_head()));
        }
        if self.top_k == 0 || self.top_k > self.experts {
            return fail(format!("top_k {} must be in 1..={}", self.top_k, self.experts));
        }
        if self.ffn_hidden == 0 {
            return fail("ffn_hidden must be positive".into());
        }
        if self.quantiles.is_empty()
            || self.quantiles.iter().any(|&q| !(q > 0.0 && q < 1.0))
            || self.quantiles.windows(2).any(|w| w[0] >= w[1])
        {
            return fail("quantiles must be strictly increasing levels in (0, 1)".into());
        }
        if !(self.theta_base > 1.0) || !(self.rope_scale > 0.0) || !(self.norm_eps >= 0.0) || !(self.alpha >= 0.0) {
            return fail("theta_base > 1, rope_scale > 0, norm_eps >= 0 and alpha >= 0 required".into());
        }
        Ok(())
    }

    /// Serializes as `key=value` lines in a fixed key order.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let q: Vec<String> = self.quantiles.iter().map(|q| format!("{q}")).collect();
        vec![
            ("d_model", self.d_model.to_string()),
            ("patch_len", self.patch_len.to_string()),
            ("n_max", self.n_max.to_string()),
            ("main_blocks", self.main_blocks.to_string()),
            ("stp_blocks", self.stp_blocks.to_string()),
            ("experts", self.experts.to_string()),
            ("top_k", self.top_k.to_string()),
            ("n_heads", self.n_heads.to_string()),
            ("ffn_hidden", self.ffn_hidden.to_string()),
            ("quantiles", q.join(",")),
            ("theta_base", format!("{}", self.theta_base)),
            ("rope_scale", format!("{}", self.rope_scale)),
            ("norm_eps", format!("{}", self.norm_eps)),
            ("alpha", format!("{}", self.alpha)),
            ("stp_variant", self.stp_variant.as_str().to_string()),
        ]
    }

    pub const KEYS: [&'static str; 15] = [
        "d_model", "patch_len", "n_max", "main_blocks", "stp_blocks", "experts", "top_k", "n_heads",
        "ffn_hidden", "quantiles", "theta_base", "rope_scale", "norm_eps", "alpha", "stp_variant",
    ];

    /// Applies one `key=value` setting. Returns `Ok(false)` for keys that do
    /// not belong to the model configuration.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.trim()
                .parse()
                .map_err(|_| Error::config(format!("bad value '{v}' for {key}")))
        }
        match key {
            "d_model" => self.d_model = num(key, value)?,
            "patch_len" => self.patch_len = num(key, value)?,
            "n_max" => self.n_max = num(key, value)?,
            "main_blocks" => self.main_blocks = num(key, value)?,
            "stp_blocks" => self.stp_blocks = num(key, value)?,
            "experts" => self.experts = num(key, value)?,
            "top_k" => self.top_k = num(key, value)?,
            "n_heads" => self.n_heads = num(key, value)?,
            "ffn_hidden" => self.ffn_hidden = num(key, value)?,
            "quantiles" => {
                self.quantiles = value
                    .split(',')
                    .map(|q| num::<f64>(key, q))
                    .collect::<Result<_>>()?;
            }
            "theta_base" => self.theta_base = num(key, value)?,
            "rope_scale" => self.rope_scale = num(key, value)?,
            "norm_eps" => self.norm_eps = num(key, value)?,
            "alpha" => self.alpha = num(key, value)?,
            "stp_variant" => self.stp_variant = value.trim().parse()?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Parses the output of [`ModelConfig::to_kv`]; every key is required.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = ModelConfig::tiny();
        let mut seen = Vec::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("expected key=value, got '{line}'")))?;
            if !cfg.set(k.trim(), v)? {
                return Err(Error::config(format!("unknown model key '{}'", k.trim())));
            }
            seen.push(k.trim().to_string());
        }
        if let Some(missing) = Self::KEYS.iter().find(|k| !seen.iter().any(|s| s == *k)) {
            return Err(Error::config(format!("model key '{missing}' missing")));
        }
        cfg.validate()?;
        Ok(cfg)
    }
}
