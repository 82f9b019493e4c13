//! Canonical synthetic signals and their combinations.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// A univariate series with optional integer timestamps.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeriesSample {
    pub values: Vec<f64>,
    pub timestamps: Option<Vec<i64>>,
}

impl TimeSeriesSample {
    pub fn new(values: Vec<f64>) -> Self {
        TimeSeriesSample {
            values,
            timestamps: None,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// One canonical component evaluated at integer time `t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SignalKind {
    /// `intercept + slope * t`
    Linear { slope: f64, intercept: f64 },
    /// `amplitude * sin(2 pi t / period + phase)`
    Sinusoidal { amplitude: f64, period: f64, phase: f64 },
    /// `scale * exp(rate * t)`
    Exponential { scale: f64, rate: f64 },
    /// `scale * (t + 1)^exponent`
    Power { scale: f64, exponent: f64 },
    /// `amplitude` at `t == location`, else 0.
    Impulse { amplitude: f64, location: usize },
    /// `amplitude` for `t >= location`, else 0.
    Step { amplitude: f64, location: usize },
}

impl SignalKind {
    pub fn value(&self, t: usize) -> f64 {
        let tf = t as f64;
        match *self {
            SignalKind::Linear { slope, intercept } => intercept + slope * tf,
            SignalKind::Sinusoidal { amplitude, period, phase } => {
                amplitude * (std::f64::consts::TAU * tf / period + phase).sin()
            }
            SignalKind::Exponential { scale, rate } => scale * (rate * tf).exp(),
            SignalKind::Power { scale, exponent } => scale * (tf + 1.0).powf(exponent),
            SignalKind::Impulse { amplitude, location } => {
                if t == location {
                    amplitude
                } else {
                    0.0
                }
            }
            SignalKind::Step { amplitude, location } => {
                if t >= location {
                    amplitude
                } else {
                    0.0
                }
            }
        }
    }

    fn validate(&self) -> Result<()> {
        if let SignalKind::Sinusoidal { period, .. } = self {
            if !(*period > 0.0) {
                return Err(Error::input("sinusoid period must be positive"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Combine {
    #[default]
    Additive,
    Multiplicative,
}

/// Components combined pointwise, plus optional Gaussian noise.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalSpec {
    pub components: Vec<SignalKind>,
    pub combine: Combine,
    pub noise_sigma: f64,
    pub length: usize,
    pub seed: u64,
}

impl SignalSpec {
    pub fn single(kind: SignalKind, length: usize) -> Self {
        SignalSpec {
            components: vec![kind],
            combine: Combine::Additive,
            noise_sigma: 0.0,
            length,
            seed: 0,
        }
    }
}

/// Evaluates `spec`; deterministic given its seed.
pub fn gen_signal(spec: &SignalSpec) -> Result<TimeSeriesSample> {
    if spec.length == 0 {
        return Err(Error::input("signal length must be at least 1"));
    }
    if spec.components.is_empty() {
        return Err(Error::input("signal needs at least one component"));
    }
    if !(spec.noise_sigma >= 0.0) {
        return Err(Error::input("noise_sigma must be non-negative"));
    }
    for c in &spec.components {
        c.validate()?;
    }
    let mut values: Vec<f64> = (0..spec.length)
        .map(|t| {
            let mut it = spec.components.iter().map(|c| c.value(t));
            let first = it.next().unwrap_or(0.0);
            match spec.combine {
                Combine::Additive => it.fold(first, |a, b| a + b),
                Combine::Multiplicative => it.fold(first, |a, b| a * b),
            }
        })
        .collect();
    if spec.noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let normal = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::input(e.to_string()))?;
        for v in values.iter_mut() {
            *v += normal.sample(&mut rng);
        }
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::input("signal parameters produce non-finite values"));
    }
    Ok(TimeSeriesSample::new(values))
}

/// Derives an independent sub-seed (splitmix64 finalizer).
pub fn derive_seed(root: u64, index: u64) -> u64 {
    let mut z = root.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Random sinusoid-plus-trend series: one or two sinusoids with periods in
/// `[8, 48]`, a linear trend, a level offset and Gaussian noise at 10% of the
/// leading amplitude. Series `i` uses sub-seed `derive_seed(seed, i)`.
pub fn sinusoid_trend_corpus(count: usize, length: usize, seed: u64) -> Result<Vec<TimeSeriesSample>> {
    use rand::Rng;
    (0..count)
        .map(|i| {
            let sub = derive_seed(seed, i as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(sub);
            let amplitude = rng.random_range(0.5..2.0);
            let mut components = vec![
                SignalKind::Sinusoidal {
                    amplitude,
                    period: rng.random_range(8.0..48.0),
                    phase: rng.random_range(0.0..std::f64::consts::TAU),
                },
                SignalKind::Linear {
                    slope: rng.random_range(-0.01..0.01) * amplitude,
                    intercept: rng.random_range(-3.0..3.0),
                },
            ];
            if rng.random_bool(0.5) {
                components.push(SignalKind::Sinusoidal {
                    amplitude: amplitude * rng.random_range(0.1..0.5),
                    period: rng.random_range(8.0..48.0),
                    phase: rng.random_range(0.0..std::f64::consts::TAU),
                });
            }
            gen_signal(&SignalSpec {
                components,
                combine: Combine::Additive,
                noise_sigma: 0.1 * amplitude,
                length,
                seed: derive_seed(sub, 0),
            })
        })
        .collect()
}
