//! Serial-versus-rolling compute benchmark.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use super::forecast::{forecast, forecast_rolling_ntp, ForecastOptions};
use super::metrics::median;
use crate::backbone::Model;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub horizon: usize,
    pub serial_blocks: usize,
    pub rolling_blocks: usize,
    pub serial_passes: usize,
    pub rolling_passes: usize,
    pub serial_ms_p50: f64,
    pub rolling_ms_p50: f64,
}

impl BenchRow {
    pub fn block_ratio(&self) -> f64 {
        self.rolling_blocks as f64 / self.serial_blocks as f64
    }

    pub fn wall_ratio(&self) -> f64 {
        self.rolling_ms_p50 / self.serial_ms_p50
    }
}

/// Times both decoding modes on a seeded full-context input, `reps` times per
/// horizon, and records the exact block counts.
pub fn bench_inference(model: &Model, horizons: &[usize], reps: usize, seed: u64) -> Result<Vec<BenchRow>> {
    if reps == 0 {
        return Err(Error::input("benchmark needs at least one repetition"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = 0.0;
    let input: Vec<f64> = (0..model.config.max_context())
        .map(|_| {
            let e: f64 = StandardNormal.sample(&mut rng);
            acc += e;
            acc
        })
        .collect();
    let opts = ForecastOptions::default();
    let mut rows = Vec::with_capacity(horizons.len());
    for &f in horizons {
        let (mut ts, mut tr) = (Vec::with_capacity(reps), Vec::with_capacity(reps));
        let (mut serial, mut rolling) = (None, None);
        // interleave the modes so drift in machine load hits both equally
        for _ in 0..reps {
            let t0 = Instant::now();
            let s = forecast(model, &input, f, opts)?;
            ts.push(t0.elapsed().as_secs_f64() * 1e3);
            let t0 = Instant::now();
            let r = forecast_rolling_ntp(model, &input, f, opts)?;
            tr.push(t0.elapsed().as_secs_f64() * 1e3);
            serial = Some(s);
            rolling = Some(r);
        }
        let (s, r) = (serial.unwrap(), rolling.unwrap());
        rows.push(BenchRow {
            horizon: f,
            serial_blocks: s.block_invocations,
            rolling_blocks: r.block_invocations,
            serial_passes: s.passes,
            rolling_passes: r.passes,
            serial_ms_p50: median(&mut ts),
            rolling_ms_p50: median(&mut tr),
        });
    }
    Ok(rows)
}
