//! Point and probabilistic forecast metrics and the evaluation report.

use std::time::Instant;

use serde::Serialize;

use super::forecast::{forecast, forecast_rolling_ntp, ForecastDistribution, ForecastOptions};
use crate::backbone::Model;
use crate::error::{Error, Result};
use crate::objectives::wql;

/// Floor on the seasonal-naive scale.
pub const MASE_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Mase {
    pub value: f64,
    /// The in-sample seasonal-naive error was zero and was replaced by
    /// [`MASE_EPS`].
    pub degenerate: bool,
}

/// `mean |yhat - y| / mean_{t >= m} |x_t - x_{t-m}|`.
pub fn mase(forecast: &[f64], actuals: &[f64], insample: &[f64], season: usize) -> Result<Mase> {
    if forecast.len() != actuals.len() || actuals.is_empty() {
        return Err(Error::input(format!(
            "MASE needs equal non-empty horizons, got {} and {}",
            forecast.len(),
            actuals.len()
        )));
    }
    if season == 0 || insample.len() <= season {
        return Err(Error::input(format!(
            "MASE with season {season} needs more than {season} in-sample points, got {}",
            insample.len()
        )));
    }
    let err = forecast.iter().zip(actuals).map(|(a, b)| (a - b).abs()).sum::<f64>() / actuals.len() as f64;
    let scale = insample
        .iter()
        .skip(season)
        .zip(insample)
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / (insample.len() - season) as f64;
    let degenerate = !(scale >= MASE_EPS);
    Ok(Mase {
        value: err / if degenerate { MASE_EPS } else { scale },
        degenerate,
    })
}

/// Mean over levels of the weighted quantile loss in data scale.
pub fn eval_crps_wql(dist: &ForecastDistribution, actuals: &[f64]) -> Result<f64> {
    if dist.horizon() != actuals.len() {
        return Err(Error::input(format!(
            "forecast horizon {} does not match {} actuals",
            dist.horizon(),
            actuals.len()
        )));
    }
    let total: f64 = dist
        .levels
        .iter()
        .enumerate()
        .map(|(q, &level)| wql(actuals, dist.level(q), level))
        .sum();
    Ok(total / dist.levels.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub mase: f64,
    pub crps_wql: f64,
    pub passes_serial: usize,
    pub passes_rolling: usize,
    pub wall_ms_p50: f64,
    pub mase_rolling: f64,
    pub crps_wql_rolling: f64,
    pub per_series_mase: Vec<f64>,
    pub degenerate_series: usize,
    pub horizon: usize,
    pub season: usize,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

pub fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Forecasts the last `horizon` points of every series from the points
/// before them, in serial and rolling modes. Aggregate MASE is the mean over
/// series; degenerate series are counted but still included.
pub fn evaluate(model: &Model, series: &[Vec<f64>], horizon: usize, season: usize) -> Result<EvalReport> {
    if series.is_empty() {
        return Err(Error::input("evaluation needs at least one series"));
    }
    let opts = ForecastOptions::default();
    let mut per_series = Vec::with_capacity(series.len());
    let (mut crps, mut mase_r, mut crps_r) = (0.0, 0.0, 0.0);
    let (mut passes_s, mut passes_r, mut degenerate) = (0, 0, 0);
    let mut walls = Vec::with_capacity(series.len());
    for s in series {
        if s.len() <= horizon + season {
            return Err(Error::input(format!(
                "series of {} points is too short for horizon {horizon} and season {season}",
                s.len()
            )));
        }
        let (ctx, actual) = s.split_at(s.len() - horizon);
        let t0 = Instant::now();
        let f = forecast(model, ctx, horizon, opts)?;
        walls.push(t0.elapsed().as_secs_f64() * 1e3);
        let r = forecast_rolling_ntp(model, ctx, horizon, opts)?;
        let m = mase(f.median(), actual, ctx, season)?;
        degenerate += m.degenerate as usize;
        per_series.push(m.value);
        crps += eval_crps_wql(&f, actual)?;
        mase_r += mase(r.median(), actual, ctx, season)?.value;
        crps_r += eval_crps_wql(&r, actual)?;
        passes_s += f.passes;
        passes_r += r.passes;
    }
    let n = series.len() as f64;
    Ok(EvalReport {
        mase: per_series.iter().sum::<f64>() / n,
        crps_wql: crps / n,
        passes_serial: passes_s,
        passes_rolling: passes_r,
        wall_ms_p50: median(&mut walls),
        mase_rolling: mase_r / n,
        crps_wql_rolling: crps_r / n,
        per_series_mase: per_series,
        degenerate_series: degenerate,
        horizon,
        season,
    })
}
