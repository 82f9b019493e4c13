//! Forecasting, evaluation metrics and the compute benchmark.

mod bench;
mod forecast;
mod metrics;

pub use bench::{bench_inference, BenchRow};
pub use forecast::{
    adaptive_depth, forecast, forecast_rolling_ntp, rolling_block_count, serial_block_count, ForecastDistribution,
    ForecastOptions,
};
pub use metrics::{eval_crps_wql, evaluate, mase, median, EvalReport, Mase, MASE_EPS};
