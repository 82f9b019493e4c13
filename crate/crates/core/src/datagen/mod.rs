//! Synthetic signals, augmentation and dataset complexity statistics.

mod augment;
mod resample;
mod signals;
mod stats;

pub use augment::{value_flip, Augmenter, AugmentRates};
pub use resample::{resample, Ratio, RESAMPLE_FACTORS};
pub use signals::{derive_seed, gen_signal, sinusoid_trend_corpus, Combine, SignalKind, SignalSpec, TimeSeriesSample};
pub use stats::{
    adf_design, adf_statistic, dataset_complexity, forecastability, periodogram, schwert_lag,
    AdfResult, ComplexityPoint,
};
