//! Fourier-basis resampling.

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{Error, Result};

/// A positive rational factor `num / den`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Ratio {
    pub num: u32,
    pub den: u32,
}

impl Ratio {
    pub const ONE: Ratio = Ratio { num: 1, den: 1 };

    pub fn new(num: u32, den: u32) -> Result<Self> {
        if num == 0 || den == 0 {
            return Err(Error::input("resample ratio needs positive numerator and denominator"));
        }
        Ok(Ratio { num, den })
    }

    pub fn value(&self) -> f64 {
        self.num as f64 / self.den as f64
    }

    pub fn is_one(&self) -> bool {
        self.num == self.den
    }

    /// Output length for an input of `len` points.
    pub fn apply_len(&self, len: usize) -> usize {
        (len as f64 * self.value()).round() as usize
    }
}

impl std::fmt::Display for Ratio {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}/{}", self.num, self.den)
    }
}

/// Augmentation grid.
pub const RESAMPLE_FACTORS: [Ratio; 9] = [
    Ratio { num: 1, den: 4 },
    Ratio { num: 1, den: 3 },
    Ratio { num: 1, den: 2 },
    Ratio { num: 2, den: 3 },
    Ratio { num: 1, den: 1 },
    Ratio { num: 3, den: 2 },
    Ratio { num: 2, den: 1 },
    Ratio { num: 3, den: 1 },
    Ratio { num: 4, den: 1 },
];

/// Resamples to `round(T * r)` points by truncating or zero-padding the
/// spectrum. The sample at index 0 stays aligned with the input's.
pub fn resample(series: &[f64], factor: Ratio) -> Result<Vec<f64>> {
    let t = series.len();
    if t < 4 {
        return Err(Error::input(format!("resample needs at least 4 points, got {t}")));
    }
    let r = factor.value();
    if !(0.125..=8.0).contains(&r) {
        return Err(Error::input(format!("resample factor {factor} outside [1/8, 8]")));
    }
    if factor.is_one() {
        return Ok(series.to_vec());
    }
    let t2 = factor.apply_len(t);
    if t2 < 2 {
        return Err(Error::input(format!("resampled length {t2} is below 2")));
    }
    if t2 == t {
        return Ok(series.to_vec());
    }

    let mut planner = FftPlanner::<f64>::new();
    let mut spec: Vec<Complex64> = series.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    planner.plan_fft_forward(t).process(&mut spec);

    let n = t.min(t2);
    let mut out = vec![Complex64::new(0.0, 0.0); t2];
    let half = (n - 1) / 2;
    out[0] = spec[0];
    for k in 1..=half {
        out[k] = spec[k];
        out[t2 - k] = spec[t - k];
    }
    if n.is_multiple_of(2) {
        let h = n / 2;
        if t2 < t {
            // both +h and -h fold onto the new Nyquist bin
            out[h] = spec[h] + spec[t - h];
        } else {
            out[h] = spec[h] * 0.5;
            out[t2 - h] = spec[h] * 0.5;
        }
    }
    planner.plan_fft_inverse(t2).process(&mut out);
    let scale = 1.0 / t as f64;
    Ok(out.iter().map(|c| c.re * scale).collect())
}
