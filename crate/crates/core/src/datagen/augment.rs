//! Training-time augmentation: value flipping and Fourier resampling.

use rand::{Rng, RngCore};

use super::resample::{resample, Ratio, RESAMPLE_FACTORS};
use crate::dataloader::{MixtureSampler, RawWindow, WindowSample};
use crate::error::Result;

/// Negates both context and targets.
pub fn value_flip(sample: &WindowSample) -> WindowSample {
    WindowSample {
        input: sample.input.iter().map(|v| -v).collect(),
        targets: sample.targets.iter().map(|v| -v).collect(),
        ..sample.clone()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentRates {
    pub flip_prob: f64,
    pub resample_prob: f64,
}

impl Default for AugmentRates {
    fn default() -> Self {
        AugmentRates {
            flip_prob: 0.5,
            resample_prob: 0.3,
        }
    }
}

impl AugmentRates {
    pub const OFF: AugmentRates = AugmentRates {
        flip_prob: 0.0,
        resample_prob: 0.0,
    };
}

/// Draws training windows from a mixture and augments them on the raw scale.
#[derive(Debug, Clone, PartialEq)]
pub struct Augmenter {
    pub rates: AugmentRates,
    pub factors: Vec<Ratio>,
}

impl Default for Augmenter {
    fn default() -> Self {
        Augmenter::new(AugmentRates::default())
    }
}

impl Augmenter {
    pub fn new(rates: AugmentRates) -> Self {
        Augmenter {
            rates,
            factors: RESAMPLE_FACTORS.to_vec(),
        }
    }

    pub fn disabled() -> Self {
        Augmenter::new(AugmentRates::OFF)
    }

    /// One window with `n` context patches and `h + 1` target patches.
    /// A resampled window is cut from a resampled stretch of
    /// `ceil(W / r)` source points; when the chosen source is too short for
    /// that stretch the window is drawn unresampled.
    pub fn sample(
        &self,
        mix: &mut MixtureSampler,
        n: usize,
        p: usize,
        h: usize,
        rng: &mut dyn RngCore,
    ) -> Result<WindowSample> {
        let len = (n + h + 1) * p;
        let k = mix.pick_source(rng);
        let mut raw = None;
        if self.rates.resample_prob > 0.0 && !self.factors.is_empty() && rng.random_bool(self.rates.resample_prob) {
            let r = self.factors[rng.random_range(0..self.factors.len())];
            if !r.is_one() {
                let src = (len as u64 * r.den as u64).div_ceil(r.num as u64) as usize;
                if src >= 4 && mix.source_supports(k, src) {
                    let w = mix.draw_from(k, src, rng)?;
                    let mut values = resample(&w.values, r)?;
                    values.truncate(len);
                    raw = Some(RawWindow { values, ..w });
                }
            }
        }
        let raw = match raw {
            Some(r) => r,
            None => mix.draw_from(k, len, rng)?,
        };
        let sample = WindowSample::from_raw(raw, n * p, k)?;
        let flip = self.rates.flip_prob > 0.0 && rng.random_bool(self.rates.flip_prob);
        Ok(if flip { value_flip(&sample) } else { sample })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataloader::MemoryCorpus;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> WindowSample {
        WindowSample {
            input: vec![1.0, -2.0],
            targets: vec![0.5],
            source: 0,
            series_id: 3,
            start: 7,
        }
    }

    #[test]
    fn flip_negates_and_is_involution() {
        let s = sample();
        let f = value_flip(&s);
        assert_eq!(f.input, vec![-1.0, 2.0]);
        assert_eq!(f.targets, vec![-0.5]);
        assert_eq!(value_flip(&f), s);
    }

    #[test]
    fn augmented_windows_have_the_right_shape() {
        let series: Vec<f64> = (0..400).map(|t| (t as f64 * 0.3).sin()).collect();
        let mut mix = MixtureSampler::single(Box::new(MemoryCorpus::new(vec![series])));
        let aug = Augmenter::new(AugmentRates {
            flip_prob: 0.5,
            resample_prob: 1.0,
        });
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let w = aug.sample(&mut mix, 4, 4, 2, &mut rng).unwrap();
            assert_eq!(w.input.len(), 16);
            assert_eq!(w.targets.len(), 12);
            assert!(w.input.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn disabled_is_plain_sampling() {
        let series: Vec<f64> = (0..64).map(|t| t as f64).collect();
        let mut mix = MixtureSampler::single(Box::new(MemoryCorpus::new(vec![series])));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = Augmenter::disabled().sample(&mut mix, 2, 4, 1, &mut rng).unwrap();
        let full = w.full();
        assert!(full.windows(2).all(|p| p[1] - p[0] == 1.0));
    }
}
