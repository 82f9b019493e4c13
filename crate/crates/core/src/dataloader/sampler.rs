//! Training-window samplers over in-memory corpora, shard streams and mixtures.

use std::path::Path;
use std::sync::Arc;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, RngCore};

use super::queue::{QueueStats, ShardQueue};
use super::shard::ShardData;
use crate::error::{Error, Result};

/// A contiguous training window split into context and targets.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSample {
    /// `N * P` context values.
    pub input: Vec<f64>,
    /// `(H + 1) * P` values immediately following the context.
    pub targets: Vec<f64>,
    /// Index of the source corpus within a mixture.
    pub source: usize,
    pub series_id: u64,
    pub start: usize,
}

impl WindowSample {
    pub fn from_raw(raw: RawWindow, input_len: usize, source: usize) -> Result<Self> {
        if input_len > raw.values.len() {
            return Err(Error::Sampler(format!(
                "window of {} points cannot hold a context of {input_len}",
                raw.values.len()
            )));
        }
        let mut input = raw.values;
        let targets = input.split_off(input_len);
        Ok(WindowSample {
            input,
            targets,
            source,
            series_id: raw.series_id,
            start: raw.start,
        })
    }

    /// Context followed by targets.
    pub fn full(&self) -> Vec<f64> {
        let mut v = self.input.clone();
        v.extend_from_slice(&self.targets);
        v
    }
}

/// A contiguous slice drawn from one series.
#[derive(Debug, Clone, PartialEq)]
pub struct RawWindow {
    pub values: Vec<f64>,
    pub series_id: u64,
    pub start: usize,
}

/// Anything that can hand out uniformly random windows of a requested length.
pub trait WindowSource {
    fn draw(&mut self, len: usize, rng: &mut dyn RngCore) -> Result<RawWindow>;

    /// Whether at least one window of `len` points exists.
    fn supports(&self, len: usize) -> bool;
}

fn pick_window<'a, S, F>(items: &'a [S], len_of: F, len: usize, rng: &mut dyn RngCore) -> Option<(&'a S, usize)>
where
    F: Fn(&S) -> usize,
{
    let total: u64 = items.iter().map(|s| (len_of(s) + 1).saturating_sub(len) as u64).sum();
    if total == 0 || len == 0 {
        return None;
    }
    let mut u = rng.random_range(0..total);
    for s in items {
        let n = (len_of(s) + 1).saturating_sub(len) as u64;
        if u < n {
            return Some((s, u as usize));
        }
        u -= n;
    }
    None
}

/// Uniform draw over every valid window of `len` points in the given shards.
pub fn sample_window_from(shards: &[Arc<ShardData>], len: usize, rng: &mut dyn RngCore) -> Result<RawWindow> {
    let series: Vec<_> = shards.iter().flat_map(|s| s.series.iter()).collect();
    let (s, start) = pick_window(&series, |s| s.values.len(), len, rng)
        .ok_or_else(|| Error::Sampler(format!("no active series holds a window of {len} points")))?;
    Ok(RawWindow {
        values: s.values[start..start + len].iter().map(|&v| v as f64).collect(),
        series_id: s.id,
        start,
    })
}

/// `sample_window` for a model with `n` context patches, horizon `h` and
/// patch length `p`.
pub fn sample_window(
    shards: &[Arc<ShardData>],
    n: usize,
    p: usize,
    h: usize,
    rng: &mut dyn RngCore,
) -> Result<WindowSample> {
    let raw = sample_window_from(shards, (n + h + 1) * p, rng)?;
    WindowSample::from_raw(raw, n * p, 0)
}

/// Series held fully in memory.
#[derive(Debug, Clone, Default)]
pub struct MemoryCorpus {
    series: Vec<(u64, Vec<f64>)>,
}

impl MemoryCorpus {
    pub fn new(series: Vec<Vec<f64>>) -> Self {
        MemoryCorpus {
            series: series.into_iter().enumerate().map(|(i, s)| (i as u64, s)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.series.len()
    }

    pub fn is_empty(&self) -> bool {
        self.series.is_empty()
    }

    pub fn series(&self, i: usize) -> &[f64] {
        &self.series[i].1
    }
}

impl WindowSource for MemoryCorpus {
    fn draw(&mut self, len: usize, rng: &mut dyn RngCore) -> Result<RawWindow> {
        let ((id, s), start) = pick_window(&self.series, |s| s.1.len(), len, rng)
            .ok_or_else(|| Error::Sampler(format!("no series holds a window of {len} points")))?;
        Ok(RawWindow {
            values: s[start..start + len].to_vec(),
            series_id: *id,
            start,
        })
    }

    fn supports(&self, len: usize) -> bool {
        len > 0 && self.series.iter().any(|s| s.1.len() >= len)
    }
}

/// Streams windows from a sharded corpus through a bounded [`ShardQueue`].
/// Shards are activated in a seeded random order; every `rotate_every` draws
/// the next shard in that order is brought in, displacing the least recently
/// sampled one.
pub struct ShardStream {
    queue: ShardQueue,
    order: Vec<usize>,
    next: usize,
    rotate_every: u64,
    draws: u64,
}

impl ShardStream {
    pub fn open(dir: &Path, capacity: usize, rotate_every: u64, rng: &mut dyn RngCore) -> Result<Self> {
        let queue = ShardQueue::open(dir, capacity)?;
        let mut order: Vec<usize> = (0..queue.manifest().shards.len()).collect();
        order.shuffle(rng);
        let mut stream = ShardStream {
            queue,
            order,
            next: 0,
            rotate_every: rotate_every.max(1),
            draws: 0,
        };
        let warm = stream.queue.capacity().min(stream.order.len());
        for _ in 0..warm {
            stream.activate_next()?;
        }
        Ok(stream)
    }

    fn activate_next(&mut self) -> Result<()> {
        if self.order.is_empty() {
            return Ok(());
        }
        let idx = self.order[self.next % self.order.len()];
        self.next += 1;
        self.queue.get(idx)?;
        Ok(())
    }

    pub fn stats(&self) -> QueueStats {
        self.queue.stats()
    }

    pub fn queue(&self) -> &ShardQueue {
        &self.queue
    }
}

impl WindowSource for ShardStream {
    fn draw(&mut self, len: usize, rng: &mut dyn RngCore) -> Result<RawWindow> {
        if self.draws > 0 && self.draws.is_multiple_of(self.rotate_every) && self.order.len() > self.queue.capacity() {
            self.activate_next()?;
        }
        self.draws += 1;
        let active = self.queue.resident_data();
        let w = sample_window_from(&active, len, rng)?;
        if let Some(shard) = active.iter().find(|s| s.series.iter().any(|r| r.id == w.series_id)) {
            self.queue.touch(shard.index);
        }
        Ok(w)
    }

    fn supports(&self, len: usize) -> bool {
        let longest = self
            .queue
            .resident_data()
            .iter()
            .flat_map(|s| s.series.iter().map(|r| r.values.len()))
            .max()
            .unwrap_or(0);
        len > 0 && longest >= len
    }
}

/// Draws each window from a source chosen with probability proportional to
/// its weight.
pub struct MixtureSampler {
    sources: Vec<Box<dyn WindowSource + Send>>,
    weights: Vec<f64>,
    pick: WeightedIndex<f64>,
}

impl MixtureSampler {
    pub fn new(sources: Vec<(Box<dyn WindowSource + Send>, f64)>) -> Result<Self> {
        if sources.is_empty() {
            return Err(Error::input("mixture needs at least one source"));
        }
        let weights: Vec<f64> = sources.iter().map(|s| s.1).collect();
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::input("mixture weights must be finite and non-negative"));
        }
        let pick = WeightedIndex::new(&weights).map_err(|e| Error::input(format!("mixture weights: {e}")))?;
        Ok(MixtureSampler {
            sources: sources.into_iter().map(|s| s.0).collect(),
            weights,
            pick,
        })
    }

    pub fn single(source: Box<dyn WindowSource + Send>) -> Self {
        Self::new(vec![(source, 1.0)]).expect("unit weight is valid")
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Raw window of `len` points and the index of the source it came from.
    pub fn draw(&mut self, len: usize, rng: &mut dyn RngCore) -> Result<(RawWindow, usize)> {
        let k = self.pick_source(rng);
        Ok((self.sources[k].draw(len, rng)?, k))
    }

    pub fn pick_source(&self, rng: &mut dyn RngCore) -> usize {
        self.pick.sample(rng)
    }

    pub fn source_supports(&self, k: usize, len: usize) -> bool {
        self.sources.get(k).is_some_and(|s| s.supports(len))
    }

    /// Whether every source with positive weight can serve `len` points.
    pub fn supports(&self, len: usize) -> bool {
        self.sources
            .iter()
            .zip(&self.weights)
            .all(|(s, &w)| w == 0.0 || s.supports(len))
    }

    /// Source `k` directly, bypassing the mixture weights.
    pub fn draw_from(&mut self, k: usize, len: usize, rng: &mut dyn RngCore) -> Result<RawWindow> {
        self.sources
            .get_mut(k)
            .ok_or_else(|| Error::Sampler(format!("no source {k}")))?
            .draw(len, rng)
    }

    pub fn sample(&mut self, n: usize, p: usize, h: usize, rng: &mut dyn RngCore) -> Result<WindowSample> {
        let (raw, k) = self.draw((n + h + 1) * p, rng)?;
        WindowSample::from_raw(raw, n * p, k)
    }
}
