//! Training steps and the two training stages.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{save_checkpoint, RngState, TrainState};
use super::config::TrainConfig;
use super::graph::{loss_and_grad, Evaluation, TrainBatch};
use super::optim::{adamw_update, clip_global_norm, AdamState, AdamWConfig, LrSchedule};
use crate::backbone::Model;
use crate::datagen::{derive_seed, AugmentRates, Augmenter};
use crate::dataloader::{MixtureSampler, WindowSource};
use crate::error::{Error, Result};
use crate::objectives::{stp_weights, LossParts, Stage};

#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub loss: f64,
    pub parts: LossParts,
    pub per_depth: Vec<f64>,
    pub grad_norm: f64,
    pub lr: f64,
}

/// One optimizer step on `batch`. On a non-finite loss or gradient the
/// parameters and optimizer state are left untouched and an error returned.
pub fn train_step(
    model: &mut Model,
    batch: &TrainBatch,
    weights: &[f64],
    opt: &mut AdamState,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<(Evaluation, f64)> {
    let mut grads = model.params.zeros_like();
    let eval = loss_and_grad(model, batch, weights, model.config.alpha, Some(&mut grads))?;
    let norm = clip_global_norm(&mut grads, cfg.grad_clip);
    if !norm.is_finite() {
        return Err(Error::numeric(format!(
            "non-finite gradient norm {norm} (loss {})",
            eval.total
        )));
    }
    let adam = AdamWConfig {
        weight_decay: cfg.weight_decay,
        ..Default::default()
    };
    adamw_update(&mut model.params, &grads, opt, lr, &adam);
    Ok((eval, norm))
}

/// A model, its optimizer state and the sampling stream of one training stage.
pub struct Trainer {
    pub model: Model,
    pub config: TrainConfig,
    pub opt: AdamState,
    pub step: u64,
    pub augmenter: Augmenter,
    rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(model: Model, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if let Some(n) = config.train_context {
            if n > model.config.n_max {
                return Err(Error::ContextLength {
                    tokens: n,
                    max: model.config.n_max,
                });
            }
        }
        let opt = AdamState::new(&model.params);
        let augmenter = Augmenter::new(AugmentRates {
            flip_prob: config.flip_prob,
            resample_prob: config.resample_prob,
        });
        let rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 1));
        Ok(Trainer {
            model,
            config,
            opt,
            step: 0,
            augmenter,
            rng,
        })
    }

    /// Continues from a saved state; the optimizer moments and the sampling
    /// stream pick up where they stopped.
    pub fn resume(model: Model, config: TrainConfig, state: TrainState) -> Result<Self> {
        let mut t = Trainer::new(model, config)?;
        t.step = state.step;
        if let Some(a) = state.adam {
            if a.m.len() != t.opt.m.len() {
                return Err(Error::Checkpoint("optimizer state does not match the model".into()));
            }
            t.opt = a;
        }
        if let Some(r) = state.rng {
            t.rng = ChaCha8Rng::from_seed(r.seed);
            t.rng.set_stream(r.stream);
            t.rng.set_word_pos(r.word_pos);
        }
        Ok(t)
    }

    pub fn state(&self) -> TrainState {
        TrainState {
            step: self.step,
            adam: Some(self.opt.clone()),
            rng: Some(RngState {
                seed: self.rng.get_seed(),
                stream: self.rng.get_stream(),
                word_pos: self.rng.get_word_pos(),
            }),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(&self.model, Some(&self.state()), path)
    }

    pub fn stp_weights(&self) -> Vec<f64> {
        stp_weights(self.config.stage, self.model.config.stp_blocks)
    }

    pub fn context(&self) -> usize {
        self.config.train_context.unwrap_or(self.model.config.n_max)
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            peak: self.config.peak_lr,
            warmup: self.config.warmup(),
            total: self.config.steps,
            floor_frac: self.config.lr_floor,
        }
    }

    /// Draws `batch_size` augmented windows.
    pub fn next_batch(&mut self, mix: &mut MixtureSampler) -> Result<TrainBatch> {
        let cfg = &self.model.config;
        let n = self.context();
        let windows = (0..self.config.batch_size)
            .map(|_| {
                self.augmenter
                    .sample(mix, n, cfg.patch_len, cfg.stp_blocks, &mut self.rng)
                    .map(|w| w.full())
            })
            .collect::<Result<Vec<_>>>()?;
        TrainBatch::from_windows(&windows, &self.model, n)
    }

    pub fn step_on(&mut self, batch: &TrainBatch) -> Result<StepReport> {
        let lr = self.schedule().at(self.step);
        let weights = self.stp_weights();
        let (eval, grad_norm) = train_step(&mut self.model, batch, &weights, &mut self.opt, lr, &self.config)?;
        let report = StepReport {
            step: self.step,
            loss: eval.total,
            parts: eval.parts,
            per_depth: eval.per_depth,
            grad_norm,
            lr,
        };
        self.step += 1;
        Ok(report)
    }

    /// Trains until `config.steps`, writing `checkpoint` every
    /// `checkpoint_every` steps and at the end.
    pub fn run(
        &mut self,
        mix: &mut MixtureSampler,
        checkpoint: Option<&Path>,
        observer: &mut dyn FnMut(&StepReport),
    ) -> Result<Vec<StepReport>> {
        let history = self.run_until(self.config.steps, mix, checkpoint, observer)?;
        if let Some(path) = checkpoint {
            self.save(path)?;
        }
        Ok(history)
    }

    /// Trains until step `stop` (at most `config.steps`), following the full
    /// schedule; periodic checkpoints only.
    pub fn run_until(
        &mut self,
        stop: u64,
        mix: &mut MixtureSampler,
        checkpoint: Option<&Path>,
        observer: &mut dyn FnMut(&StepReport),
    ) -> Result<Vec<StepReport>> {
        let stop = stop.min(self.config.steps);
        let len = (self.context() + self.model.config.stp_blocks + 1) * self.model.config.patch_len;
        if !mix.supports(len) {
            return Err(Error::Sampler(format!("no source series holds a training window of {len} points")));
        }
        let mut history = Vec::new();
        while self.step < stop {
            let batch = self.next_batch(mix)?;
            let r = self.step_on(&batch)?;
            observer(&r);
            history.push(r);
            if let Some(path) = checkpoint {
                let every = self.config.checkpoint_every;
                if every > 0 && self.step.is_multiple_of(every) {
                    self.save(path)?;
                }
            }
        }
        Ok(history)
    }
}

/// Outcome of a training stage.
pub struct StageRun {
    pub trainer: Trainer,
    pub history: Vec<StepReport>,
    pub checkpoint: Option<PathBuf>,
}

/// Pre-training: uniform serial weights over a single corpus.
pub fn run_pretrain(
    model: Model,
    mut config: TrainConfig,
    data: Box<dyn WindowSource + Send>,
    checkpoint: Option<&Path>,
    observer: &mut dyn FnMut(&StepReport),
) -> Result<StageRun> {
    config.stage = Stage::Pretrain;
    let mut mix = MixtureSampler::single(data);
    let mut trainer = Trainer::new(model, config)?;
    let history = trainer.run(&mut mix, checkpoint, observer)?;
    Ok(StageRun {
        trainer,
        history,
        checkpoint: checkpoint.map(Path::to_path_buf),
    })
}

/// Continued pre-training with `1/sqrt(j)` serial weights on a mixture of the
/// post-training corpus and the revisited pre-training corpus. The context
/// bound is extended first when `extend_n_max` asks for it.
pub fn run_posttrain(
    pretrained: Model,
    mut config: TrainConfig,
    post: Box<dyn WindowSource + Send>,
    pre: Box<dyn WindowSource + Send>,
    checkpoint: Option<&Path>,
    observer: &mut dyn FnMut(&StepReport),
) -> Result<StageRun> {
    config.stage = Stage::Posttrain;
    if config.mixture_weights.len() != 2 {
        return Err(Error::config(format!(
            "post-training needs 2 mixture weights (post, pre), got {}",
            config.mixture_weights.len()
        )));
    }
    let model = match config.extend_n_max {
        Some(n) => extend_context(&pretrained, n, config.rope_interpolation)?,
        None => pretrained,
    };
    let mut mix = MixtureSampler::new(vec![
        (post, config.mixture_weights[0]),
        (pre, config.mixture_weights[1]),
    ])?;
    let mut trainer = Trainer::new(model, config)?;
    let history = trainer.run(&mut mix, checkpoint, observer)?;
    Ok(StageRun {
        trainer,
        history,
        checkpoint: checkpoint.map(Path::to_path_buf),
    })
}

/// Raises the accepted context to `new_n_max` patches. No weights change;
/// with `interpolate` the RoPE positions are compressed by `old / new`.
pub fn extend_context(model: &Model, new_n_max: usize, interpolate: bool) -> Result<Model> {
    let old = model.config.n_max;
    if new_n_max < old {
        return Err(Error::config(format!(
            "context extension cannot shrink n_max from {old} to {new_n_max}"
        )));
    }
    let mut out = model.clone();
    out.config.n_max = new_n_max;
    if interpolate {
        out.config.rope_scale *= old as f64 / new_n_max as f64;
    }
    Ok(out)
}

/// Mean per-depth prediction loss of `model` on fixed windows, in
/// normalized space, without gradients.
pub fn validation_losses(model: &Model, windows: &[Vec<f64>], n_ctx: usize, batch: usize) -> Result<Vec<f64>> {
    let depth = model.config.stp_blocks;
    let mut sums = vec![0.0; depth + 1];
    let mut count = 0usize;
    for chunk in windows.chunks(batch.max(1)) {
        let b = TrainBatch::from_windows(chunk, model, n_ctx)?;
        let e = loss_and_grad(model, &b, &vec![1.0; depth], model.config.alpha, None)?;
        for (s, l) in sums.iter_mut().zip(&e.per_depth) {
            *s += l * chunk.len() as f64;
        }
        count += chunk.len();
    }
    Ok(sums.into_iter().map(|s| s / count as f64).collect())
}
