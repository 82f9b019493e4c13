//! Pre-trains the desk model on the sinusoid+trend toy corpus and reports
//! held-out MASE at horizon 64.
//!
//! ```text
//! cargo run --release --example toy_train -- [steps] [peak_lr] [resample_prob]
//! ```

use std::time::Instant;

use serialcast::backbone::{Model, ModelConfig};
use serialcast::datagen::sinusoid_trend_corpus;
use serialcast::dataloader::MemoryCorpus;
use serialcast::inference::evaluate;
use serialcast::trainer::{run_pretrain, TrainConfig};

fn arg<T: std::str::FromStr>(i: usize, default: T) -> T {
    std::env::args().nth(i).and_then(|s| s.parse().ok()).unwrap_or(default)
}

fn main() -> serialcast::Result<()> {
    let steps: u64 = arg(1, 3000);
    let peak_lr: f64 = arg(2, 3e-3);
    let resample_prob: f64 = arg(3, 0.0);

    let values = |count, len, seed| -> serialcast::Result<Vec<Vec<f64>>> {
        Ok(sinusoid_trend_corpus(count, len, seed)?.into_iter().map(|s| s.values).collect())
    };
    let train = values(256, 512, 1)?;
    let held = values(64, 320, 2)?;

    let config = TrainConfig { steps, batch_size: 16, peak_lr, resample_prob, ..Default::default() };
    let t0 = Instant::now();
    let run = run_pretrain(Model::new(ModelConfig::desk(), 0)?, config, Box::new(MemoryCorpus::new(train)), None, &mut |r| {
        if r.step % 100 == 0 {
            println!(
                "step {:>5} loss {:8.4} ntp {:8.4} stp {:8.4} aux {:.3} |g| {:7.2} {:6.1}s",
                r.step,
                r.loss,
                r.parts.ntp,
                r.parts.stp,
                r.parts.aux,
                r.grad_norm,
                t0.elapsed().as_secs_f64()
            );
        }
    })?;
    let report = evaluate(&run.trainer.model, &held, 64, 1)?;
    println!(
        "held-out MASE {:.3} (rolling {:.3}), CRPS {:.3}, {:.1}s",
        report.mase,
        report.mase_rolling,
        report.crps_wql,
        t0.elapsed().as_secs_f64()
    );
    Ok(())
}
