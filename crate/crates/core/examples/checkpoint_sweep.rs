//! Save checkpoints during pre-training and compare each one against two
//! fixed baselines, three repeats per comparison.
//!
//! cargo run --release --example checkpoint_sweep

use yaart::cascade::StageOptions;
use yaart::curation::{synth_corpus, SynthConfig};
use yaart::denoiser::{DenoiserConfig, DenoiserParams};
use yaart::eval::{
    eval_prompts, summarize_sweep, sweep_harness, ImageSource, JudgeConfig, OracleSource,
    StageSource,
};
use yaart::rng::RngStream;
use yaart::scheduler::NoiseSchedule;
use yaart::trainer::{pretrain, TrainConfig};

fn main() -> yaart::Result<()> {
    let dir = std::env::temp_dir().join("yaart-sweep-example");
    std::fs::create_dir_all(&dir).map_err(|e| yaart::Error::Io {
        path: dir.clone(),
        source: e,
    })?;
    let sched = NoiseSchedule::default();
    let corpus = synth_corpus(2000, &SynthConfig::default(), &RngStream::new(1))?;
    let cfg = TrainConfig {
        total_steps: 400,
        batch_size: 128,
        learning_rate: 4e-3,
        eval_every: 100,
        ..TrainConfig::default()
    };
    let mut checkpoints = Vec::new();
    let mut save = |step: usize, ema: &DenoiserParams| {
        let path = dir.join(format!("ckpt-{step}.yalab"));
        ema.save(&path)?;
        checkpoints.push((step, path));
        Ok(())
    };
    pretrain(DenoiserConfig::base(8, 2), &corpus, &sched, &cfg, &mut save)?;

    let opts = StageOptions {
        steps: 32,
        guidance: 2.0,
        ..StageOptions::default()
    };
    let load = |p: &std::path::Path| -> yaart::Result<Box<dyn ImageSource>> {
        Ok(Box::new(StageSource {
            params: DenoiserParams::load(p)?,
            sched,
            opts: opts.clone(),
        }))
    };
    let first = load(&checkpoints[0].1)?;
    let reference = OracleSource {
        side: 8,
        aesthetic: 0.3,
        defect: 0.3,
    };
    let judge = JudgeConfig::from_synthetic(500, 8, 0.05, &RngStream::new(2))?;
    let rows = sweep_harness(
        &checkpoints,
        &load,
        [
            ("first_checkpoint", first.as_ref()),
            ("noisy_renders", &reference),
        ],
        100,
        &eval_prompts(),
        1,
        &judge,
        &RngStream::new(3),
    )?;
    for p in summarize_sweep(&rows) {
        println!(
            "step {:>4} vs {:<16} win rate {:.3} ± {:.3}",
            p.step, p.baseline, p.mean, p.std
        );
    }
    Ok(())
}
