//! Pre-train the 8x8 base stage on a synthetic corpus and save the released
//! EMA weights.
//!
//! cargo run --release --example train_base -- [steps] [out.yalab]

use std::path::PathBuf;

use yaart::curation::{synth_corpus, SynthConfig};
use yaart::denoiser::DenoiserConfig;
use yaart::params::ParamTable;
use yaart::rng::RngStream;
use yaart::scheduler::NoiseSchedule;
use yaart::trainer::{loss_drop, pretrain, TrainConfig};

fn main() -> yaart::Result<()> {
    let mut args = std::env::args().skip(1);
    let steps: usize = args.next().map_or(300, |s| s.parse().expect("steps"));
    let out = PathBuf::from(args.next().unwrap_or_else(|| "base.yalab".into()));

    let corpus = synth_corpus(2000, &SynthConfig::default(), &RngStream::new(1))?;
    let cfg = TrainConfig {
        total_steps: steps,
        batch_size: 128,
        learning_rate: 4e-3,
        eval_every: 100,
        ..TrainConfig::default()
    };
    let mut hook = |step: usize, ema: &yaart::denoiser::DenoiserParams| {
        println!("step {step}: {} EMA parameters", ema.param_count());
        Ok(())
    };
    let run = pretrain(
        DenoiserConfig::base(8, 2),
        &corpus,
        &NoiseSchedule::default(),
        &cfg,
        &mut hook,
    )?;
    for m in run.metrics.iter().step_by((steps / 10).max(1)) {
        println!(
            "step {:>5}  loss {:.4}  |grad| {:.3}",
            m.step, m.loss, m.grad_norm
        );
    }
    if let Some((first, last)) = loss_drop(&run.metrics, 50.min(steps)) {
        println!("mean loss over the first and last 50 steps: {first:.4} -> {last:.4}");
    }
    run.released.save(&out)?;
    println!("saved {}", out.display());
    Ok(())
}
