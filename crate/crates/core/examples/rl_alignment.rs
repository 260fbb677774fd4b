//! Pre-train a small base model, attach LoRA adapters and align it with
//! patch-wise PPO on the relevance, consistency and aesthetics rewards.
//!
//! cargo run --release --example rl_alignment -- [refreshes]

use yaart::curation::{synth_corpus, SynthConfig};
use yaart::denoiser::{Conditioning, DenoiserConfig, DenoiserParams};
use yaart::prompt::prompt_set;
use yaart::rl::{rl_align, RlConfig, RlMetrics, ValueParams};
use yaart::rng::RngStream;
use yaart::scheduler::NoiseSchedule;
use yaart::trainer::{no_checkpoints, pretrain, TrainConfig};

fn main() -> yaart::Result<()> {
    let refreshes: usize = std::env::args()
        .nth(1)
        .map_or(10, |s| s.parse().expect("refreshes"));
    let sched = NoiseSchedule::default();
    let corpus = synth_corpus(3000, &SynthConfig::default(), &RngStream::new(1))?;
    let train = TrainConfig {
        total_steps: 400,
        batch_size: 256,
        learning_rate: 4e-3,
        ..TrainConfig::default()
    };
    let mut policy = pretrain(
        DenoiserConfig::base(8, 2),
        &corpus,
        &sched,
        &train,
        &mut no_checkpoints,
    )?
    .released;
    policy.attach_lora(4, 1.0, &RngStream::new(2))?;

    let cfg = RlConfig {
        total_steps: 4 * refreshes,
        batch_trajectories: 32,
        n_sample_steps: 50,
        learning_rate: 3e-3,
        ..RlConfig::default()
    };
    let prompts: Vec<Conditioning> = prompt_set()
        .iter()
        .map(|e| Conditioning::text(e.attributes.tokens()))
        .collect();
    let value = ValueParams::init(cfg.value_hidden, &RngStream::new(3))?;
    println!("refresh  relevance  consistency  aesthetics  clip   value_mse");
    let mut log = |m: &RlMetrics, _: &DenoiserParams| {
        println!(
            "{:>7}  {:>9.4}  {:>11.4}  {:>10.4}  {:.3}  {:.4}",
            m.refresh,
            m.mean_relevance,
            m.mean_consistency,
            m.mean_aesthetics,
            m.clip_fraction,
            m.value_mse
        );
        Ok(())
    };
    let out = rl_align(
        &policy,
        &value,
        &sched,
        &cfg,
        &prompts,
        &RngStream::new(4),
        &mut log,
    )?;
    let merged = out.params.lora_merge()?;
    println!(
        "aligned; adapters merged into {} trunk layers",
        merged.layers.len()
    );
    Ok(())
}
