//! Train the three cascade stages briefly, then sample 32x32 images for a few
//! captions and write them as PPM files.
//!
//! cargo run --release --example cascade_sampling -- [out_dir]

use std::path::PathBuf;

use yaart::cascade::{Cascade, CascadeConfig};
use yaart::curation::{synth_corpus, SynthConfig};
use yaart::denoiser::{DenoiserConfig, Stage};
use yaart::prompt::{parse_prompt, tokens_to_text};
use yaart::rng::RngStream;
use yaart::scheduler::NoiseSchedule;
use yaart::trainer::{no_checkpoints, pretrain, TrainConfig};
use yaart::vision::classify;

fn main() -> yaart::Result<()> {
    let out = PathBuf::from(
        std::env::args()
            .nth(1)
            .unwrap_or_else(|| "cascade_samples".into()),
    );
    std::fs::create_dir_all(&out).map_err(|e| yaart::Error::Io {
        path: out.clone(),
        source: e,
    })?;
    let corpus = synth_corpus(3000, &SynthConfig::default(), &RngStream::new(1))?;
    let sched = NoiseSchedule::default();
    let cfg = |steps, batch| TrainConfig {
        total_steps: steps,
        batch_size: batch,
        learning_rate: 3e-3,
        ..TrainConfig::default()
    };
    let base = pretrain(
        DenoiserConfig::base(8, 2),
        &corpus,
        &sched,
        &cfg(400, 256),
        &mut no_checkpoints,
    )?;
    println!("base trained");
    let sr1 = pretrain(
        DenoiserConfig::super_resolution(Stage::Sr1, 16),
        &corpus,
        &sched,
        &cfg(200, 64),
        &mut no_checkpoints,
    )?;
    println!("sr1 trained");
    let sr2 = pretrain(
        DenoiserConfig::super_resolution(Stage::Sr2, 32),
        &corpus,
        &sched,
        &cfg(100, 32),
        &mut no_checkpoints,
    )?;
    println!("sr2 trained");

    let cascade = Cascade {
        models: [base.released, sr1.released, sr2.released],
        sched,
        config: CascadeConfig::default(),
    };
    let captions = [
        "red small disk top-left",
        "green large square bottom-right",
        "blue large disk top-right",
    ];
    let tokens: Vec<Vec<u32>> = captions
        .iter()
        .map(|c| parse_prompt(c))
        .collect::<yaart::Result<_>>()?;
    let streams: Vec<RngStream> = (0..tokens.len())
        .map(|i| RngStream::new(7).fork_index(i as u64))
        .collect();
    let images = cascade.sample_batch(&tokens, &streams)?;
    for (i, (img, t)) in images.iter().zip(&tokens).enumerate() {
        let path = out.join(format!("sample-{i}.ppm"));
        img.write_pnm(&path)?;
        let seen = classify(img)?
            .map(|a| a.text())
            .unwrap_or_else(|| "nothing".into());
        println!(
            "{:<34} -> {} (classifier sees: {seen})",
            tokens_to_text(t),
            path.display()
        );
    }
    Ok(())
}
