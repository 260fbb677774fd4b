//! Two directional studies at toy scale: steps-to-threshold by model width,
//! and whether pre-training quality predicts fine-tuning quality.
//!
//! cargo run --release --example scaling_and_transfer

use yaart::cascade::StageOptions;
use yaart::curation::{curate, synth_corpus, CurateConfig, SynthConfig};
use yaart::eval::{
    correlation_report, eval_prompts, scaling_study, transfer_study, JudgeConfig, OracleSource,
    StudyConfig,
};
use yaart::rng::RngStream;
use yaart::scheduler::NoiseSchedule;
use yaart::trainer::TrainConfig;

fn main() -> yaart::Result<()> {
    let sched = NoiseSchedule::default();
    let corpus = synth_corpus(3000, &SynthConfig::default(), &RngStream::new(1))?;
    let train = TrainConfig {
        total_steps: 300,
        batch_size: 64,
        learning_rate: 2e-3,
        eval_every: usize::MAX,
        ..TrainConfig::default()
    };
    let cfg = StudyConfig {
        finetune: TrainConfig {
            total_steps: 100,
            learning_rate: 1e-3,
            ..train.clone()
        },
        train,
        resolution: 8,
        width_mult: 1,
        sample: StageOptions {
            steps: 24,
            guidance: 2.0,
            ..StageOptions::default()
        },
        seeds_per_prompt: 1,
        judge: JudgeConfig::from_synthetic(500, 8, 0.05, &RngStream::new(2))?,
    };

    for p in scaling_study(&corpus, &[1, 2, 3], &cfg, &sched, 0.2, 25)? {
        println!(
            "width {} ({:>6} params): loss 0.2 reached at step {:?}, final loss {:.4}",
            p.width_mult, p.param_count, p.steps_to_threshold, p.final_loss
        );
    }

    let (curated, _) = curate(&corpus, &CurateConfig::default())?;
    let reference = OracleSource {
        side: 8,
        aesthetic: 0.2,
        defect: 0.4,
    };
    let points = [(1, 0.1), (1, 1.0), (2, 0.1), (2, 1.0)];
    let results = transfer_study(
        &points,
        &corpus,
        &curated,
        &reference,
        &cfg,
        &sched,
        &eval_prompts(),
        &RngStream::new(3),
    )?;
    for r in &results {
        println!(
            "width {} fraction {:.1}: pre-train win rate {:.3}, fine-tune win rate {:.3}",
            r.width_mult, r.fraction, r.pretrain_win_rate, r.finetune_win_rate
        );
    }
    let pre: Vec<f64> = results.iter().map(|r| r.pretrain_win_rate).collect();
    let fine: Vec<f64> = results.iter().map(|r| r.finetune_win_rate).collect();
    let c = correlation_report(&pre, &fine)?;
    println!("pearson {:.3}, spearman {:.3}", c.pearson, c.spearman);
    Ok(())
}
