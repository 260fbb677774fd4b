//! Directional studies on the base stage: model width vs training speed,
//! curated vs full training data, and pre-train vs fine-tune quality.

use serde::{Deserialize, Serialize};

use super::{sbs_compare, EvalPrompt, ImageSource, JudgeConfig, SbsResult, StageSource};
use crate::cascade::StageOptions;
use crate::curation::{subsample_uniform, CorpusRecord};
use crate::denoiser::{DenoiserConfig, DenoiserParams};
use crate::error::{ensure, Result};
use crate::params::ParamTable;
use crate::rng::RngStream;
use crate::scheduler::NoiseSchedule;
use crate::trainer::{finetune, no_checkpoints, pretrain, StepMetrics, TrainConfig};

/// Shared knobs of the comparison studies.
#[derive(Clone, Debug)]
pub struct StudyConfig {
    pub train: TrainConfig,
    pub finetune: TrainConfig,
    pub resolution: usize,
    pub width_mult: usize,
    pub sample: StageOptions,
    pub seeds_per_prompt: usize,
    pub judge: JudgeConfig,
}

impl StudyConfig {
    fn base(&self, width_mult: usize) -> DenoiserConfig {
        DenoiserConfig::base(self.resolution, width_mult)
    }

    fn source(&self, params: DenoiserParams, sched: &NoiseSchedule) -> StageSource {
        StageSource {
            params,
            sched: *sched,
            opts: self.sample.clone(),
        }
    }
}

/// First step at which the trailing `window`-step mean loss is at most
/// `threshold`.
pub fn steps_to_threshold(metrics: &[StepMetrics], threshold: f64, window: usize) -> Option<usize> {
    if window == 0 || metrics.len() < window {
        return None;
    }
    let mut sum: f64 = metrics[..window].iter().map(|m| m.loss).sum();
    for end in window..=metrics.len() {
        if end > window {
            sum += metrics[end - 1].loss - metrics[end - 1 - window].loss;
        }
        if sum / window as f64 <= threshold {
            return Some(metrics[end - 1].step);
        }
    }
    None
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingPoint {
    pub width_mult: usize,
    pub param_count: usize,
    pub steps_to_threshold: Option<usize>,
    /// Mean loss over the last `window` steps.
    pub final_loss: f64,
}

/// Train one base stage per width on the same corpus and seed.
pub fn scaling_study(
    records: &[CorpusRecord],
    widths: &[usize],
    cfg: &StudyConfig,
    sched: &NoiseSchedule,
    threshold: f64,
    window: usize,
) -> Result<Vec<ScalingPoint>> {
    ensure!(!widths.is_empty(), InvalidArgument, "no widths to compare");
    ensure!(window >= 1, InvalidArgument, "window must be at least 1");
    widths
        .iter()
        .map(|&w| {
            let out = pretrain(cfg.base(w), records, sched, &cfg.train, &mut no_checkpoints)?;
            let tail = &out.metrics[out.metrics.len().saturating_sub(window)..];
            Ok(ScalingPoint {
                width_mult: w,
                param_count: out.released.param_count(),
                steps_to_threshold: steps_to_threshold(&out.metrics, threshold, window),
                final_loss: tail.iter().map(|m| m.loss).sum::<f64>() / tail.len().max(1) as f64,
            })
        })
        .collect()
}

/// A named training subset.
#[derive(Clone, Debug)]
pub struct QualityArm {
    pub name: String,
    pub records: Vec<CorpusRecord>,
}

#[derive(Clone, Debug)]
pub struct QualityStudy {
    /// Each arm against the model trained on the baseline data.
    pub results: Vec<(String, SbsResult)>,
}

/// Train the baseline and every arm with identical settings and compare each
/// arm against the baseline side by side.
pub fn quality_study(
    baseline: &[CorpusRecord],
    arms: &[QualityArm],
    cfg: &StudyConfig,
    sched: &NoiseSchedule,
    prompts: &[EvalPrompt],
    stream: &RngStream,
) -> Result<QualityStudy> {
    let base = pretrain(
        cfg.base(cfg.width_mult),
        baseline,
        sched,
        &cfg.train,
        &mut no_checkpoints,
    )?;
    let base_src = cfg.source(base.released, sched);
    let mut results = Vec::with_capacity(arms.len());
    for arm in arms {
        let out = pretrain(
            cfg.base(cfg.width_mult),
            &arm.records,
            sched,
            &cfg.train,
            &mut no_checkpoints,
        )?;
        let src = cfg.source(out.released, sched);
        let (r, _) = sbs_compare(
            &src,
            &base_src,
            prompts,
            cfg.seeds_per_prompt,
            &cfg.judge,
            &stream.fork(&arm.name),
        )?;
        results.push((arm.name.clone(), r));
    }
    Ok(QualityStudy { results })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferPoint {
    pub width_mult: usize,
    pub fraction: f64,
    pub pretrain_win_rate: f64,
    pub finetune_win_rate: f64,
}

/// For every (width, data fraction): pre-train, fine-tune, and score both
/// against a fixed reference.
#[allow(clippy::too_many_arguments)]
pub fn transfer_study(
    points: &[(usize, f64)],
    pretrain_records: &[CorpusRecord],
    finetune_records: &[CorpusRecord],
    reference: &dyn ImageSource,
    cfg: &StudyConfig,
    sched: &NoiseSchedule,
    prompts: &[EvalPrompt],
    stream: &RngStream,
) -> Result<Vec<TransferPoint>> {
    ensure!(!points.is_empty(), InvalidArgument, "no study points");
    points
        .iter()
        .enumerate()
        .map(|(i, &(w, fraction))| {
            let s = stream.fork_index(i as u64);
            let subset = subsample_uniform(pretrain_records, fraction, &s.fork("subset"))?;
            let pre = pretrain(cfg.base(w), &subset, sched, &cfg.train, &mut no_checkpoints)?;
            let judge = s.fork("judge");
            let (rp, _) = sbs_compare(
                &cfg.source(pre.released.clone(), sched),
                reference,
                prompts,
                cfg.seeds_per_prompt,
                &cfg.judge,
                &judge,
            )?;
            let ft = finetune(
                &pre.released,
                finetune_records,
                sched,
                &cfg.finetune,
                &mut no_checkpoints,
            )?;
            let (rf, _) = sbs_compare(
                &cfg.source(ft.released, sched),
                reference,
                prompts,
                cfg.seeds_per_prompt,
                &cfg.judge,
                &judge,
            )?;
            Ok(TransferPoint {
                width_mult: w,
                fraction,
                pretrain_win_rate: rp.win_rate_a,
                finetune_win_rate: rf.win_rate_a,
            })
        })
        .collect()
}
