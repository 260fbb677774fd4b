//! Pre-training and fine-tuning loops, Adam and EMA maintenance.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::curation::CorpusRecord;
use crate::denoiser::{
    ema_update, loss_and_grad, Conditioning, DenoiserConfig, DenoiserParams, TrainExample,
};
use crate::error::{ensure, Error, Result};
use crate::params::ParamTable;
use crate::rng::{uniform, RngStream};
use crate::scheduler::NoiseSchedule;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub total_steps: usize,
    pub ema_decay: f64,
    /// Probability of replacing an example's condition by the null one.
    pub p_uncond: f64,
    /// Checkpoint period in steps.
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.98,
            adam_eps: 1e-8,
            batch_size: 48,
            total_steps: 2000,
            ema_decay: 0.999,
            p_uncond: 0.1,
            eval_every: 500,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Fine-tuning defaults: the pre-training setup at a tenth of the rate.
    pub fn finetune() -> Self {
        Self {
            learning_rate: 1e-4,
            total_steps: 500,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.learning_rate >= 0.0 && self.learning_rate.is_finite(),
            InvalidArgument,
            "learning_rate {} must be finite and non-negative",
            self.learning_rate
        );
        ensure!(
            (0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2),
            InvalidArgument,
            "beta1 {} and beta2 {} must lie in [0, 1)",
            self.beta1,
            self.beta2
        );
        ensure!(
            self.adam_eps > 0.0,
            InvalidArgument,
            "adam_eps must be positive"
        );
        ensure!(
            self.batch_size >= 1,
            InvalidArgument,
            "batch_size must be at least 1"
        );
        ensure!(
            (0.0..=1.0).contains(&self.ema_decay),
            InvalidArgument,
            "ema_decay {} outside [0, 1]",
            self.ema_decay
        );
        ensure!(
            (0.0..=1.0).contains(&self.p_uncond),
            InvalidArgument,
            "p_uncond {} outside [0, 1]",
            self.p_uncond
        );
        ensure!(
            self.eval_every >= 1,
            InvalidArgument,
            "eval_every must be at least 1"
        );
        Ok(())
    }

    pub fn adam(&self) -> Adam {
        Adam {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }
}

/// Adam hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// First and second moment estimates mirroring a parameter table.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<P> {
    pub m: P,
    pub v: P,
    pub step: u64,
}

impl<P: ParamTable> AdamState<P> {
    pub fn new(params: &P) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step<P: ParamTable>(
    params: &P,
    grad: &P,
    state: &AdamState<P>,
    h: &Adam,
) -> Result<(P, AdamState<P>)> {
    let gt = grad.tensors();
    let pt = params.tensors();
    ensure!(
        gt.len() == pt.len()
            && gt
                .iter()
                .zip(&pt)
                .all(|(a, b)| a.0 == b.0 && a.1.shape() == b.1.shape()),
        Shape,
        "gradient table does not mirror the parameters"
    );
    for (name, t) in &gt {
        if !t.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of {name}")));
        }
    }
    let step = state.step + 1;
    let bc1 = 1.0 - h.beta1.powi(step as i32);
    let bc2 = 1.0 - h.beta2.powi(step as i32);
    let mut out = params.clone();
    let mut next = state.clone();
    next.step = step;
    let (mut mt, mut vt, mut ot) = (
        next.m.tensors_mut(),
        next.v.tensors_mut(),
        out.tensors_mut(),
    );
    for (k, (_, g)) in gt.iter().enumerate() {
        let (m, v, o) = (&mut mt[k].1, &mut vt[k].1, &mut ot[k].1);
        for (((m, v), o), &g) in m
            .iter_mut()
            .zip(v.iter_mut())
            .zip(o.iter_mut())
            .zip(g.iter())
        {
            *m = h.beta1 * *m + (1.0 - h.beta1) * g;
            *v = h.beta2 * *v + (1.0 - h.beta2) * g * g;
            let mhat = *m / bc1;
            let vhat = *v / bc2;
            *o -= h.learning_rate * mhat / (vhat.sqrt() + h.eps);
        }
    }
    drop((mt, vt, ot));
    Ok((out, next))
}

/// EMA decay with warmup, `min(decay, (1 + n) / (10 + n))` after `n` updates.
pub fn ema_decay_at(decay: f64, updates: u64) -> f64 {
    let n = updates as f64;
    decay.min((1.0 + n) / (10.0 + n))
}

/// One metrics line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub stage: String,
    pub loss: f64,
    pub grad_norm: f64,
    pub lr: f64,
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut buf = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

/// Training pair for `config`'s stage from a corpus record: the target at
/// the stage resolution and, for super-resolution, the previous resolution
/// upsampled back.
pub fn stage_example(config: &DenoiserConfig, record: &CorpusRecord) -> Result<TrainExample> {
    let img = record.image();
    let x0 = img.resize_to(config.resolution)?;
    let mut cond = Conditioning::text(record.tokens.clone());
    if config.is_super_resolution() {
        ensure!(
            config.resolution.is_multiple_of(2),
            Shape,
            "odd super-resolution side"
        );
        let low = img.resize_to(config.resolution / 2)?.upsample_nearest(2);
        cond = cond.with_lowres(low);
    }
    Ok(TrainExample { x0, cond })
}

pub fn stage_examples(
    config: &DenoiserConfig,
    records: &[CorpusRecord],
) -> Result<Vec<TrainExample>> {
    records.iter().map(|r| stage_example(config, r)).collect()
}

/// What a training run hands back.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// The EMA weights, without a shadow of their own.
    pub released: DenoiserParams,
    /// Raw optimizer weights with the EMA shadow attached.
    pub trained: DenoiserParams,
    pub metrics: Vec<StepMetrics>,
}

/// Called every `eval_every` steps with the step count and the current EMA
/// weights.
pub type CheckpointHook<'a> = dyn FnMut(usize, &DenoiserParams) -> Result<()> + 'a;

/// The shared optimisation loop. Minibatches are drawn with replacement.
pub fn train_loop(
    init: &DenoiserParams,
    examples: &[TrainExample],
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
    tag: &str,
    hook: &mut CheckpointHook<'_>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    ensure!(
        !examples.is_empty(),
        InvalidArgument,
        "empty training corpus"
    );
    let root = RngStream::new(cfg.seed).fork(tag);
    let adam = cfg.adam();
    let mut params = init.without_ema();
    let mut ema = match &init.ema {
        Some(e) => (**e).clone(),
        None => params.clone(),
    };
    let mut state = AdamState::new(&params);
    let mut metrics = Vec::with_capacity(cfg.total_steps);
    for step in 0..cfg.total_steps {
        let s = root.fork_index(step as u64);
        let mut rng = s.fork("batch").rng();
        let batch: Vec<TrainExample> = (0..cfg.batch_size)
            .map(|_| {
                let i = rand::Rng::random_range(&mut rng, 0..examples.len());
                let mut ex = examples[i].clone();
                if uniform(&mut rng) < cfg.p_uncond {
                    ex.cond = ex.cond.as_null();
                }
                ex
            })
            .collect();
        let (loss, grad) =
            loss_and_grad(&params, &batch, sched, &s.fork("noise")).map_err(|e| match e {
                Error::NonFinite(what) => Error::NonFinite(format!("{what} at {tag} step {step}")),
                other => other,
            })?;
        ensure!(loss.is_finite(), NonFinite, "{tag} loss at step {step}");
        let grad_norm = grad.l2_norm();
        let (p, st) = adam_step(&params, &grad, &state, &adam)?;
        params = p;
        state = st;
        ema = ema_update(&ema, &params, ema_decay_at(cfg.ema_decay, step as u64))?;
        metrics.push(StepMetrics {
            step: step + 1,
            stage: tag.to_string(),
            loss,
            grad_norm,
            lr: cfg.learning_rate,
        });
        if (step + 1) % cfg.eval_every == 0 {
            hook(step + 1, &ema)?;
        }
    }
    let mut trained = params;
    trained.ema = Some(Box::new(ema.clone()));
    Ok(TrainOutcome {
        released: ema,
        trained,
        metrics,
    })
}

/// Train a freshly initialised stage on a corpus.
pub fn pretrain(
    config: DenoiserConfig,
    records: &[CorpusRecord],
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
    hook: &mut CheckpointHook<'_>,
) -> Result<TrainOutcome> {
    ensure!(
        !records.is_empty(),
        InvalidArgument,
        "empty training corpus"
    );
    let stage = config.stage;
    let init = DenoiserParams::init(
        config,
        &RngStream::new(cfg.seed).fork("init").fork(stage.name()),
    )?;
    let examples = stage_examples(&init.config, records)?;
    train_loop(
        &init,
        &examples,
        sched,
        cfg,
        &format!("pretrain-{}", stage.name()),
        hook,
    )
}

/// Continue training released weights on a small high-quality corpus.
pub fn finetune(
    params: &DenoiserParams,
    records: &[CorpusRecord],
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
    hook: &mut CheckpointHook<'_>,
) -> Result<TrainOutcome> {
    ensure!(
        !records.is_empty(),
        InvalidArgument,
        "empty fine-tuning corpus"
    );
    let examples = stage_examples(&params.config, records)?;
    let init = params.without_ema();
    train_loop(&init, &examples, sched, cfg, "finetune", hook)
}

/// Hook that ignores checkpoints.
pub fn no_checkpoints(_: usize, _: &DenoiserParams) -> Result<()> {
    Ok(())
}

/// Mean of the first and last `window` losses.
pub fn loss_drop(metrics: &[StepMetrics], window: usize) -> Option<(f64, f64)> {
    if metrics.len() < window || window == 0 {
        return None;
    }
    let mean = |s: &[StepMetrics]| s.iter().map(|m| m.loss).sum::<f64>() / s.len() as f64;
    Some((
        mean(&metrics[..window]),
        mean(&metrics[metrics.len() - window..]),
    ))
}

#[cfg(test)]
mod tests;
