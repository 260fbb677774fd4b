//! Policy-gradient alignment of the base stage.
//!
//! Trajectories are sampled under a frozen copy of the policy with guidance
//! off, scored by three reward channels, and the clipped importance-sampled
//! surrogate is optimised patch by patch. Only the condition embedding and the
//! LoRA factors move.

mod rewards;
mod value;

pub use rewards::{
    compute_rewards, normalize_and_combine, relevance_penalty, Normalized, RewardVector,
    RunningStats, COLOR_MARGIN, DISK_CORNER_MAX, POSITION_MARGIN, SHAPE_MIN_SIDE, SIZE_MARGIN,
    SQUARE_CORNER_MIN,
};
pub use value::{token_bag, value_update, ValueParams};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::cascade::{gaussian_log_density, sample_stage_batch, StageOptions};
use crate::checkpoint::{ModelKind, TensorTable};
use crate::denoiser::{is_rl_trainable, BatchInput, Conditioning, DenoiserParams};
use crate::error::{ensure, Error, Result};
use crate::image::{Image, PatchSpec};
use crate::params::ParamTable;
use crate::rng::RngStream;
use crate::scheduler::NoiseSchedule;
use crate::trainer::{adam_step, Adam, AdamState};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RlConfig {
    pub clip_epsilon: f64,
    pub n_sample_steps: usize,
    /// Pixels per patch side.
    pub patch_size: usize,
    pub reward_weights: [f64; 3],
    /// Optimizer steps between refreshes of the frozen policy.
    pub refresh_every: usize,
    pub batch_trajectories: usize,
    pub value_lr: f64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Total optimizer steps.
    pub total_steps: usize,
    pub value_hidden: usize,
    pub seed: u64,
}

impl Default for RlConfig {
    fn default() -> Self {
        Self {
            clip_epsilon: 0.5,
            n_sample_steps: 100,
            patch_size: 4,
            reward_weights: [1.0, 1.0, 1.0],
            refresh_every: 4,
            batch_trajectories: 64,
            value_lr: 0.1,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.98,
            total_steps: 80,
            value_hidden: 16,
            seed: 0,
        }
    }
}

impl RlConfig {
    pub fn validate(&self, resolution: usize) -> Result<()> {
        ensure!(
            self.clip_epsilon > 0.0 && self.clip_epsilon.is_finite(),
            InvalidArgument,
            "clip_epsilon {} must be positive",
            self.clip_epsilon
        );
        ensure!(
            self.n_sample_steps >= 1,
            InvalidArgument,
            "n_sample_steps must be at least 1"
        );
        ensure!(
            self.patch_size >= 1 && resolution.is_multiple_of(self.patch_size),
            InvalidArgument,
            "patch_size {} does not divide the resolution {resolution}",
            self.patch_size
        );
        ensure!(
            self.reward_weights.iter().all(|w| w.is_finite()),
            InvalidArgument,
            "reward weights must be finite"
        );
        ensure!(
            self.refresh_every >= 1,
            InvalidArgument,
            "refresh_every must be at least 1"
        );
        ensure!(
            self.batch_trajectories >= 1,
            InvalidArgument,
            "batch_trajectories must be at least 1"
        );
        ensure!(
            self.value_lr >= 0.0
                && self.value_lr.is_finite()
                && self.learning_rate >= 0.0
                && self.learning_rate.is_finite(),
            InvalidArgument,
            "learning rates must be finite and non-negative"
        );
        ensure!(
            (0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2),
            InvalidArgument,
            "Adam betas must lie in [0, 1)"
        );
        ensure!(
            self.value_hidden >= 1,
            InvalidArgument,
            "value_hidden must be at least 1"
        );
        Ok(())
    }

    pub fn patch_spec(&self, resolution: usize) -> Result<PatchSpec> {
        PatchSpec::grid(resolution, resolution, self.patch_size)
    }

    fn adam(&self) -> Adam {
        Adam {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: 1e-8,
        }
    }
}

/// One sampled chain with everything the surrogate needs.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub cond: Conditioning,
    /// `x` at every grid time, from the initial noise to the final sample.
    pub states: Vec<Image>,
    pub timesteps: Vec<f64>,
    /// Transition variance per step; zero for the final step.
    pub vars: Vec<f64>,
    /// Per-step per-patch log-densities under the frozen policy; empty for
    /// the final step.
    pub old_log_density: Vec<Vec<f64>>,
    pub final_image: Image,
    pub rewards: RewardVector,
    pub value: f64,
    /// Normalised weighted reward, set by [`attach_advantages`].
    pub combined: Option<f64>,
    pub advantage: Option<f64>,
}

impl Trajectory {
    /// Steps that carry a density (all but the noise-free last one).
    pub fn scored_steps(&self) -> usize {
        self.old_log_density
            .iter()
            .filter(|d| !d.is_empty())
            .count()
    }

    /// Tensor table for debugging dumps.
    pub fn to_table(&self) -> TensorTable {
        let mut t = TensorTable::new(ModelKind::Trajectory);
        let shape = self.final_image.shape();
        let d = shape.len();
        let mut states = Vec::with_capacity(self.states.len() * d);
        for s in &self.states {
            states.extend_from_slice(s.data());
        }
        t.push(
            "states",
            ndarray::ArrayD::from_shape_vec(
                vec![self.states.len(), shape.height, shape.width, shape.channels],
                states,
            )
            .expect("state buffer matches its shape"),
        );
        t.push_vec("timesteps", &self.timesteps);
        t.push_vec("vars", &self.vars);
        let patches = self.old_log_density.iter().map(Vec::len).max().unwrap_or(0);
        let mut ld = Array2::from_elem((self.old_log_density.len(), patches), f64::NAN);
        for (k, row) in self.old_log_density.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                ld[(k, j)] = *v;
            }
        }
        t.push("old_log_density", ld.into_dyn());
        t.push_vec(
            "tokens",
            &self
                .cond
                .tokens
                .iter()
                .map(|&v| v as f64)
                .collect::<Vec<_>>(),
        );
        t.push_vec("rewards", &self.rewards.to_array());
        t.push_scalar("value", self.value);
        t
    }
}

/// Sample one trajectory per prompt under the frozen policy, guidance off.
pub fn generate_trajectories(
    params_old: &DenoiserParams,
    sched: &NoiseSchedule,
    cfg: &RlConfig,
    prompts: &[Conditioning],
    vp: &ValueParams,
    stream: &RngStream,
) -> Result<Vec<Trajectory>> {
    let c = &params_old.config;
    ensure!(
        !c.is_super_resolution(),
        InvalidArgument,
        "RL alignment targets the base stage"
    );
    cfg.validate(c.resolution)?;
    let opts = StageOptions {
        steps: cfg.n_sample_steps,
        guidance: 1.0,
        clip_x0: true,
        patch: Some(cfg.patch_spec(c.resolution)?),
        keep_states: true,
    };
    let streams: Vec<RngStream> = (0..prompts.len())
        .map(|i| stream.fork_index(i as u64))
        .collect();
    let samples = sample_stage_batch(params_old, sched, &opts, prompts, &streams)?;
    let timesteps = sched.timestep_grid(cfg.n_sample_steps)?;
    samples
        .into_iter()
        .zip(prompts)
        .map(|(s, cond)| {
            let rewards = compute_rewards(&s.image, cond)?;
            Ok(Trajectory {
                cond: cond.clone(),
                vars: s.densities.iter().map(|d| d.var).collect(),
                old_log_density: s
                    .densities
                    .into_iter()
                    .map(|d| d.log_density_per_patch)
                    .collect(),
                states: s.states,
                timesteps: timesteps.clone(),
                final_image: s.image,
                rewards,
                value: vp.predict(cond)?,
                combined: None,
                advantage: None,
            })
        })
        .collect()
}

/// Normalise the batch rewards, subtract each trajectory's value estimate,
/// and store the results on the trajectories.
pub fn attach_advantages(
    trajectories: &mut [Trajectory],
    stats: &RunningStats,
    weights: [f64; 3],
) -> Result<Normalized> {
    let rewards: Vec<RewardVector> = trajectories.iter().map(|t| t.rewards).collect();
    let values: Vec<f64> = trajectories.iter().map(|t| t.value).collect();
    let n = normalize_and_combine(&rewards, &values, stats, weights)?;
    for (t, (c, a)) in trajectories
        .iter_mut()
        .zip(n.combined.iter().zip(&n.advantages))
    {
        t.combined = Some(*c);
        t.advantage = Some(*a);
    }
    Ok(n)
}

fn check_step(traj: &Trajectory, step: usize) -> Result<()> {
    ensure!(
        traj.states.len() == traj.old_log_density.len() + 1
            && traj.timesteps.len() == traj.states.len()
            && traj.vars.len() == traj.old_log_density.len(),
        Shape,
        "trajectory has {} states, {} times, {} densities",
        traj.states.len(),
        traj.timesteps.len(),
        traj.old_log_density.len()
    );
    ensure!(
        step < traj.old_log_density.len() && !traj.old_log_density[step].is_empty(),
        InvalidArgument,
        "step {step} has no recorded density"
    );
    Ok(())
}

/// Transition means for a batch of trajectories at one step, with the cache
/// and the per-element `d mean / d eps` (zero where the x0 estimate clipped).
struct StepMeans {
    means: Vec<Image>,
    cache: crate::denoiser::ForwardCache,
    dmean_deps: Array2<f64>,
}

fn step_means(
    params: &DenoiserParams,
    sched: &NoiseSchedule,
    trajs: &[&Trajectory],
    step: usize,
) -> Result<StepMeans> {
    let t = trajs[0].timesteps[step];
    let s = trajs[0].timesteps[step + 1];
    let sv = sched.at(t)?;
    let co = sched.posterior_coeffs(s, t)?;
    let xs: Vec<&Image> = trajs.iter().map(|tr| &tr.states[step]).collect();
    let conds: Vec<&Conditioning> = trajs.iter().map(|tr| &tr.cond).collect();
    let input = BatchInput::from_images(&params.config, &xs, &vec![sv.log_snr; xs.len()], &conds)?;
    let (eps, cache) = params.forward_cached(&input)?;
    let shape = xs[0].shape();
    let mut dmean_deps = Array2::zeros(eps.raw_dim());
    let mut means = Vec::with_capacity(xs.len());
    let slope = co.coef_x0 * (-sv.sigma / sv.alpha);
    for (i, x) in xs.iter().enumerate() {
        let mut mean = Vec::with_capacity(shape.len());
        for (j, (&xt, &e)) in x.data().iter().zip(eps.row(i)).enumerate() {
            let raw = (xt - sv.sigma * e) / sv.alpha;
            let x0 = raw.clamp(-1.0, 1.0);
            if raw.abs() < 1.0 {
                dmean_deps[(i, j)] = slope;
            }
            mean.push(co.coef_xt * xt + co.coef_x0 * x0);
        }
        means.push(Image::from_vec(shape, mean)?);
    }
    Ok(StepMeans {
        means,
        cache,
        dmean_deps,
    })
}

/// `exp(log p_theta(patch) - log p_old(patch))` for one step of a trajectory.
pub fn patch_ratio(
    params: &DenoiserParams,
    traj: &Trajectory,
    step: usize,
    patch: usize,
    patches: &PatchSpec,
    sched: &NoiseSchedule,
) -> Result<f64> {
    check_step(traj, step)?;
    let old = &traj.old_log_density[step];
    ensure!(
        patch < patches.n_patches(),
        InvalidArgument,
        "patch {patch} of {}",
        patches.n_patches()
    );
    let sm = step_means(params, sched, &[traj], step)?;
    let new = gaussian_log_density(
        &traj.states[step + 1],
        &sm.means[0],
        traj.vars[step],
        patches,
    )?;
    let old_total: f64 = old.iter().sum();
    let old_p = if patches.n_patches() == old.len() {
        old[patch]
    } else {
        ensure!(
            patches.n_patches() == 1,
            InvalidArgument,
            "patch spec has {} patches, the trajectory recorded {}",
            patches.n_patches(),
            old.len()
        );
        old_total
    };
    Ok((new[patch] - old_p).exp())
}

/// Surrogate value, gradient and diagnostics.
#[derive(Clone, Debug)]
pub struct PpoOutput {
    pub loss: f64,
    /// Gradient; zero outside the RL-trainable tensors.
    pub grad: DenoiserParams,
    /// Share of terms whose clipped branch was selected.
    pub clip_fraction: f64,
    pub mean_ratio: f64,
}

/// `-mean min(r A, clip(r, 1 - eps, 1 + eps) A)` over trajectories, scored
/// steps and patches, with its exact gradient.
pub fn ppo_loss_and_grad(
    params: &DenoiserParams,
    trajectories: &[Trajectory],
    cfg: &RlConfig,
    sched: &NoiseSchedule,
) -> Result<PpoOutput> {
    ensure!(!trajectories.is_empty(), InvalidArgument, "no trajectories");
    let res = params.config.resolution;
    cfg.validate(res)?;
    let patches = cfg.patch_spec(res)?;
    let np = patches.n_patches();
    let adv: Vec<f64> = trajectories
        .iter()
        .map(|t| {
            t.advantage
                .ok_or_else(|| Error::InvalidArgument("trajectory without an advantage".into()))
        })
        .collect::<Result<_>>()?;
    let steps = trajectories[0].old_log_density.len();
    for t in trajectories {
        ensure!(
            t.old_log_density.len() == steps && t.timesteps == trajectories[0].timesteps,
            Shape,
            "trajectories disagree on the time grid"
        );
        ensure!(
            t.old_log_density
                .iter()
                .all(|d| d.is_empty() || d.len() == np),
            Shape,
            "recorded densities do not match the patch grid"
        );
    }
    let scored: Vec<usize> = (0..steps)
        .filter(|&k| !trajectories[0].old_log_density[k].is_empty())
        .collect();
    let terms = (scored.len() * np * trajectories.len()) as f64;
    ensure!(terms > 0.0, InvalidArgument, "no scored transitions");
    let (lo, hi) = (1.0 - cfg.clip_epsilon, 1.0 + cfg.clip_epsilon);
    let channels = params.config.channels;
    let mut grad = params.without_ema().zeros_like();
    let mut loss = 0.0;
    let mut clipped = 0usize;
    let mut ratio_sum = 0.0;
    let refs: Vec<&Trajectory> = trajectories.iter().collect();
    for &k in &scored {
        let sm = step_means(params, sched, &refs, k)?;
        let mut d_out = Array2::zeros(sm.dmean_deps.raw_dim());
        let mut any = false;
        for (i, tr) in trajectories.iter().enumerate() {
            let var = tr.vars[k];
            let x_s = &tr.states[k + 1];
            let new = gaussian_log_density(x_s, &sm.means[i], var, &patches)?;
            let a = adv[i];
            let mut coef = vec![0.0; np];
            for p in 0..np {
                let r = (new[p] - tr.old_log_density[k][p]).exp();
                ensure!(r.is_finite(), NonFinite, "importance ratio at step {k}");
                ratio_sum += r;
                let plain = r * a;
                let clip = r.clamp(lo, hi) * a;
                if plain <= clip {
                    loss -= plain / terms;
                    coef[p] = -a * r / terms;
                } else {
                    loss -= clip / terms;
                    clipped += 1;
                }
            }
            for (j, (&xs, &m)) in x_s.data().iter().zip(sm.means[i].data()).enumerate() {
                let c = coef[patches.patch_of_pixel(j / channels)];
                if c != 0.0 {
                    // d log N(x_s; m, var) / d m = (x_s - m) / var
                    d_out[(i, j)] = c * (xs - m) / var * sm.dmean_deps[(i, j)];
                    any = true;
                }
            }
        }
        if any {
            let g = params.backward(&sm.cache, &d_out);
            for ((_, mut acc), (_, gk)) in grad.tensors_mut().into_iter().zip(g.tensors()) {
                acc += &gk;
            }
        }
    }
    for (name, mut t) in grad.tensors_mut() {
        if !is_rl_trainable(&name) {
            t.fill(0.0);
        }
    }
    ensure!(loss.is_finite(), NonFinite, "PPO loss");
    Ok(PpoOutput {
        loss,
        grad,
        clip_fraction: clipped as f64 / terms,
        mean_ratio: ratio_sum / terms,
    })
}

/// One line of the alignment log, written once per refresh.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RlMetrics {
    pub refresh: usize,
    pub mean_relevance: f64,
    pub mean_consistency: f64,
    pub mean_aesthetics: f64,
    /// Batch mean of the normalised weighted reward.
    pub combined: f64,
    pub value_mse: f64,
    pub ppo_loss: f64,
    pub clip_fraction: f64,
    /// Channels passed through unscaled because their running std was zero.
    pub unscaled: [bool; 3],
}

#[derive(Clone, Debug)]
pub struct RlOutcome {
    pub params: DenoiserParams,
    pub value: ValueParams,
    pub stats: RunningStats,
    pub metrics: Vec<RlMetrics>,
}

/// Called after every refresh with its metrics and the current weights.
pub type RefreshHook<'a> = dyn FnMut(&RlMetrics, &DenoiserParams) -> Result<()> + 'a;

/// Alternate rollouts under a frozen copy of the policy with `refresh_every`
/// Adam steps on the surrogate and value steps on the baseline.
pub fn rl_align(
    params: &DenoiserParams,
    vp: &ValueParams,
    sched: &NoiseSchedule,
    cfg: &RlConfig,
    prompt_pool: &[Conditioning],
    stream: &RngStream,
    hook: &mut RefreshHook<'_>,
) -> Result<RlOutcome> {
    cfg.validate(params.config.resolution)?;
    ensure!(
        !prompt_pool.is_empty(),
        InvalidArgument,
        "empty prompt pool"
    );
    ensure!(
        params.has_lora() || cfg.total_steps == 0,
        InvalidArgument,
        "attach LoRA adapters before RL alignment"
    );
    let adam = cfg.adam();
    let mut theta = params.without_ema();
    let frozen = theta.clone();
    let mut state = AdamState::new(&theta);
    let mut vp = vp.clone();
    let mut stats = RunningStats::default();
    let mut metrics = Vec::new();
    let refreshes = cfg.total_steps.div_ceil(cfg.refresh_every);
    for r in 0..refreshes {
        let mut rng = stream.fork("prompts").fork_index(r as u64).rng();
        let prompts: Vec<Conditioning> = (0..cfg.batch_trajectories)
            .map(|_| prompt_pool[rand::Rng::random_range(&mut rng, 0..prompt_pool.len())].clone())
            .collect();
        let old = theta.clone();
        let mut trajs = generate_trajectories(
            &old,
            sched,
            cfg,
            &prompts,
            &vp,
            &stream.fork("rollout").fork_index(r as u64),
        )?;
        let norm = attach_advantages(&mut trajs, &stats, cfg.reward_weights)?;
        stats = norm.stats.clone();
        let inner = cfg
            .refresh_every
            .min(cfg.total_steps - r * cfg.refresh_every);
        let conds: Vec<&Conditioning> = trajs.iter().map(|t| &t.cond).collect();
        let mut ppo_loss = 0.0;
        let mut clip_fraction = 0.0;
        let mut value_mse = 0.0;
        for _ in 0..inner {
            let out = ppo_loss_and_grad(&theta, &trajs, cfg, sched)?;
            ppo_loss += out.loss / inner as f64;
            clip_fraction += out.clip_fraction / inner as f64;
            let (p, st) = adam_step(&theta, &out.grad, &state, &adam)?;
            theta = p;
            state = st;
            let (v, mse) = value_update(&vp, &conds, &norm.combined, cfg.value_lr)?;
            vp = v;
            value_mse += mse / inner as f64;
        }
        for ((name, mut t), (_, f)) in theta.tensors_mut().into_iter().zip(frozen.tensors()) {
            if !is_rl_trainable(&name) {
                t.assign(&f);
            }
        }
        ensure!(
            theta.all_finite(),
            NonFinite,
            "policy weights after refresh {r}"
        );
        let mean = RewardVector::mean(&trajs.iter().map(|t| t.rewards).collect::<Vec<_>>());
        let m = RlMetrics {
            refresh: r,
            mean_relevance: mean.relevance,
            mean_consistency: mean.consistency,
            mean_aesthetics: mean.aesthetics,
            combined: norm.combined.iter().sum::<f64>() / norm.combined.len() as f64,
            value_mse,
            ppo_loss,
            clip_fraction,
            unscaled: norm.unscaled,
        };
        hook(&m, &theta)?;
        metrics.push(m);
    }
    let mut out = theta;
    out.ema = None;
    Ok(RlOutcome {
        params: out,
        value: vp,
        stats,
        metrics,
    })
}

/// Hook that ignores refreshes.
pub fn no_refresh_hook(_: &RlMetrics, _: &DenoiserParams) -> Result<()> {
    Ok(())
}
