//! Ancestral sampling for one stage and for the three-stage cascade.
//!
//! Every image in a batch owns its random stream, so a sample does not depend
//! on which other images share its batch.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::denoiser::{BatchInput, Conditioning, DenoiserConfig, DenoiserParams, Stage};
use crate::error::{ensure, Result};
use crate::image::{Image, PatchSpec, Shape};
use crate::rng::{normal_vec, RngStream};
use crate::scheduler::{eps_to_x0, NoiseSchedule};

/// Anything that predicts epsilon for a batch of noisy images.
pub trait EpsModel {
    fn denoiser_config(&self) -> &DenoiserConfig;

    fn predict(&self, input: &BatchInput) -> Result<Array2<f64>>;
}

impl EpsModel for DenoiserParams {
    fn denoiser_config(&self) -> &DenoiserConfig {
        &self.config
    }

    fn predict(&self, input: &BatchInput) -> Result<Array2<f64>> {
        DenoiserParams::predict(self, input)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CascadeConfig {
    pub resolutions: [usize; 3],
    pub steps_per_stage: [usize; 3],
    pub guidance_scale: [f64; 3],
    pub clip_x0: bool,
}

impl Default for CascadeConfig {
    fn default() -> Self {
        Self {
            resolutions: [8, 16, 32],
            steps_per_stage: [32; 3],
            guidance_scale: [2.0, 1.0, 1.0],
            clip_x0: true,
        }
    }
}

impl CascadeConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.resolutions[0] > 0,
            InvalidArgument,
            "resolution must be positive"
        );
        for k in 1..3 {
            ensure!(
                self.resolutions[k] == 2 * self.resolutions[k - 1],
                InvalidArgument,
                "resolution {} does not double {}",
                self.resolutions[k],
                self.resolutions[k - 1]
            );
        }
        ensure!(
            self.steps_per_stage.iter().all(|&s| s >= 1),
            InvalidArgument,
            "every stage needs at least one step"
        );
        ensure!(
            self.guidance_scale.iter().all(|g| g.is_finite()),
            InvalidArgument,
            "non-finite guidance scale"
        );
        Ok(())
    }

    pub fn stage_options(&self, stage: Stage) -> StageOptions {
        let k = stage.index();
        StageOptions {
            steps: self.steps_per_stage[k],
            guidance: self.guidance_scale[k],
            clip_x0: self.clip_x0,
            patch: None,
            keep_states: false,
        }
    }
}

/// Knobs of a single-stage sampling run.
#[derive(Clone, Debug)]
pub struct StageOptions {
    pub steps: usize,
    pub guidance: f64,
    pub clip_x0: bool,
    /// Partition used to split transition log-densities; whole image if unset.
    pub patch: Option<PatchSpec>,
    /// Keep every intermediate state (needed by policy-gradient training).
    pub keep_states: bool,
}

impl Default for StageOptions {
    fn default() -> Self {
        Self {
            steps: 32,
            guidance: 1.0,
            clip_x0: true,
            patch: None,
            keep_states: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransitionDensity {
    pub step_index: usize,
    pub mean: Image,
    pub var: f64,
    /// Empty for the final, noise-free step.
    pub log_density_per_patch: Vec<f64>,
}

impl TransitionDensity {
    pub fn total(&self) -> f64 {
        self.log_density_per_patch.iter().sum()
    }
}

#[derive(Clone, Debug)]
pub struct StageSample {
    pub image: Image,
    pub densities: Vec<TransitionDensity>,
    /// `x` at every grid time, starting from the initial noise; empty unless
    /// requested.
    pub states: Vec<Image>,
}

/// Log-density of `x` under `N(mean, var I)`, summed per patch.
pub fn gaussian_log_density(
    x: &Image,
    mean: &Image,
    var: f64,
    patch: &PatchSpec,
) -> Result<Vec<f64>> {
    x.ensure_same_shape(mean, "gaussian_log_density")?;
    ensure!(
        var > 0.0,
        InvalidArgument,
        "variance {var} must be positive"
    );
    ensure!(
        patch.matches(x.shape()),
        Shape,
        "patch spec does not cover {}",
        x.shape()
    );
    let half_log = 0.5 * (2.0 * std::f64::consts::PI * var).ln();
    let per: Vec<f64> = x
        .data()
        .iter()
        .zip(mean.data())
        .map(|(a, m)| -half_log - (a - m) * (a - m) / (2.0 * var))
        .collect();
    Ok(patch.reduce(x.shape().channels, &per))
}

/// `eps_u + scale * (eps_c - eps_u)`, one row per image.
pub fn guided_eps_batch<M: EpsModel + ?Sized>(
    model: &M,
    input: &BatchInput,
    scale: f64,
) -> Result<Array2<f64>> {
    if scale == 1.0 {
        return model.predict(input);
    }
    let mut uncond = input.clone();
    uncond.null = vec![true; input.len()];
    if scale == 0.0 {
        return model.predict(&uncond);
    }
    let eps_c = model.predict(input)?;
    let eps_u = model.predict(&uncond)?;
    Ok(&eps_u + &((&eps_c - &eps_u) * scale))
}

pub fn guided_eps<M: EpsModel + ?Sized>(
    model: &M,
    x_t: &Image,
    log_snr: f64,
    cond: &Conditioning,
    scale: f64,
) -> Result<Image> {
    let input = BatchInput::from_images(model.denoiser_config(), &[x_t], &[log_snr], &[cond])?;
    let out = guided_eps_batch(model, &input, scale)?;
    Image::from_vec(x_t.shape(), out.row(0).to_vec())
}

/// One reverse transition from `t` to `s` for a single image.
#[allow(clippy::too_many_arguments)]
pub fn p_sample_step<M: EpsModel + ?Sized>(
    model: &M,
    sched: &NoiseSchedule,
    x_t: &Image,
    t: f64,
    s: f64,
    cond: &Conditioning,
    opts: &StageOptions,
    step_index: usize,
    stream: &RngStream,
) -> Result<(Image, TransitionDensity)> {
    let mut rng = stream.rng();
    let mut out = step_batch(
        model,
        sched,
        std::slice::from_ref(x_t),
        t,
        s,
        &[cond],
        opts,
        step_index,
        &mut [&mut rng],
    )?;
    Ok(out.pop().unwrap())
}

#[allow(clippy::too_many_arguments)]
fn step_batch<M: EpsModel + ?Sized, R: rand::Rng>(
    model: &M,
    sched: &NoiseSchedule,
    xs: &[Image],
    t: f64,
    s: f64,
    conds: &[&Conditioning],
    opts: &StageOptions,
    step_index: usize,
    rngs: &mut [&mut R],
) -> Result<Vec<(Image, TransitionDensity)>> {
    ensure!(
        s < t,
        InvalidArgument,
        "reverse step needs s < t, got s={s} t={t}"
    );
    let sv = sched.at(t)?;
    let xrefs: Vec<&Image> = xs.iter().collect();
    let snrs = vec![sv.log_snr; xs.len()];
    let input = BatchInput::from_images(model.denoiser_config(), &xrefs, &snrs, conds)?;
    let eps = guided_eps_batch(model, &input, opts.guidance)?;
    let final_step = s <= sched.t_min;
    let coeffs = sched.posterior_coeffs(s, t)?;
    let var = if final_step { 0.0 } else { coeffs.var };
    let shape = xs[0].shape();
    let patch = match &opts.patch {
        Some(p) => p.clone(),
        None => PatchSpec::whole(shape.height, shape.width),
    };
    let mut out = Vec::with_capacity(xs.len());
    for (i, x_t) in xs.iter().enumerate() {
        let eps_i = Image::from_vec(shape, eps.row(i).to_vec())?;
        let x0_hat = eps_to_x0(&sv, x_t, &eps_i, opts.clip_x0)?;
        let (mean, _) = sched.posterior_params(x_t, &x0_hat, s, t)?;
        let (x_s, log_density_per_patch) = if final_step {
            (mean.clone(), Vec::new())
        } else {
            let z = normal_vec(&mut *rngs[i], shape.len());
            let sd = var.sqrt();
            let data = mean
                .data()
                .iter()
                .zip(&z)
                .map(|(m, z)| m + sd * z)
                .collect();
            let x_s = Image::from_vec(shape, data)?;
            let ld = gaussian_log_density(&x_s, &mean, var, &patch)?;
            (x_s, ld)
        };
        ensure!(
            x_s.is_finite(),
            NonFinite,
            "sampling state at step {step_index}"
        );
        out.push((
            x_s,
            TransitionDensity {
                step_index,
                mean,
                var,
                log_density_per_patch,
            },
        ));
    }
    Ok(out)
}

/// Sample a batch of images for one stage, one stream per image.
pub fn sample_stage_batch<M: EpsModel + ?Sized>(
    model: &M,
    sched: &NoiseSchedule,
    opts: &StageOptions,
    conds: &[Conditioning],
    streams: &[RngStream],
) -> Result<Vec<StageSample>> {
    ensure!(
        conds.len() == streams.len(),
        Shape,
        "{} conditions for {} streams",
        conds.len(),
        streams.len()
    );
    let config = model.denoiser_config();
    for c in conds {
        ensure!(
            c.lowres.is_some() == config.is_super_resolution(),
            InvalidArgument,
            "low-resolution input must be given exactly for super-resolution stages"
        );
    }
    if conds.is_empty() {
        return Ok(Vec::new());
    }
    let shape = config.image_shape();
    let grid = sched.timestep_grid(opts.steps)?;
    let mut rngs: Vec<_> = streams.iter().map(|s| s.rng()).collect();
    let mut xs: Vec<Image> = rngs
        .iter_mut()
        .map(|r| Image::from_vec(shape, normal_vec(r, shape.len())))
        .collect::<Result<_>>()?;
    let n = xs.len();
    let mut densities: Vec<Vec<TransitionDensity>> = vec![Vec::with_capacity(opts.steps); n];
    let mut states: Vec<Vec<Image>> = vec![Vec::new(); n];
    if opts.keep_states {
        for (st, x) in states.iter_mut().zip(&xs) {
            st.push(x.clone());
        }
    }
    let crefs: Vec<&Conditioning> = conds.iter().collect();
    for k in 0..opts.steps {
        let mut rng_refs: Vec<&mut _> = rngs.iter_mut().collect();
        let stepped = step_batch(
            model,
            sched,
            &xs,
            grid[k],
            grid[k + 1],
            &crefs,
            opts,
            k,
            &mut rng_refs,
        )?;
        for (i, (x, td)) in stepped.into_iter().enumerate() {
            if opts.keep_states {
                states[i].push(x.clone());
            }
            densities[i].push(td);
            xs[i] = x;
        }
    }
    Ok(xs
        .into_iter()
        .zip(densities)
        .zip(states)
        .map(|((x, densities), states)| StageSample {
            image: x.clamp(-1.0, 1.0),
            densities,
            states,
        })
        .collect())
}

pub fn sample_stage<M: EpsModel + ?Sized>(
    model: &M,
    sched: &NoiseSchedule,
    opts: &StageOptions,
    cond: &Conditioning,
    stream: &RngStream,
) -> Result<(Image, Vec<TransitionDensity>)> {
    let mut out = sample_stage_batch(
        model,
        sched,
        opts,
        std::slice::from_ref(cond),
        std::slice::from_ref(stream),
    )?;
    let s = out.pop().unwrap();
    Ok((s.image, s.densities))
}

/// A block of the cascade: produces images of one resolution from a text
/// condition and, for super-resolution blocks, the previous output.
pub trait CascadeStage {
    fn stage(&self) -> Stage;

    fn shape(&self) -> Shape;

    fn generate(
        &self,
        sched: &NoiseSchedule,
        opts: &StageOptions,
        conds: &[Conditioning],
        streams: &[RngStream],
    ) -> Result<Vec<Image>>;
}

impl CascadeStage for DenoiserParams {
    fn stage(&self) -> Stage {
        self.config.stage
    }

    fn shape(&self) -> Shape {
        self.config.image_shape()
    }

    fn generate(
        &self,
        sched: &NoiseSchedule,
        opts: &StageOptions,
        conds: &[Conditioning],
        streams: &[RngStream],
    ) -> Result<Vec<Image>> {
        Ok(sample_stage_batch(self, sched, opts, conds, streams)?
            .into_iter()
            .map(|s| s.image)
            .collect())
    }
}

/// Base sample followed by two super-resolution hops.
pub fn sample_cascade_batch(
    models: [&dyn CascadeStage; 3],
    sched: &NoiseSchedule,
    config: &CascadeConfig,
    tokens: &[Vec<u32>],
    streams: &[RngStream],
) -> Result<Vec<Image>> {
    config.validate()?;
    for (k, m) in models.iter().enumerate() {
        ensure!(
            m.stage() == Stage::ALL[k],
            InvalidArgument,
            "slot {k} holds a {} model",
            m.stage().name()
        );
        ensure!(
            m.shape().height == config.resolutions[k],
            Shape,
            "{} model is {} but the cascade expects side {}",
            m.stage().name(),
            m.shape(),
            config.resolutions[k]
        );
    }
    let mut images: Vec<Image> = Vec::new();
    for (k, m) in models.iter().enumerate() {
        let stage = Stage::ALL[k];
        let conds: Vec<Conditioning> = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let c = Conditioning::text(t.clone());
                if k == 0 {
                    c
                } else {
                    c.with_lowres(images[i].upsample_nearest(2))
                }
            })
            .collect();
        let sub: Vec<RngStream> = streams.iter().map(|s| s.fork(stage.name())).collect();
        images = m.generate(sched, &config.stage_options(stage), &conds, &sub)?;
    }
    Ok(images)
}

pub fn sample_cascade(
    models: [&dyn CascadeStage; 3],
    sched: &NoiseSchedule,
    config: &CascadeConfig,
    tokens: &[u32],
    stream: &RngStream,
) -> Result<Image> {
    let mut out = sample_cascade_batch(
        models,
        sched,
        config,
        &[tokens.to_vec()],
        std::slice::from_ref(stream),
    )?;
    Ok(out.pop().unwrap())
}

/// The three released stage models with their sampling configuration.
#[derive(Clone, Debug)]
pub struct Cascade {
    pub models: [DenoiserParams; 3],
    pub sched: NoiseSchedule,
    pub config: CascadeConfig,
}

impl Cascade {
    pub fn sample_batch(&self, tokens: &[Vec<u32>], streams: &[RngStream]) -> Result<Vec<Image>> {
        let [a, b, c] = &self.models;
        sample_cascade_batch([a, b, c], &self.sched, &self.config, tokens, streams)
    }
}

#[cfg(test)]
mod tests;
