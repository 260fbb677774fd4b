//! Conditional epsilon-prediction network for one cascade stage.
//!
//! The trunk is a stack of affine layers over flattened pixels. Every hidden
//! layer is modulated FiLM-style, `silu(a * (1 + scale(z)) + shift(z))`, where
//! `z` concatenates a sinusoidal embedding of the LogSNR with the condition
//! embedding (the mean of the caption's token embeddings, zero for the null
//! condition). Super-resolution stages see the upsampled low-resolution image
//! as extra input channels and apply the trunk tile by tile with shared
//! weights; the base stage uses a single tile covering the whole image.
//!
//! The trunk predicts a residual on top of the skip
//! `sigma / (alpha^2 v + sigma^2) * (x_t - alpha * m)`, the optimal linear
//! estimate when `x0 - m` has per-pixel variance `v`, applied separately to
//! the grey and chroma parts of each pixel and weighted by two learned gates
//! that start at zero. For super-resolution stages `m` is the upsampled
//! low-resolution input and `v` is fixed; for the base stage a small MLP on
//! the condition embedding produces `m` and the per-pixel variances.
//!
//! Gradients are written out by hand in [`network`].

mod network;

use ndarray::{Array1, Array2, ArrayViewD, ArrayViewMutD, Axis};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{ModelKind, TensorTable};
use crate::error::{ensure, Error, Result};
use crate::image::{Image, Shape};
use crate::params::ParamTable;
use crate::prompt::VOCAB_SIZE;
use crate::rng::{normal_vec, uniform, RngStream};
use crate::scheduler::{q_sample, NoiseSchedule};

pub use network::{BatchInput, ForwardCache};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Stage {
    Base,
    Sr1,
    Sr2,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::Base, Stage::Sr1, Stage::Sr2];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn kind(self) -> ModelKind {
        match self {
            Stage::Base => ModelKind::BaseStage,
            Stage::Sr1 => ModelKind::SrStage1,
            Stage::Sr2 => ModelKind::SrStage2,
        }
    }

    pub fn from_kind(kind: ModelKind) -> Result<Self> {
        match kind {
            ModelKind::BaseStage => Ok(Stage::Base),
            ModelKind::SrStage1 => Ok(Stage::Sr1),
            ModelKind::SrStage2 => Ok(Stage::Sr2),
            other => Err(Error::Format(format!("{other:?} is not a denoiser stage"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Stage::Base => "base",
            Stage::Sr1 => "sr1",
            Stage::Sr2 => "sr2",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(Stage::Base),
            "sr1" => Ok(Stage::Sr1),
            "sr2" => Ok(Stage::Sr2),
            other => Err(Error::InvalidArgument(format!(
                "unknown stage {other:?} (expected base, sr1 or sr2)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub stage: Stage,
    pub resolution: usize,
    pub channels: usize,
    /// Side of the square tile the trunk sees at once.
    pub tile: usize,
    pub text_conditioned: bool,
    pub hidden: Vec<usize>,
    pub cond_dim: usize,
    pub vocab: usize,
    pub time_freqs: usize,
    /// Hidden width of the condition-to-prior MLP; 0 disables it.
    pub template_hidden: usize,
    /// Super-resolution tiles see the low-resolution input over their own
    /// footprint widened by this many low-resolution pixels on every side.
    pub lowres_halo: usize,
    /// Per-pixel variance of the target around the skip reference, grey and
    /// chroma parts; the initial value when the template predicts it.
    pub skip_var: [f64; 2],
}

impl DenoiserConfig {
    /// Whole-image trunk; hidden width is `64 * width_mult`.
    pub fn base(resolution: usize, width_mult: usize) -> Self {
        Self {
            stage: Stage::Base,
            resolution,
            channels: 3,
            tile: resolution,
            text_conditioned: true,
            hidden: vec![64 * width_mult; 2],
            cond_dim: 24,
            vocab: VOCAB_SIZE,
            time_freqs: 8,
            template_hidden: 64,
            lowres_halo: 0,
            skip_var: [0.09, 0.028],
        }
    }

    pub fn super_resolution(stage: Stage, resolution: usize) -> Self {
        Self {
            stage,
            resolution,
            channels: 3,
            tile: resolution.min(8),
            text_conditioned: stage == Stage::Sr1,
            hidden: vec![128, 128],
            cond_dim: 16,
            vocab: VOCAB_SIZE,
            time_freqs: 8,
            template_hidden: 0,
            lowres_halo: 2,
            skip_var: [0.02, 0.005],
        }
    }

    pub fn is_super_resolution(&self) -> bool {
        self.stage != Stage::Base
    }

    pub fn image_shape(&self) -> Shape {
        Shape::square(self.resolution, self.channels)
    }

    pub fn tiles_per_side(&self) -> usize {
        self.resolution / self.tile
    }

    pub fn tiles(&self) -> usize {
        self.tiles_per_side() * self.tiles_per_side()
    }

    pub fn tile_out(&self) -> usize {
        self.tile * self.tile * self.channels
    }

    /// Side of the low-resolution window a super-resolution tile sees.
    pub fn lowres_window(&self) -> usize {
        self.tile / 2 + 2 * self.lowres_halo
    }

    pub fn tile_in(&self) -> usize {
        let w = self.lowres_window();
        self.tile_out()
            + if self.is_super_resolution() {
                w * w * self.channels
            } else {
                0
            }
    }

    pub fn film_in(&self) -> usize {
        2 * self.time_freqs + self.cond_dim
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.resolution > 0 && self.channels > 0 && self.tile > 0,
            InvalidArgument,
            "resolution, channels and tile must be positive"
        );
        ensure!(
            self.resolution.is_multiple_of(self.tile),
            InvalidArgument,
            "tile {} does not divide resolution {}",
            self.tile,
            self.resolution
        );
        ensure!(
            !self.hidden.is_empty() && self.hidden.iter().all(|&h| h > 0),
            InvalidArgument,
            "need at least one non-empty hidden layer"
        );
        ensure!(self.vocab > 0, InvalidArgument, "empty vocabulary");
        ensure!(
            !self.is_super_resolution()
                || (self.tile.is_multiple_of(2) && self.resolution.is_multiple_of(2)),
            InvalidArgument,
            "super-resolution needs an even tile and resolution"
        );
        ensure!(
            self.skip_var.iter().all(|v| *v > 0.0 && v.is_finite()),
            InvalidArgument,
            "skip_var must be finite and positive"
        );
        Ok(())
    }
}

/// What a stage is conditioned on.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Conditioning {
    pub tokens: Vec<u32>,
    /// Previous stage output upsampled to this stage's resolution.
    pub lowres: Option<Image>,
    /// Unconditional branch: the condition embedding is exactly zero.
    pub null: bool,
}

impl Conditioning {
    pub fn text(tokens: Vec<u32>) -> Self {
        Self {
            tokens,
            lowres: None,
            null: false,
        }
    }

    pub fn with_lowres(mut self, lowres: Image) -> Self {
        self.lowres = Some(lowres);
        self
    }

    pub fn as_null(&self) -> Self {
        Self {
            tokens: self.tokens.clone(),
            lowres: self.lowres.clone(),
            null: true,
        }
    }
}

/// Additive low-rank update `(scale / rank) * b @ a` on a layer weight.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter {
    pub a: Array2<f64>,
    pub b: Array2<f64>,
    pub scale: f64,
}

impl LoraAdapter {
    pub fn rank(&self) -> usize {
        self.a.nrows()
    }

    pub fn factor(&self) -> f64 {
        self.scale / self.rank() as f64
    }

    pub fn delta(&self) -> Array2<f64> {
        self.b.dot(&self.a) * self.factor()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    /// `out x in`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub lora: Option<LoraAdapter>,
}

impl Dense {
    pub fn effective_weight(&self) -> Array2<f64> {
        match &self.lora {
            Some(l) => &self.weight + &l.delta(),
            None => self.weight.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Film {
    pub scale_w: Array2<f64>,
    pub scale_b: Array1<f64>,
    pub shift_w: Array2<f64>,
    pub shift_b: Array1<f64>,
}

/// Condition embedding to the skip prior, `w2 @ silu(w1 @ c + b1) + b2`: a
/// mean image followed by per-pixel grey and chroma log-variances.
#[derive(Clone, Debug, PartialEq)]
pub struct Template {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserParams {
    pub config: DenoiserConfig,
    /// `vocab x cond_dim` token embeddings (the condition encoder).
    pub embed: Array2<f64>,
    /// Hidden layers followed by the output head.
    pub layers: Vec<Dense>,
    /// One modulation per hidden layer.
    pub films: Vec<Film>,
    pub template: Option<Template>,
    /// Learned weights of the grey and chroma skip paths, zero at init.
    pub skip_gate: Array1<f64>,
    pub ema: Option<Box<DenoiserParams>>,
}

fn gaussian(stream: &RngStream, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    let v = normal_vec(&mut stream.rng(), rows * cols);
    Array2::from_shape_vec((rows, cols), v).unwrap() * std
}

impl DenoiserParams {
    pub fn init(config: DenoiserConfig, stream: &RngStream) -> Result<Self> {
        config.validate()?;
        let embed = gaussian(&stream.fork("embed"), config.vocab, config.cond_dim, 1.0);
        let mut layers = Vec::new();
        let mut films = Vec::new();
        let mut fan_in = config.tile_in();
        let film_in = config.film_in();
        for (i, &width) in config.hidden.iter().enumerate() {
            let s = stream.fork("hidden").fork_index(i as u64);
            layers.push(Dense {
                weight: gaussian(&s.fork("w"), width, fan_in, (1.0 / fan_in as f64).sqrt()),
                bias: Array1::zeros(width),
                lora: None,
            });
            let fs = (0.1 / film_in as f64).sqrt();
            films.push(Film {
                scale_w: gaussian(&s.fork("film_scale"), width, film_in, fs),
                scale_b: Array1::zeros(width),
                shift_w: gaussian(&s.fork("film_shift"), width, film_in, fs),
                shift_b: Array1::zeros(width),
            });
            fan_in = width;
        }
        let out = config.tile_out();
        layers.push(Dense {
            weight: gaussian(
                &stream.fork("head"),
                out,
                fan_in,
                0.1 / (fan_in as f64).sqrt(),
            ),
            bias: Array1::zeros(out),
            lora: None,
        });
        let template = (config.template_hidden > 0).then(|| {
            let h = config.template_hidden;
            let d = config.image_shape().len();
            let npix = d / config.channels;
            let s = stream.fork("template");
            let mut b2 = Array1::zeros(d + 2 * npix);
            b2.slice_mut(ndarray::s![d..d + npix])
                .fill(config.skip_var[0].ln());
            b2.slice_mut(ndarray::s![d + npix..])
                .fill(config.skip_var[1].ln());
            Template {
                w1: gaussian(
                    &s.fork("w1"),
                    h,
                    config.cond_dim,
                    (1.0 / config.cond_dim as f64).sqrt(),
                ),
                b1: Array1::zeros(h),
                w2: gaussian(&s.fork("w2"), d + 2 * npix, h, 0.1 / (h as f64).sqrt()),
                b2,
            }
        });
        Ok(Self {
            config,
            embed,
            layers,
            films,
            template,
            skip_gate: Array1::zeros(2),
            ema: None,
        })
    }

    pub fn has_lora(&self) -> bool {
        self.layers.iter().any(|l| l.lora.is_some())
    }

    /// Attach rank-`rank` adapters to every trunk layer, `A` random, `B = 0`.
    pub fn attach_lora(&mut self, rank: usize, scale: f64, stream: &RngStream) -> Result<()> {
        ensure!(rank > 0, InvalidArgument, "LoRA rank must be positive");
        ensure!(
            !self.has_lora(),
            InvalidArgument,
            "adapters already attached"
        );
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let (out, inp) = layer.weight.dim();
            layer.lora = Some(LoraAdapter {
                a: gaussian(
                    &stream.fork("lora").fork_index(i as u64),
                    rank,
                    inp,
                    (1.0 / inp as f64).sqrt(),
                ),
                b: Array2::zeros((out, rank)),
                scale,
            });
        }
        Ok(())
    }

    /// Fold adapters into the base weights and drop them.
    pub fn lora_merge(&self) -> Result<DenoiserParams> {
        ensure!(
            self.has_lora(),
            InvalidArgument,
            "no LoRA adapters to merge"
        );
        let mut out = self.clone();
        for layer in &mut out.layers {
            if let Some(l) = layer.lora.take() {
                layer.weight = &layer.weight + &l.delta();
            }
        }
        Ok(out)
    }

    /// A copy without the EMA shadow.
    pub fn without_ema(&self) -> DenoiserParams {
        let mut p = self.clone();
        p.ema = None;
        p
    }

    /// Embedding of the token bag; zero for the null condition or for stages
    /// without text conditioning.
    pub fn cond_embedding(&self, cond: &Conditioning) -> Result<Array1<f64>> {
        let mut c = Array1::zeros(self.config.cond_dim);
        if cond.null || !self.config.text_conditioned || cond.tokens.is_empty() {
            return Ok(c);
        }
        for &t in &cond.tokens {
            ensure!(
                (t as usize) < self.config.vocab,
                InvalidArgument,
                "token {t} outside vocabulary of {}",
                self.config.vocab
            );
            c += &self.embed.row(t as usize);
        }
        c /= cond.tokens.len() as f64;
        Ok(c)
    }

    /// Epsilon prediction for a single image.
    pub fn forward(&self, x_t: &Image, log_snr: f64, cond: &Conditioning) -> Result<Image> {
        let input = BatchInput::from_images(&self.config, &[x_t], &[log_snr], &[cond])?;
        let out = self.predict(&input)?;
        Image::from_vec(x_t.shape(), out.row(0).to_vec())
    }

    /// Epsilon predictions for a batch, `B x D` in image layout.
    pub fn predict(&self, input: &BatchInput) -> Result<Array2<f64>> {
        Ok(self.forward_cached(input)?.0)
    }

    pub fn to_table(&self) -> TensorTable {
        let c = &self.config;
        let mut t = TensorTable::new(c.stage.kind());
        t.push_scalar("config.resolution", c.resolution as f64);
        t.push_scalar("config.channels", c.channels as f64);
        t.push_scalar("config.tile", c.tile as f64);
        t.push_scalar("config.text_conditioned", c.text_conditioned as u8 as f64);
        t.push_vec(
            "config.hidden",
            &c.hidden.iter().map(|&h| h as f64).collect::<Vec<_>>(),
        );
        t.push_scalar("config.cond_dim", c.cond_dim as f64);
        t.push_scalar("config.vocab", c.vocab as f64);
        t.push_scalar("config.time_freqs", c.time_freqs as f64);
        t.push_scalar("config.template_hidden", c.template_hidden as f64);
        t.push_scalar("config.lowres_halo", c.lowres_halo as f64);
        t.push_vec("config.skip_var", &c.skip_var);
        for (name, view) in self.tensors() {
            t.push(name, view.to_owned());
        }
        for (i, l) in self.layers.iter().enumerate() {
            if let Some(lora) = &l.lora {
                t.push_scalar(format!("trunk.{i}.lora_scale"), lora.scale);
            }
        }
        if let Some(ema) = &self.ema {
            for (name, view) in ema.tensors() {
                t.push(format!("ema.{name}"), view.to_owned());
            }
        }
        t
    }

    pub fn from_table(t: &TensorTable) -> Result<Self> {
        let stage = Stage::from_kind(t.kind)?;
        let config = DenoiserConfig {
            stage,
            resolution: t.usize("config.resolution")?,
            channels: t.usize("config.channels")?,
            tile: t.usize("config.tile")?,
            text_conditioned: t.scalar("config.text_conditioned")? != 0.0,
            hidden: t
                .vec("config.hidden")?
                .iter()
                .map(|&h| h as usize)
                .collect(),
            cond_dim: t.usize("config.cond_dim")?,
            vocab: t.usize("config.vocab")?,
            time_freqs: t.usize("config.time_freqs")?,
            template_hidden: t.usize("config.template_hidden")?,
            lowres_halo: t.usize("config.lowres_halo")?,
            skip_var: {
                let v = t.vec("config.skip_var")?;
                ensure!(v.len() == 2, Format, "skip_var needs two entries");
                [v[0], v[1]]
            },
        };
        let mut p = DenoiserParams::init(config, &RngStream::new(0))?;
        for (i, layer) in p.layers.iter_mut().enumerate() {
            if t.contains(&format!("trunk.{i}.lora_a")) {
                let (out, inp) = layer.weight.dim();
                let a = t.get(&format!("trunk.{i}.lora_a"))?;
                let rank = a.shape()[0];
                layer.lora = Some(LoraAdapter {
                    a: Array2::zeros((rank, inp)),
                    b: Array2::zeros((out, rank)),
                    scale: t.scalar(&format!("trunk.{i}.lora_scale"))?,
                });
            }
        }
        let has_ema = t.tensors.iter().any(|(n, _)| n.starts_with("ema."));
        load_tensors(&mut p, t, "")?;
        if has_ema {
            let mut e = p.without_ema();
            load_tensors(&mut e, t, "ema.")?;
            p.ema = Some(Box::new(e));
        }
        ensure!(p.all_finite(), NonFinite, "checkpoint weights");
        Ok(p)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        self.to_table().save(path)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_table(&TensorTable::load(path)?)
    }
}

fn load_tensors(p: &mut DenoiserParams, t: &TensorTable, prefix: &str) -> Result<()> {
    for (name, mut dst) in p.tensors_mut() {
        let src = t.get(&format!("{prefix}{name}"))?;
        ensure!(
            src.shape() == dst.shape(),
            Shape,
            "tensor {name}: stored {:?}, expected {:?}",
            src.shape(),
            dst.shape()
        );
        dst.assign(src);
    }
    Ok(())
}

impl ParamTable for DenoiserParams {
    fn tensors(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        let mut v = vec![("embed".to_string(), self.embed.view().into_dyn())];
        for (i, l) in self.layers.iter().enumerate() {
            v.push((format!("trunk.{i}.weight"), l.weight.view().into_dyn()));
            v.push((format!("trunk.{i}.bias"), l.bias.view().into_dyn()));
            if let Some(lora) = &l.lora {
                v.push((format!("trunk.{i}.lora_a"), lora.a.view().into_dyn()));
                v.push((format!("trunk.{i}.lora_b"), lora.b.view().into_dyn()));
            }
        }
        for (i, f) in self.films.iter().enumerate() {
            v.push((format!("film.{i}.scale_w"), f.scale_w.view().into_dyn()));
            v.push((format!("film.{i}.scale_b"), f.scale_b.view().into_dyn()));
            v.push((format!("film.{i}.shift_w"), f.shift_w.view().into_dyn()));
            v.push((format!("film.{i}.shift_b"), f.shift_b.view().into_dyn()));
        }
        if let Some(t) = &self.template {
            v.push(("template.w1".to_string(), t.w1.view().into_dyn()));
            v.push(("template.b1".to_string(), t.b1.view().into_dyn()));
            v.push(("template.w2".to_string(), t.w2.view().into_dyn()));
            v.push(("template.b2".to_string(), t.b2.view().into_dyn()));
        }
        v.push(("skip_gate".to_string(), self.skip_gate.view().into_dyn()));
        v
    }

    fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)> {
        let mut v = vec![("embed".to_string(), self.embed.view_mut().into_dyn())];
        for (i, l) in self.layers.iter_mut().enumerate() {
            v.push((format!("trunk.{i}.weight"), l.weight.view_mut().into_dyn()));
            v.push((format!("trunk.{i}.bias"), l.bias.view_mut().into_dyn()));
            if let Some(lora) = &mut l.lora {
                v.push((format!("trunk.{i}.lora_a"), lora.a.view_mut().into_dyn()));
                v.push((format!("trunk.{i}.lora_b"), lora.b.view_mut().into_dyn()));
            }
        }
        for (i, f) in self.films.iter_mut().enumerate() {
            v.push((format!("film.{i}.scale_w"), f.scale_w.view_mut().into_dyn()));
            v.push((format!("film.{i}.scale_b"), f.scale_b.view_mut().into_dyn()));
            v.push((format!("film.{i}.shift_w"), f.shift_w.view_mut().into_dyn()));
            v.push((format!("film.{i}.shift_b"), f.shift_b.view_mut().into_dyn()));
        }
        if let Some(t) = &mut self.template {
            v.push(("template.w1".to_string(), t.w1.view_mut().into_dyn()));
            v.push(("template.b1".to_string(), t.b1.view_mut().into_dyn()));
            v.push(("template.w2".to_string(), t.w2.view_mut().into_dyn()));
            v.push(("template.b2".to_string(), t.b2.view_mut().into_dyn()));
        }
        v.push((
            "skip_gate".to_string(),
            self.skip_gate.view_mut().into_dyn(),
        ));
        v
    }
}

/// Tensors that RL alignment is allowed to move.
pub fn is_rl_trainable(name: &str) -> bool {
    name == "embed" || name.contains(".lora_")
}

/// `e' = decay * e + (1 - decay) * p` for every trainable tensor.
pub fn ema_update(
    ema: &DenoiserParams,
    params: &DenoiserParams,
    decay: f64,
) -> Result<DenoiserParams> {
    ensure!(
        (0.0..=1.0).contains(&decay),
        InvalidArgument,
        "EMA decay {decay} outside [0, 1]"
    );
    let mut out = ema.clone();
    let src = params.tensors();
    let dst = out.tensors_mut();
    ensure!(
        dst.len() == src.len(),
        Shape,
        "EMA and parameter tables differ"
    );
    for ((dn, mut d), (sn, s)) in dst.into_iter().zip(src) {
        ensure!(
            dn == sn && d.shape() == s.shape(),
            Shape,
            "EMA tensor {dn} vs {sn}"
        );
        if decay == 0.0 {
            d.assign(&s);
        } else {
            // incremental form keeps a converged shadow bit-exact
            d.zip_mut_with(&s, |e, &p| *e += (1.0 - decay) * (p - *e));
        }
    }
    Ok(out)
}

/// One training example for a stage.
#[derive(Clone, Debug)]
pub struct TrainExample {
    pub x0: Image,
    pub cond: Conditioning,
}

/// Per-example draws of the denoising objective.
#[derive(Clone, Debug)]
pub struct NoiseDraw {
    pub t: f64,
    pub noise: Vec<f64>,
}

pub fn draw_noise(
    sched: &NoiseSchedule,
    dim: usize,
    n: usize,
    stream: &RngStream,
) -> Vec<NoiseDraw> {
    let mut rng = stream.rng();
    (0..n)
        .map(|_| {
            let t = sched.t_min + (sched.t_max - sched.t_min) * uniform(&mut rng);
            NoiseDraw {
                t,
                noise: normal_vec(&mut rng, dim),
            }
        })
        .collect()
}

/// Mean over the batch of `|eps - eps_hat|^2 / D`, and its exact gradient.
pub fn loss_and_grad(
    params: &DenoiserParams,
    batch: &[TrainExample],
    sched: &NoiseSchedule,
    stream: &RngStream,
) -> Result<(f64, DenoiserParams)> {
    ensure!(!batch.is_empty(), InvalidArgument, "empty batch");
    let draws = draw_noise(
        sched,
        params.config.image_shape().len(),
        batch.len(),
        stream,
    );
    loss_and_grad_with(params, batch, sched, &draws)
}

pub fn loss_and_grad_with(
    params: &DenoiserParams,
    batch: &[TrainExample],
    sched: &NoiseSchedule,
    draws: &[NoiseDraw],
) -> Result<(f64, DenoiserParams)> {
    ensure!(!batch.is_empty(), InvalidArgument, "empty batch");
    ensure!(
        draws.len() == batch.len(),
        Shape,
        "one noise draw per example"
    );
    let shape = params.config.image_shape();
    let mut xts = Vec::with_capacity(batch.len());
    let mut snrs = Vec::with_capacity(batch.len());
    for (ex, draw) in batch.iter().zip(draws) {
        ensure!(
            ex.x0.shape() == shape,
            Shape,
            "example {} vs stage {shape}",
            ex.x0.shape()
        );
        let sv = sched.at(draw.t)?;
        let noise = Image::from_vec(shape, draw.noise.clone())?;
        xts.push(q_sample(&sv, &ex.x0, &noise)?);
        snrs.push(sv.log_snr);
    }
    let xrefs: Vec<&Image> = xts.iter().collect();
    let crefs: Vec<&Conditioning> = batch.iter().map(|e| &e.cond).collect();
    let input = BatchInput::from_images(&params.config, &xrefs, &snrs, &crefs)?;
    let (pred, cache) = params.forward_cached(&input)?;
    let noise: Vec<&[f64]> = draws.iter().map(|d| d.noise.as_slice()).collect();
    let (loss, d_out) = eps_mse(&pred, &noise)?;
    let grad = params.backward(&cache, &d_out);
    Ok((loss, grad))
}

/// The epsilon-MSE on predictions `B x D`, with its gradient w.r.t. them.
pub fn eps_mse(pred: &Array2<f64>, noise: &[&[f64]]) -> Result<(f64, Array2<f64>)> {
    let (b, d) = pred.dim();
    ensure!(
        noise.len() == b,
        Shape,
        "{} noise rows for {b} predictions",
        noise.len()
    );
    let mut d_out = Array2::zeros((b, d));
    let mut loss = 0.0;
    let norm = 1.0 / (d * b) as f64;
    for (i, eps) in noise.iter().enumerate() {
        ensure!(
            eps.len() == d,
            Shape,
            "noise row of {} for width {d}",
            eps.len()
        );
        let row = pred.row(i);
        let mut drow = d_out.row_mut(i);
        for j in 0..d {
            let diff = row[j] - eps[j];
            loss += diff * diff;
            drow[j] = 2.0 * diff * norm;
        }
    }
    loss *= norm;
    ensure!(loss.is_finite(), NonFinite, "denoising loss");
    Ok((loss, d_out))
}

/// Sum of each column block; helper shared by the network code.
pub(crate) fn column_sums(m: &Array2<f64>) -> Array1<f64> {
    m.sum_axis(Axis(0))
}

#[cfg(test)]
mod tests;
