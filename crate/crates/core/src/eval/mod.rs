//! Side-by-side evaluation: vote aggregation, simulated judges, the paired
//! comparison harness, checkpoint sweeps and the directional studies.

mod stats;
mod studies;
mod sweep;

pub use stats::{
    binomial_two_sided, correlation_report, ranks, wilson_interval, Correlation, EXACT_LIMIT,
};
pub use studies::{
    quality_study, scaling_study, steps_to_threshold, transfer_study, QualityArm, QualityStudy,
    ScalingPoint, StudyConfig, TransferPoint,
};
pub use sweep::{
    read_sweep_csv, summarize_sweep, sweep_harness, write_sweep_csv, SweepPoint, SweepRow,
};

use serde::{Deserialize, Serialize};

use crate::cascade::{sample_stage_batch, Cascade, StageOptions};
use crate::denoiser::{Conditioning, DenoiserParams};
use crate::error::{ensure, Result};
use crate::image::Image;
use crate::rl::compute_rewards;
use crate::rng::{normal, normal_vec, RngStream};

/// Significance level of the paired test.
pub const ALPHA: f64 = 0.05;
/// Assessors per pair.
pub const ASSESSORS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Vote {
    A,
    B,
    Tie,
}

impl Vote {
    pub fn swapped(self) -> Vote {
        match self {
            Vote::A => Vote::B,
            Vote::B => Vote::A,
            Vote::Tie => Vote::Tie,
        }
    }
}

/// Which criterion decided an assessor's vote.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Criterion {
    Defects,
    Relevance,
    Aesthetics,
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VoteRecord {
    pub pair_id: u64,
    pub prompt_id: u64,
    pub assessor_votes: Vec<Vote>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub criterion_trace: Option<Vec<Criterion>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Point {
    A,
    B,
    None,
}

/// The side with strictly more of the three votes gets the point.
pub fn aggregate_pair(v: &VoteRecord) -> Result<Point> {
    ensure!(
        v.assessor_votes.len() == ASSESSORS,
        InvalidArgument,
        "pair {} has {} votes, expected {ASSESSORS}",
        v.pair_id,
        v.assessor_votes.len()
    );
    let a = v.assessor_votes.iter().filter(|&&x| x == Vote::A).count();
    let b = v.assessor_votes.iter().filter(|&&x| x == Vote::B).count();
    Ok(match a.cmp(&b) {
        std::cmp::Ordering::Greater => Point::A,
        std::cmp::Ordering::Less => Point::B,
        std::cmp::Ordering::Equal => Point::None,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SbsResult {
    pub wins_a: u64,
    pub wins_b: u64,
    pub ties: u64,
    /// Share of decisive pairs won by A; 0.5 when none were decisive.
    pub win_rate_a: f64,
    pub p_value: f64,
    pub significant: bool,
    /// 95% Wilson interval of the win rate.
    pub ci_low: f64,
    pub ci_high: f64,
}

impl SbsResult {
    pub fn from_points(points: &[Point]) -> Result<Self> {
        let count = |p: Point| points.iter().filter(|&&x| x == p).count() as u64;
        let (wins_a, wins_b, ties) = (count(Point::A), count(Point::B), count(Point::None));
        let n = wins_a + wins_b;
        let (win_rate_a, p_value) = if n == 0 {
            (0.5, 1.0)
        } else {
            (
                wins_a as f64 / n as f64,
                binomial_two_sided(wins_a, wins_b)?,
            )
        };
        let (ci_low, ci_high) = wilson_interval(wins_a, n, 1.959963984540054);
        Ok(Self {
            wins_a,
            wins_b,
            ties,
            win_rate_a,
            p_value,
            significant: p_value < ALPHA,
            ci_low,
            ci_high,
        })
    }

    pub fn pairs(&self) -> u64 {
        self.wins_a + self.wins_b + self.ties
    }
}

/// Simulated assessor pool.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JudgeConfig {
    /// Assessor noise per criterion, in units of `scale`.
    pub noise_sigma: f64,
    /// Indifference band per criterion, in units of `scale`.
    pub band: f64,
    /// Spread of each criterion score (defects, relevance, aesthetics) over a
    /// reference corpus.
    pub scale: [f64; 3],
}

impl JudgeConfig {
    /// Scales measured as the population std of each score over `images`,
    /// each scored against its own caption.
    pub fn calibrate(images: &[(Image, Conditioning)], noise_sigma: f64) -> Result<Self> {
        ensure!(
            images.len() >= 2,
            InvalidArgument,
            "judge calibration needs at least two images"
        );
        let scores: Vec<[f64; 3]> = images
            .iter()
            .map(|(img, c)| criterion_scores(img, c))
            .collect::<Result<_>>()?;
        let n = scores.len() as f64;
        let mut scale = [0.0; 3];
        for (k, s) in scale.iter_mut().enumerate() {
            let m = scores.iter().map(|v| v[k]).sum::<f64>() / n;
            let var = scores.iter().map(|v| (v[k] - m).powi(2)).sum::<f64>() / n;
            *s = var.sqrt();
        }
        let cfg = Self {
            noise_sigma,
            band: 0.1,
            scale,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.noise_sigma >= 0.0
                && self.noise_sigma.is_finite()
                && self.band >= 0.0
                && self.band.is_finite(),
            InvalidArgument,
            "judge noise and band must be finite and non-negative"
        );
        ensure!(
            self.scale.iter().all(|s| *s > 0.0 && s.is_finite()),
            InvalidArgument,
            "criterion scales {:?} must be positive",
            self.scale
        );
        Ok(())
    }

    pub fn noiseless(&self) -> Self {
        Self {
            noise_sigma: 0.0,
            ..self.clone()
        }
    }
}

/// Defects, relevance and aesthetics scores, higher is better.
pub fn criterion_scores(img: &Image, cond: &Conditioning) -> Result<[f64; 3]> {
    let r = compute_rewards(img, cond)?;
    Ok([r.consistency, r.relevance, r.aesthetics])
}

const ORDER: [Criterion; 3] = [
    Criterion::Defects,
    Criterion::Relevance,
    Criterion::Aesthetics,
];

/// Lexicographic comparison by one assessor: the first criterion whose noisy
/// score difference leaves the indifference band decides.
pub fn simulated_judge(
    a: &Image,
    b: &Image,
    cond: &Conditioning,
    cfg: &JudgeConfig,
    stream: &RngStream,
) -> Result<(Vote, Criterion)> {
    a.ensure_same_shape(b, "simulated_judge")?;
    let (sa, sb) = (criterion_scores(a, cond)?, criterion_scores(b, cond)?);
    judge_scores(&sa, &sb, cfg, stream)
}

fn judge_scores(
    sa: &[f64; 3],
    sb: &[f64; 3],
    cfg: &JudgeConfig,
    stream: &RngStream,
) -> Result<(Vote, Criterion)> {
    cfg.validate()?;
    let mut rng = stream.rng();
    for k in 0..3 {
        let (mut x, mut y) = (sa[k], sb[k]);
        if cfg.noise_sigma > 0.0 {
            x += cfg.noise_sigma * cfg.scale[k] * normal(&mut rng);
            y += cfg.noise_sigma * cfg.scale[k] * normal(&mut rng);
        }
        let band = cfg.band * cfg.scale[k];
        if x - y > band {
            return Ok((Vote::A, ORDER[k]));
        }
        if y - x > band {
            return Ok((Vote::B, ORDER[k]));
        }
    }
    Ok((Vote::Tie, Criterion::None))
}

/// Anything that turns captions into images, one stream per image.
pub trait ImageSource {
    fn generate(&self, tokens: &[Vec<u32>], streams: &[RngStream]) -> Result<Vec<Image>>;
}

impl ImageSource for Cascade {
    fn generate(&self, tokens: &[Vec<u32>], streams: &[RngStream]) -> Result<Vec<Image>> {
        self.sample_batch(tokens, streams)
    }
}

/// A single base-stage model sampled on its own.
#[derive(Clone, Debug)]
pub struct StageSource {
    pub params: DenoiserParams,
    pub sched: crate::scheduler::NoiseSchedule,
    pub opts: StageOptions,
}

impl ImageSource for StageSource {
    fn generate(&self, tokens: &[Vec<u32>], streams: &[RngStream]) -> Result<Vec<Image>> {
        ensure!(
            !self.params.config.is_super_resolution(),
            InvalidArgument,
            "a stage source samples the base stage"
        );
        let conds: Vec<Conditioning> = tokens
            .iter()
            .map(|t| Conditioning::text(t.clone()))
            .collect();
        Ok(
            sample_stage_batch(&self.params, &self.sched, &self.opts, &conds, streams)?
                .into_iter()
                .map(|s| s.image)
                .collect(),
        )
    }
}

/// Wraps a source and adds Gaussian pixel noise of the given amplitude.
pub struct DefectInjector<S> {
    pub inner: S,
    pub amplitude: f64,
}

impl<S: ImageSource> ImageSource for DefectInjector<S> {
    fn generate(&self, tokens: &[Vec<u32>], streams: &[RngStream]) -> Result<Vec<Image>> {
        let imgs = self.inner.generate(tokens, streams)?;
        imgs.into_iter()
            .zip(streams)
            .map(|(img, s)| {
                let z = normal_vec(&mut s.fork("defect").rng(), img.data().len());
                let data = img
                    .data()
                    .iter()
                    .zip(z)
                    .map(|(v, z)| v + self.amplitude * z)
                    .collect();
                Ok(Image::from_vec(img.shape(), data)?.clamp(-1.0, 1.0))
            })
            .collect()
    }
}

impl<S: ImageSource + ?Sized> ImageSource for &S {
    fn generate(&self, tokens: &[Vec<u32>], streams: &[RngStream]) -> Result<Vec<Image>> {
        (**self).generate(tokens, streams)
    }
}

impl<S: ImageSource + ?Sized> ImageSource for Box<S> {
    fn generate(&self, tokens: &[Vec<u32>], streams: &[RngStream]) -> Result<Vec<Image>> {
        (**self).generate(tokens, streams)
    }
}

/// A captioned evaluation prompt.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalPrompt {
    pub id: u64,
    pub tokens: Vec<u32>,
}

/// The packaged prompt set as evaluation prompts.
pub fn eval_prompts() -> Vec<EvalPrompt> {
    crate::prompt::prompt_set()
        .into_iter()
        .map(|e| EvalPrompt {
            id: e.id as u64,
            tokens: e.attributes.tokens(),
        })
        .collect()
}

/// Pairs are generated this many at a time.
const CHUNK: usize = 64;

/// Generate one image per model for every (prompt, seed), with both sides
/// sharing the pair's sampling stream, collect three noisy assessor votes per
/// pair and test the decisive pairs.
pub fn sbs_compare(
    model_a: &dyn ImageSource,
    model_b: &dyn ImageSource,
    prompts: &[EvalPrompt],
    seeds_per_prompt: usize,
    judge: &JudgeConfig,
    stream: &RngStream,
) -> Result<(SbsResult, Vec<VoteRecord>)> {
    judge.validate()?;
    ensure!(
        !prompts.is_empty() && seeds_per_prompt >= 1,
        InvalidArgument,
        "side-by-side needs prompts and at least one seed per prompt"
    );
    let pairs: Vec<(u64, &EvalPrompt)> = (0..seeds_per_prompt)
        .flat_map(|s| prompts.iter().map(move |p| (s, p)))
        .enumerate()
        .map(|(i, (_, p))| (i as u64, p))
        .collect();
    let mut records = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(CHUNK) {
        let tokens: Vec<Vec<u32>> = chunk.iter().map(|(_, p)| p.tokens.clone()).collect();
        let streams: Vec<RngStream> = chunk
            .iter()
            .map(|(i, _)| stream.fork("pair").fork_index(*i).fork("image"))
            .collect();
        let ia = model_a.generate(&tokens, &streams)?;
        let ib = model_b.generate(&tokens, &streams)?;
        ensure!(
            ia.len() == chunk.len() && ib.len() == chunk.len(),
            Shape,
            "image source returned the wrong number of images"
        );
        for (((i, p), a), b) in chunk.iter().zip(&ia).zip(&ib) {
            let cond = Conditioning::text(p.tokens.clone());
            a.ensure_same_shape(b, "side-by-side pair")?;
            let (sa, sb) = (criterion_scores(a, &cond)?, criterion_scores(b, &cond)?);
            let judges = stream.fork("pair").fork_index(*i).fork("judge");
            let mut votes = Vec::with_capacity(ASSESSORS);
            let mut trace = Vec::with_capacity(ASSESSORS);
            for k in 0..ASSESSORS {
                let (v, c) = judge_scores(&sa, &sb, judge, &judges.fork_index(k as u64))?;
                votes.push(v);
                trace.push(c);
            }
            records.push(VoteRecord {
                pair_id: *i,
                prompt_id: p.id,
                assessor_votes: votes,
                criterion_trace: Some(trace),
            });
        }
    }
    let points: Vec<Point> = records.iter().map(aggregate_pair).collect::<Result<_>>()?;
    Ok((SbsResult::from_points(&points)?, records))
}

#[cfg(test)]
mod tests;

/// Ground-truth renders of each caption at a fixed side, drawn from the
/// corpus renderer with the given aesthetic and defect levels.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleSource {
    pub side: usize,
    pub aesthetic: f64,
    pub defect: f64,
}

impl ImageSource for OracleSource {
    fn generate(&self, tokens: &[Vec<u32>], streams: &[RngStream]) -> Result<Vec<Image>> {
        use crate::curation::{render, RenderStyle};
        use crate::prompt::{Attributes, TargetAttributes};
        tokens
            .iter()
            .zip(streams)
            .map(|(t, s)| {
                let a = TargetAttributes::from_tokens(t);
                let (Some(color), Some(position), Some(size), Some(shape)) =
                    (a.color, a.position, a.size, a.shape)
                else {
                    return Err(crate::Error::InvalidArgument(
                        "oracle renders need every attribute in the caption".into(),
                    ));
                };
                let attrs = Attributes {
                    color,
                    position,
                    size,
                    shape,
                };
                let style = RenderStyle::sample(
                    &attrs,
                    self.aesthetic,
                    self.defect,
                    false,
                    &mut s.fork("style").rng(),
                );
                render(&attrs, &style, &s.fork("noise")).resize_to(self.side)
            })
            .collect()
    }
}

impl JudgeConfig {
    /// Calibrate on `n` fresh synthetic corpus images at `side` pixels, each
    /// scored against its own caption.
    pub fn from_synthetic(
        n: usize,
        side: usize,
        noise_sigma: f64,
        stream: &RngStream,
    ) -> Result<Self> {
        let recs =
            crate::curation::synth_corpus(n, &crate::curation::SynthConfig::default(), stream)?;
        let imgs: Vec<(Image, Conditioning)> = recs
            .iter()
            .map(|r| {
                Ok((
                    r.image().resize_to(side)?,
                    Conditioning::text(r.tokens.clone()),
                ))
            })
            .collect::<Result<_>>()?;
        Self::calibrate(&imgs, noise_sigma)
    }
}
