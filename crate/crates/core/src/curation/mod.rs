//! Synthetic image-caption corpus and the selection pipeline over it.
//!
//! Each record hides four quality components (image defects, aesthetics,
//! caption accuracy, caption descriptiveness). Rankers only ever see the
//! 56-entry factor vector and, on a labelled slice, three 1-3 labels.

mod pipeline;
mod render;
mod score;
mod select;
mod sfc;
mod store;
mod synth;

use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::image::{Image, Shape};
use crate::prompt::Attributes;
use crate::rng::RngStream;

pub use pipeline::{curate, CurateConfig, CurationReport};
pub use render::{render, RenderStyle, CORPUS_SIDE};
pub use score::{fit_score_weights, image_score, prefilter, PrefilterLimits, ScoreWeights};
pub use select::{select_top, subsample_uniform, top_by};
pub use sfc::{fit_sfc, SfcConfig, SfcModel, Stump};
pub use store::{load_corpus, save_corpus, Manifest};
pub use synth::{synth_corpus, SynthConfig};

pub const N_JOINT: usize = 6;
pub const N_TEXT: usize = 38;
pub const N_IMAGE: usize = 12;
pub const N_FACTORS: usize = N_JOINT + N_TEXT + N_IMAGE;

/// Offset of the image-only block inside a factor vector.
pub const IMAGE_OFFSET: usize = N_JOINT + N_TEXT;

/// Image-only factor produced by the (noise-fooled) aesthetic predictor.
pub const AESTHETIC_FACTOR: usize = 2;

/// 6 joint, then 38 text-only, then 12 image-only factors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct FactorVector([f64; N_FACTORS]);

impl FactorVector {
    pub fn new(values: [f64; N_FACTORS]) -> Result<Self> {
        ensure!(
            values.iter().all(|v| v.is_finite()),
            NonFinite,
            "factor vector"
        );
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64; N_FACTORS] {
        &self.0
    }

    pub fn joint(&self) -> &[f64] {
        &self.0[..N_JOINT]
    }

    pub fn text(&self) -> &[f64] {
        &self.0[N_JOINT..IMAGE_OFFSET]
    }

    pub fn image(&self) -> &[f64] {
        &self.0[IMAGE_OFFSET..]
    }
}

impl TryFrom<Vec<f64>> for FactorVector {
    type Error = crate::Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        let arr: [f64; N_FACTORS] = v.try_into().map_err(|v: Vec<f64>| {
            crate::Error::Format(format!("{} factors, expected {N_FACTORS}", v.len()))
        })?;
        FactorVector::new(arr)
    }
}

impl From<FactorVector> for Vec<f64> {
    fn from(f: FactorVector) -> Self {
        f.0.to_vec()
    }
}

/// Assessor labels on the 1-3 scale.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Labels {
    pub attractiveness: u8,
    pub descriptiveness: u8,
    pub relevance: u8,
}

impl Labels {
    pub fn mean(&self) -> f64 {
        (self.attractiveness + self.descriptiveness + self.relevance) as f64 / 3.0
    }

    /// The single fidelity grade, the rounded label mean.
    pub fn fidelity(&self) -> u8 {
        self.mean().round() as u8
    }

    pub fn validate(&self) -> Result<()> {
        for v in [self.attractiveness, self.descriptiveness, self.relevance] {
            ensure!(
                (1..=3).contains(&v),
                InvalidArgument,
                "label {v} outside 1..=3"
            );
        }
        Ok(())
    }
}

/// Generator-side truth; never read by any ranker.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hidden {
    pub defect: f64,
    pub aesthetic: f64,
    pub caption_accuracy: f64,
    pub descriptiveness: f64,
    pub attributes: Attributes,
}

impl Hidden {
    pub fn quality(&self) -> f64 {
        0.4 * (1.0 - self.defect)
            + 0.2 * self.aesthetic
            + 0.25 * self.caption_accuracy
            + 0.15 * self.descriptiveness
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusRecord {
    pub id: u64,
    /// `CORPUS_SIDE x CORPUS_SIDE x 3` bytes.
    pub pixels: Vec<u8>,
    pub tokens: Vec<u32>,
    /// Nominal source size, used only by the size and aspect filters.
    pub width: u32,
    pub height: u32,
    pub factors: FactorVector,
    pub monotonic_bg: bool,
    pub labels: Option<Labels>,
    pub hidden: Hidden,
}

impl CorpusRecord {
    pub fn shape() -> Shape {
        Shape::square(CORPUS_SIDE, 3)
    }

    pub fn image(&self) -> Image {
        Image::from_bytes(Self::shape(), &self.pixels).expect("record pixels have the corpus shape")
    }

    pub fn gt_quality(&self) -> f64 {
        self.hidden.quality()
    }

    pub fn fidelity_label(&self) -> Option<u8> {
        self.labels.map(|l| l.fidelity())
    }

    pub fn aspect(&self) -> f64 {
        self.width as f64 / self.height as f64
    }
}

/// Clean renders of every attribute combination at both aesthetic extremes,
/// used as references by the artifact score.
pub fn reference_renders() -> &'static [Image] {
    static REFS: OnceLock<Vec<Image>> = OnceLock::new();
    REFS.get_or_init(|| {
        let root = RngStream::new(0x5eed).fork("reference");
        Attributes::all()
            .iter()
            .enumerate()
            .flat_map(|(i, a)| {
                let s = root.fork_index(i as u64);
                [(0.0, false), (0.0, true), (1.0, false), (1.0, true)].map(|(aesthetic, mono)| {
                    let mut rng = s
                        .fork(if mono { "mono" } else { "tex" })
                        .fork_index(aesthetic as u64)
                        .rng();
                    let style = RenderStyle::sample(a, aesthetic, 0.0, mono, &mut rng);
                    render(a, &style, &s.fork("noise"))
                })
            })
            .collect()
    })
}
