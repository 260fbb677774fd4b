use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{
    render, CorpusRecord, FactorVector, Hidden, Labels, RenderStyle, IMAGE_OFFSET, N_FACTORS,
    N_JOINT,
};
use crate::error::{ensure, Result};
use crate::prompt::{Attributes, Color, Position, ShapeClass, Size};
use crate::rng::{normal, uniform, RngStream};
use crate::vision::{image_stats, mean_sq_laplacian, AESTHETIC_TARGET};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    /// Share of records with block and pixel noise.
    pub defect_rate: f64,
    /// Share of captions with every mentioned attribute right.
    pub accurate_caption_rate: f64,
    pub monotonic_rate: f64,
    /// Share of records carrying assessor labels.
    pub labeled_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            defect_rate: 0.3,
            accurate_caption_rate: 0.75,
            monotonic_rate: 0.4,
            labeled_fraction: 0.2,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("defect_rate", self.defect_rate),
            ("accurate_caption_rate", self.accurate_caption_rate),
            ("monotonic_rate", self.monotonic_rate),
            ("labeled_fraction", self.labeled_fraction),
        ] {
            ensure!(
                (0.0..=1.0).contains(&v),
                InvalidArgument,
                "{name} = {v} outside [0, 1]"
            );
        }
        Ok(())
    }
}

fn pick<T: Copy>(items: &[T], rng: &mut impl Rng) -> T {
    items[rng.random_range(0..items.len())]
}

fn other<T: Copy + PartialEq>(items: &[T], not: T, rng: &mut impl Rng) -> T {
    let rest: Vec<T> = items.iter().copied().filter(|&v| v != not).collect();
    pick(&rest, rng)
}

/// Caption tokens mentioning `m` attributes, `wrong` of them misstated.
fn caption(attrs: &Attributes, m: usize, wrong: usize, rng: &mut impl Rng) -> Vec<u32> {
    let mut groups: Vec<usize> = (0..4).collect();
    for i in 0..4 {
        let j = rng.random_range(i..4);
        groups.swap(i, j);
    }
    let mut mentioned: Vec<usize> = groups[..m].to_vec();
    let wrong_set: Vec<usize> = mentioned[..wrong].to_vec();
    mentioned.sort_unstable();
    let mut shown = *attrs;
    for g in &wrong_set {
        match g {
            0 => shown.color = other(&Color::ALL, attrs.color, rng),
            1 => shown.position = other(&Position::ALL, attrs.position, rng),
            2 => shown.size = other(&Size::ALL, attrs.size, rng),
            _ => shown.shape = other(&ShapeClass::ALL, attrs.shape, rng),
        }
    }
    let all = shown.tokens();
    mentioned.iter().map(|&g| all[g]).collect()
}

fn label(v: f64, rng: &mut impl Rng) -> u8 {
    (1.0 + 2.0 * v + 0.35 * normal(rng)).round().clamp(1.0, 3.0) as u8
}

fn record(id: u64, cfg: &SynthConfig, root: &RngStream) -> Result<CorpusRecord> {
    let s = root.fork_index(id);
    let mut rng = s.fork("draw").rng();
    let attrs = pick(&Attributes::all(), &mut rng);
    let defect = if uniform(&mut rng) < cfg.defect_rate {
        0.3 + 0.7 * uniform(&mut rng)
    } else {
        0.0
    };
    let aesthetic = uniform(&mut rng);
    let monotonic_bg = uniform(&mut rng) < cfg.monotonic_rate;
    let m = match uniform(&mut rng) {
        u if u < 0.1 => 1,
        u if u < 0.25 => 2,
        u if u < 0.5 => 3,
        _ => 4,
    };
    let wrong = if uniform(&mut rng) < cfg.accurate_caption_rate {
        0
    } else if uniform(&mut rng) < 0.8 {
        1
    } else {
        2
    }
    .min(m);
    let tokens = caption(&attrs, m, wrong, &mut rng);
    let hidden = Hidden {
        defect,
        aesthetic,
        caption_accuracy: 1.0 - wrong as f64 / m as f64,
        descriptiveness: (m - 1) as f64 / 3.0,
        attributes: attrs,
    };
    let style = RenderStyle::sample(&attrs, aesthetic, defect, monotonic_bg, &mut rng);
    let img = render(&attrs, &style, &s.fork("noise"));
    let pixels = img.to_bytes();

    let width = (3.0f64.ln() + uniform(&mut rng) * (72.0f64 / 3.0).ln()).exp();
    let aspect = (0.4 * normal(&mut rng)).exp();
    let (width, height) = (
        width.round().max(1.0) as u32,
        (width / aspect).round().max(1.0) as u32,
    );

    // factors are measured on the stored bytes
    let stored = CorpusRecord::shape();
    let img = crate::image::Image::from_bytes(stored, &pixels)?;
    let st = image_stats(&img)?;
    let mut f = [0.0; N_FACTORS];
    let sigmas = [0.2, 0.3, 0.4, 0.5, 0.6, 0.8];
    for (k, sg) in sigmas.iter().enumerate() {
        f[k] = hidden.caption_accuracy + sg * normal(&mut rng);
    }
    let t = N_JOINT;
    f[t] = m as f64;
    f[t + 1] = hidden.descriptiveness + 0.3 * normal(&mut rng);
    for k in 2..10 {
        f[t + k] = hidden.descriptiveness + 0.6 * normal(&mut rng);
    }
    for k in 10..38 {
        f[t + k] = normal(&mut rng);
    }
    let i = IMAGE_OFFSET;
    f[i] = -(1e-4 + mean_sq_laplacian(&img)).ln() + 0.1 * normal(&mut rng);
    f[i + 1] = -(1e-4 + mean_sq_laplacian(&img.downsample_mean(4)?)).ln() + 0.1 * normal(&mut rng);
    f[i + 2] = 2.0 * aesthetic + 2.5 * defect + 0.3 * normal(&mut rng);
    f[i + 3] = -(st.bg_level - AESTHETIC_TARGET[0]).abs() / 0.3 + 0.2 * normal(&mut rng);
    f[i + 4] = st.fg_saturation + 0.1 * normal(&mut rng);
    f[i + 5] = st.bg_texture;
    f[i + 6] = (uniform(&mut rng) < 0.03) as u8 as f64;
    f[i + 7] = (width as f64 * height as f64).ln();
    f[i + 8] = (width as f64 / height as f64).ln();
    f[i + 9] = defect + 0.5 * normal(&mut rng);
    f[i + 10] = aesthetic + 0.5 * normal(&mut rng);
    f[i + 11] = normal(&mut rng);

    let labeled = uniform(&mut rng) < cfg.labeled_fraction;
    let labels = labeled.then(|| Labels {
        attractiveness: label(0.65 * (1.0 - defect) + 0.35 * aesthetic, &mut rng),
        descriptiveness: label(hidden.descriptiveness, &mut rng),
        relevance: label(hidden.caption_accuracy, &mut rng),
    });
    Ok(CorpusRecord {
        id,
        pixels,
        tokens,
        width,
        height,
        factors: FactorVector::new(f)?,
        monotonic_bg,
        labels,
        hidden,
    })
}

/// `n` records with ids `0..n`. Record `i` depends only on the stream and
/// `i`, so a corpus is a prefix of every larger one drawn from the same
/// stream.
pub fn synth_corpus(n: usize, cfg: &SynthConfig, stream: &RngStream) -> Result<Vec<CorpusRecord>> {
    ensure!(n >= 1, InvalidArgument, "corpus size must be at least 1");
    cfg.validate()?;
    (0..n as u64).map(|id| record(id, cfg, stream)).collect()
}
