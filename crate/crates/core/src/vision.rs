//! Hand-built measurements on rendered shape images.
//!
//! Backgrounds of the synthetic world are grayscale and objects are strongly
//! coloured, so per-pixel chroma (max minus min channel) separates foreground
//! from background at every resolution. These statistics back the attribute
//! classifier, the reward surrogates and the simulated judges.

use std::collections::HashMap;
use std::sync::{Mutex, OnceLock};

use crate::error::{ensure, Result};
use crate::image::Image;
use crate::prompt::{Attributes, Color, Position, ShapeClass, Size};

/// Area fraction separating small from large objects.
pub const SIZE_THRESHOLD: f64 = 0.125;

/// Share of foreground mass outside the equal-area disk separating squares
/// (corners stick out) from disks.
pub const CORNER_THRESHOLD: f64 = 0.05;

/// Background level, foreground chroma and background texture of the
/// best-looking renders.
pub const AESTHETIC_TARGET: [f64; 3] = [-0.3, 1.05, 0.06];
pub const AESTHETIC_SCALE: [f64; 3] = [0.3, 0.3, 0.15];

/// Foreground membership from chroma.
pub fn fg_weight(chroma: f64) -> f64 {
    ((chroma - 0.25) / 0.25).clamp(0.0, 1.0)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImageStats {
    /// Foreground share of the image area.
    pub area: f64,
    /// Foreground-weighted channel means.
    pub channel_means: [f64; 3],
    /// Foreground centroid, `(y, x)` in `[-1, 1]`.
    pub centroid: (f64, f64),
    pub corner_fraction: f64,
    pub bg_level: f64,
    pub fg_saturation: f64,
    pub bg_texture: f64,
}

impl ImageStats {
    pub fn has_object(&self) -> bool {
        self.area > 1e-3
    }

    /// Target channel minus the strongest other channel.
    pub fn color_margin(&self, color: Color) -> f64 {
        let c = color.channel();
        let other = (0..3)
            .filter(|&k| k != c)
            .map(|k| self.channel_means[k])
            .fold(f64::NEG_INFINITY, f64::max);
        self.channel_means[c] - other
    }

    pub fn aesthetic_distance(&self) -> f64 {
        let v = [self.bg_level, self.fg_saturation, self.bg_texture];
        v.iter()
            .zip(AESTHETIC_TARGET)
            .zip(AESTHETIC_SCALE)
            .map(|((v, t), s)| ((v - t) / s).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

fn luminance(px: &[f64]) -> f64 {
    px.iter().sum::<f64>() / px.len() as f64
}

fn chroma(px: &[f64]) -> f64 {
    let max = px.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = px.iter().copied().fold(f64::INFINITY, f64::min);
    max - min
}

pub fn image_stats(img: &Image) -> Result<ImageStats> {
    let shape = img.shape();
    ensure!(
        shape.channels == 3,
        Shape,
        "image statistics need RGB, got {shape}"
    );
    let (h, w) = (shape.height, shape.width);
    let n = (h * w) as f64;
    let mut mass = 0.0;
    let mut ch = [0.0; 3];
    let (mut sy, mut sx) = (0.0, 0.0);
    let mut sat = 0.0;
    let (mut bg_w, mut bg_l, mut bg_l2) = (0.0, 0.0, 0.0);
    let mut weights = Vec::with_capacity(h * w);
    for (i, px) in img.data().chunks(3).enumerate() {
        let c = chroma(px);
        let wt = fg_weight(c);
        let (y, x) = ((i / w) as f64 + 0.5, (i % w) as f64 + 0.5);
        mass += wt;
        for k in 0..3 {
            ch[k] += wt * px[k];
        }
        sy += wt * y;
        sx += wt * x;
        sat += wt * c;
        let l = luminance(px);
        let b = 1.0 - wt;
        bg_w += b;
        bg_l += b * l;
        bg_l2 += b * l * l;
        weights.push((wt, y, x));
    }
    let (channel_means, centroid, fg_saturation, corner_fraction) = if mass > 1e-9 {
        let (cy, cx) = (sy / mass, sx / mass);
        let radius = (mass / std::f64::consts::PI).sqrt();
        let outside: f64 = weights
            .iter()
            .filter(|(_, y, x)| ((y - cy).powi(2) + (x - cx).powi(2)).sqrt() > radius)
            .map(|(wt, _, _)| wt)
            .sum();
        (
            [ch[0] / mass, ch[1] / mass, ch[2] / mass],
            (2.0 * cy / h as f64 - 1.0, 2.0 * cx / w as f64 - 1.0),
            sat / mass,
            outside / mass,
        )
    } else {
        ([0.0; 3], (0.0, 0.0), 0.0, 0.0)
    };
    let (bg_level, bg_texture) = if bg_w > 1e-9 {
        let m = bg_l / bg_w;
        (m, (bg_l2 / bg_w - m * m).max(0.0).sqrt())
    } else {
        (0.0, 0.0)
    };
    Ok(ImageStats {
        area: mass / n,
        channel_means,
        centroid,
        corner_fraction,
        bg_level,
        fg_saturation,
        bg_texture,
    })
}

/// Attribute classifier; `None` when no foreground object is found.
pub fn classify(img: &Image) -> Result<Option<Attributes>> {
    let s = image_stats(img)?;
    if !s.has_object() {
        return Ok(None);
    }
    let color = Color::ALL
        .into_iter()
        .max_by(|a, b| s.color_margin(*a).total_cmp(&s.color_margin(*b)))
        .unwrap();
    let position = match (s.centroid.0 < 0.0, s.centroid.1 < 0.0) {
        (true, true) => Position::TopLeft,
        (true, false) => Position::TopRight,
        (false, true) => Position::BottomLeft,
        (false, false) => Position::BottomRight,
    };
    let size = if s.area > SIZE_THRESHOLD {
        Size::Large
    } else {
        Size::Small
    };
    let shape = if s.corner_fraction > CORNER_THRESHOLD {
        ShapeClass::Square
    } else {
        ShapeClass::Disk
    };
    Ok(Some(Attributes {
        color,
        position,
        size,
        shape,
    }))
}

/// Mean squared 4-neighbour Laplacian of the luminance, replicated borders.
pub fn mean_sq_laplacian(img: &Image) -> f64 {
    let shape = img.shape();
    let (h, w, c) = (shape.height, shape.width, shape.channels);
    let lum: Vec<f64> = img.data().chunks(c).map(luminance).collect();
    let at = |y: isize, x: isize| {
        let y = y.clamp(0, h as isize - 1) as usize;
        let x = x.clamp(0, w as isize - 1) as usize;
        lum[y * w + x]
    };
    let mut acc = 0.0;
    for y in 0..h as isize {
        for x in 0..w as isize {
            let l = 4.0 * at(y, x) - at(y - 1, x) - at(y + 1, x) - at(y, x - 1) - at(y, x + 1);
            acc += l * l;
        }
    }
    acc / (h * w) as f64
}

/// Resolutions at which high-frequency artifacts are scored.
fn artifact_scales(side: usize) -> Vec<usize> {
    let mut v = vec![side];
    if side > 8 && side.is_multiple_of(8) {
        v.push(8);
    }
    v
}

fn baselines() -> &'static Mutex<HashMap<usize, f64>> {
    static CACHE: OnceLock<Mutex<HashMap<usize, f64>>> = OnceLock::new();
    CACHE.get_or_init(|| Mutex::new(HashMap::new()))
}

/// Largest Laplacian energy among clean reference renders at `side`.
pub fn laplacian_baseline(side: usize) -> f64 {
    if let Some(v) = baselines().lock().unwrap().get(&side) {
        return *v;
    }
    let v = crate::curation::reference_renders()
        .iter()
        .map(|img| mean_sq_laplacian(&img.resize_to(side).unwrap()))
        .fold(0.0, f64::max);
    baselines().lock().unwrap().insert(side, v);
    v
}

/// Laplacian energy above the clean baseline, summed over the native
/// resolution and an 8x8 view.
pub fn artifact_score(img: &Image) -> Result<f64> {
    let side = img.shape().height;
    ensure!(
        side == img.shape().width,
        Shape,
        "artifact score needs square images"
    );
    let mut total = 0.0;
    for s in artifact_scales(side) {
        let view = img.resize_to(s)?;
        total += (mean_sq_laplacian(&view) - laplacian_baseline(s)).max(0.0);
    }
    Ok(total)
}
