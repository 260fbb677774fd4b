//! Procedural renderer for the shape world.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::image::{Image, Shape};
use crate::prompt::{Attributes, ShapeClass, Size};
use crate::rng::{normal, uniform, RngStream};
use crate::vision::AESTHETIC_TARGET;

/// Side of every corpus image.
pub const CORPUS_SIDE: usize = 32;

/// Everything that decides how a record looks besides its attributes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderStyle {
    /// Object centre in pixels of the 32x32 canvas, `(y, x)`.
    pub center: (f64, f64),
    /// Half side of a square, radius of a disk, in pixels.
    pub radius: f64,
    pub saturation: f64,
    pub object_level: f64,
    pub bg_level: f64,
    pub texture_amp: f64,
    pub texture_freq: (f64, f64),
    pub texture_phase: f64,
    /// 0 for a clean image, up to 1 for heavy block and pixel noise.
    pub defect: f64,
}

impl RenderStyle {
    /// Draw a style for the given attributes and hidden quality levels.
    pub fn sample(
        attrs: &Attributes,
        aesthetic: f64,
        defect: f64,
        monotonic_bg: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let (sx, sy) = attrs.position.signs();
        let quadrant = |s: f64| if s < 0.0 { 8.0 } else { 24.0 };
        let jitter = |rng: &mut dyn rand::RngCore| 4.0 * uniform(rng) - 2.0;
        let center = (quadrant(sy) + jitter(rng), quadrant(sx) + jitter(rng));
        let radius = match attrs.size {
            Size::Small => 4.0 + uniform(rng),
            Size::Large => 7.5 + uniform(rng),
        };
        let off = 1.0 - aesthetic;
        let sign = if uniform(rng) < 0.5 { -1.0 } else { 1.0 };
        let texture_amp = if monotonic_bg {
            0.0
        } else {
            AESTHETIC_TARGET[2] + off * 0.25 * uniform(rng)
        };
        Self {
            center,
            radius,
            saturation: 1.0 - 0.5 * off * (0.6 + 0.4 * uniform(rng)),
            object_level: -0.1 + 0.4 * uniform(rng),
            bg_level: AESTHETIC_TARGET[0] + sign * off * 0.6 * (0.5 + 0.5 * uniform(rng)),
            texture_amp,
            texture_freq: (0.1 + 0.2 * uniform(rng), 0.1 + 0.2 * uniform(rng)),
            texture_phase: std::f64::consts::TAU * uniform(rng),
            defect,
        }
    }
}

/// Coverage of pixel `(py, px)` by the object, from 4x4 supersampling.
fn coverage(shape: ShapeClass, style: &RenderStyle, py: usize, px: usize) -> f64 {
    let mut hits = 0;
    for sy in 0..4 {
        for sx in 0..4 {
            let y = py as f64 + (sy as f64 + 0.5) / 4.0 - style.center.0;
            let x = px as f64 + (sx as f64 + 0.5) / 4.0 - style.center.1;
            let inside = match shape {
                ShapeClass::Square => y.abs() <= style.radius && x.abs() <= style.radius,
                ShapeClass::Disk => y * y + x * x <= style.radius * style.radius,
            };
            hits += inside as u32;
        }
    }
    hits as f64 / 16.0
}

/// Render a record at [`CORPUS_SIDE`]; `noise` drives the defect noise.
pub fn render(attrs: &Attributes, style: &RenderStyle, noise: &RngStream) -> Image {
    let side = CORPUS_SIDE;
    let mut img = Image::zeros(Shape::square(side, 3));
    let c = attrs.color.channel();
    let mut obj = [0.0; 3];
    for (k, v) in obj.iter_mut().enumerate() {
        let e = if k == c { 1.0 } else { 0.0 };
        *v = style.object_level + 0.7 * style.saturation * (1.5 * e - 0.5);
    }
    let mut rng = noise.rng();
    let blocks: Vec<f64> = (0..(side / 4) * (side / 4))
        .map(|_| 0.3 * style.defect * normal(&mut rng))
        .collect();
    for y in 0..side {
        for x in 0..side {
            let tex = style.texture_amp
                * (style.texture_freq.0 * y as f64
                    + style.texture_freq.1 * x as f64
                    + style.texture_phase)
                    .sin();
            let bg = style.bg_level + tex;
            let cov = coverage(attrs.shape, style, y, x);
            let grain =
                blocks[(y / 4) * (side / 4) + x / 4] + 0.15 * style.defect * normal(&mut rng);
            for k in 0..3 {
                let tint = 0.04 * style.defect * normal(&mut rng);
                let v = (1.0 - cov) * bg + cov * obj[k] + grain + tint;
                img.set(y, x, k, v.clamp(-1.0, 1.0));
            }
        }
    }
    img
}
