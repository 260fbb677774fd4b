//! Surrogate reward channels and their running normalisation.

use serde::{Deserialize, Serialize};

use crate::denoiser::Conditioning;
use crate::error::{ensure, Result};
use crate::image::Image;
use crate::prompt::{ShapeClass, Size, TargetAttributes};
use crate::vision::{artifact_score, image_stats, SIZE_THRESHOLD};

/// Colour margin a clean render of the named colour clears.
pub const COLOR_MARGIN: f64 = 0.4;
/// Centroid offset, in half-image units, a clean render clears on each axis.
pub const POSITION_MARGIN: f64 = 0.3;
/// Log-area slack around the size threshold.
pub const SIZE_MARGIN: f64 = 0.15;
/// Corner-fraction limits for disks and squares, scored from 32 pixels up.
pub const DISK_CORNER_MAX: f64 = 0.1;
pub const SQUARE_CORNER_MIN: f64 = 0.03;
/// Smallest side at which the shape term is scored.
pub const SHAPE_MIN_SIDE: usize = 32;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RewardVector {
    pub relevance: f64,
    pub consistency: f64,
    pub aesthetics: f64,
}

impl RewardVector {
    pub fn to_array(self) -> [f64; 3] {
        [self.relevance, self.consistency, self.aesthetics]
    }

    pub fn from_array(v: [f64; 3]) -> Self {
        Self {
            relevance: v[0],
            consistency: v[1],
            aesthetics: v[2],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }

    /// `sum_i w_i r_i / scale_i`.
    pub fn combine(&self, weights: [f64; 3], scale: [f64; 3]) -> f64 {
        let r = self.to_array();
        (0..3).map(|i| weights[i] * r[i] / scale[i]).sum()
    }

    pub fn mean(rewards: &[RewardVector]) -> RewardVector {
        let n = rewards.len().max(1) as f64;
        let mut acc = [0.0; 3];
        for r in rewards {
            for (a, v) in acc.iter_mut().zip(r.to_array()) {
                *a += v;
            }
        }
        RewardVector::from_array(acc.map(|a| a / n))
    }
}

fn hinge(v: f64) -> f64 {
    v.max(0.0)
}

/// Relevance penalty of an image against the attributes its caption names.
pub fn relevance_penalty(img: &Image, target: &TargetAttributes) -> Result<f64> {
    let s = image_stats(img)?;
    let side = img.shape().height;
    let mut p = 0.0;
    if let Some(c) = target.color {
        p += hinge(COLOR_MARGIN - s.color_margin(c));
    }
    if let Some(pos) = target.position {
        let (sx, sy) = pos.signs();
        p +=
            hinge(POSITION_MARGIN - sx * s.centroid.1) + hinge(POSITION_MARGIN - sy * s.centroid.0);
    }
    if let Some(size) = target.size {
        let la = s.area.max(1e-3).ln();
        let lt = SIZE_THRESHOLD.ln();
        p += match size {
            Size::Small => hinge(la - (lt + SIZE_MARGIN)),
            Size::Large => hinge((lt - SIZE_MARGIN) - la),
        };
    }
    if let (Some(shape), true) = (target.shape, side >= SHAPE_MIN_SIDE) {
        p += match shape {
            ShapeClass::Disk => hinge(s.corner_fraction - DISK_CORNER_MAX),
            ShapeClass::Square => hinge(SQUARE_CORNER_MIN - s.corner_fraction),
        };
    }
    Ok(p)
}

/// Relevance, consistency and aesthetics of an image for a caption.
pub fn compute_rewards(img: &Image, cond: &Conditioning) -> Result<RewardVector> {
    ensure!(
        img.data().iter().all(|v| (-1.0..=1.0).contains(v)),
        InvalidArgument,
        "reward images must lie in [-1, 1]"
    );
    let target = TargetAttributes::from_tokens(&cond.tokens);
    let stats = image_stats(img)?;
    Ok(RewardVector {
        relevance: -relevance_penalty(img, &target)?,
        consistency: -artifact_score(img)?,
        aesthetics: -stats.aesthetic_distance(),
    })
}

/// Per-channel running mean and variance (Welford).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub count: u64,
    pub mean: [f64; 3],
    pub m2: [f64; 3],
}

impl RunningStats {
    pub fn update(&mut self, r: &RewardVector) {
        self.count += 1;
        let n = self.count as f64;
        for (k, v) in r.to_array().into_iter().enumerate() {
            let d = v - self.mean[k];
            self.mean[k] += d / n;
            self.m2[k] += d * (v - self.mean[k]);
        }
    }

    /// Population standard deviation per channel.
    pub fn std(&self) -> [f64; 3] {
        if self.count == 0 {
            return [0.0; 3];
        }
        self.m2.map(|m| (m / self.count as f64).max(0.0).sqrt())
    }

    /// Divisors used for normalisation: the running std, or 1 where it is
    /// zero (the channel then passes through unscaled).
    pub fn scales(&self) -> ([f64; 3], [bool; 3]) {
        let std = self.std();
        let unscaled = std.map(|s| s <= 0.0 || !s.is_finite());
        let mut scale = [1.0; 3];
        for k in 0..3 {
            if !unscaled[k] {
                scale[k] = std[k];
            }
        }
        (scale, unscaled)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Normalized {
    /// Weighted sum of the normalised channels per trajectory.
    pub combined: Vec<f64>,
    /// `combined - baseline`.
    pub advantages: Vec<f64>,
    pub stats: RunningStats,
    /// Channels whose running std was zero.
    pub unscaled: [bool; 3],
}

/// Update the running statistics with the batch, scale each channel by its
/// running std, weight, and subtract the value baseline.
pub fn normalize_and_combine(
    rewards: &[RewardVector],
    baseline: &[f64],
    stats: &RunningStats,
    weights: [f64; 3],
) -> Result<Normalized> {
    ensure!(!rewards.is_empty(), InvalidArgument, "empty reward batch");
    ensure!(
        baseline.len() == rewards.len(),
        Shape,
        "{} baselines for {} rewards",
        baseline.len(),
        rewards.len()
    );
    ensure!(
        rewards.iter().all(|r| r.is_finite()),
        NonFinite,
        "reward batch"
    );
    let mut stats = stats.clone();
    for r in rewards {
        stats.update(r);
    }
    let (scale, unscaled) = stats.scales();
    let combined: Vec<f64> = rewards.iter().map(|r| r.combine(weights, scale)).collect();
    let advantages = combined.iter().zip(baseline).map(|(c, v)| c - v).collect();
    Ok(Normalized {
        combined,
        advantages,
        stats,
        unscaled,
    })
}
