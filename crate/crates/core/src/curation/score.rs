use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{CorpusRecord, FactorVector, N_IMAGE};
use crate::checkpoint::{ModelKind, TensorTable};
use crate::error::{ensure, Error, Result};

/// Linear Image Score over the image-only factors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreWeights {
    pub weights: [f64; N_IMAGE],
    pub intercept: f64,
}

impl ScoreWeights {
    pub fn zero() -> Self {
        Self {
            weights: [0.0; N_IMAGE],
            intercept: 0.0,
        }
    }

    pub fn to_table(&self) -> TensorTable {
        let mut t = TensorTable::new(ModelKind::ScoreWeights);
        t.push_vec("weights", &self.weights);
        t.push_scalar("intercept", self.intercept);
        t
    }

    pub fn from_table(t: &TensorTable) -> Result<Self> {
        ensure!(
            t.kind == ModelKind::ScoreWeights,
            Format,
            "expected score weights, found {:?}",
            t.kind
        );
        let w = t.vec("weights")?;
        let weights: [f64; N_IMAGE] = w
            .try_into()
            .map_err(|_| Error::Format("score weights must have 12 entries".into()))?;
        let s = Self {
            weights,
            intercept: t.scalar("intercept")?,
        };
        ensure!(
            s.weights
                .iter()
                .chain([&s.intercept])
                .all(|v| v.is_finite()),
            NonFinite,
            "score weights"
        );
        Ok(s)
    }
}

pub fn image_score(w: &ScoreWeights, f: &FactorVector) -> f64 {
    w.intercept
        + w.weights
            .iter()
            .zip(f.image())
            .map(|(a, b)| a * b)
            .sum::<f64>()
}

/// Least squares of attractiveness labels on the image-only factors.
pub fn fit_score_weights(labeled: &[CorpusRecord]) -> Result<ScoreWeights> {
    let rows: Vec<(&CorpusRecord, f64)> = labeled
        .iter()
        .filter_map(|r| r.labels.map(|l| (r, l.attractiveness as f64)))
        .collect();
    let mut distinct: Vec<u64> = rows.iter().map(|(_, y)| y.to_bits()).collect();
    distinct.sort_unstable();
    distinct.dedup();
    ensure!(
        distinct.len() >= 2,
        InvalidArgument,
        "need at least two distinct attractiveness labels, found {}",
        distinct.len()
    );
    let n = rows.len();
    let p = N_IMAGE + 1;
    ensure!(
        n >= p,
        InvalidArgument,
        "{n} labelled records for {p} coefficients"
    );
    let x = DMatrix::from_fn(n, p, |i, j| {
        if j == 0 {
            1.0
        } else {
            rows[i].0.factors.image()[j - 1]
        }
    });
    let y = DVector::from_fn(n, |i, _| rows[i].1);
    let svd = x.svd(true, true);
    let max = svd.singular_values.max();
    let min = svd.singular_values.min();
    ensure!(
        max > 0.0 && min / max > 1e-10,
        InvalidArgument,
        "degenerate design matrix (condition ratio {:.3e})",
        min / max
    );
    let beta = svd
        .solve(&y, 0.0)
        .map_err(|e| Error::InvalidArgument(format!("least squares failed: {e}")))?;
    let mut weights = [0.0; N_IMAGE];
    weights.copy_from_slice(&beta.as_slice()[1..]);
    Ok(ScoreWeights {
        weights,
        intercept: beta[0],
    })
}

/// Size and aspect windows plus the share kept after the score cut.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrefilterLimits {
    pub min_side: u32,
    pub max_side: u32,
    pub min_aspect: f64,
    pub max_aspect: f64,
    pub keep_fraction: f64,
}

impl Default for PrefilterLimits {
    fn default() -> Self {
        Self {
            min_side: 4,
            max_side: 64,
            min_aspect: 0.5,
            max_aspect: 2.0,
            keep_fraction: 1.0 / 3.0,
        }
    }
}

impl PrefilterLimits {
    pub fn admits(&self, r: &CorpusRecord) -> bool {
        let sides_ok = [r.width, r.height]
            .iter()
            .all(|&s| (self.min_side..=self.max_side).contains(&s));
        let a = r.aspect();
        sides_ok && a >= self.min_aspect && a <= self.max_aspect
    }
}

/// `ceil(n * fraction)` without floating-point spill-over on exact products.
pub(crate) fn ceil_share(n: usize, fraction: f64) -> usize {
    ((n as f64 * fraction - 1e-9).ceil().max(0.0) as usize).min(n)
}

/// Size/aspect filtering, then the top share by Image Score (ties by id).
/// Survivors are returned in id order.
pub fn prefilter(
    records: &[CorpusRecord],
    w: &ScoreWeights,
    limits: &PrefilterLimits,
) -> Vec<CorpusRecord> {
    let admitted: Vec<&CorpusRecord> = records.iter().filter(|r| limits.admits(r)).collect();
    let keep = ceil_share(admitted.len(), limits.keep_fraction);
    let mut scored: Vec<(f64, &CorpusRecord)> = admitted
        .into_iter()
        .map(|r| (image_score(w, &r.factors), r))
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.id.cmp(&b.1.id)));
    let mut out: Vec<CorpusRecord> = scored
        .into_iter()
        .take(keep)
        .map(|(_, r)| r.clone())
        .collect();
    out.sort_by_key(|r| r.id);
    out
}
