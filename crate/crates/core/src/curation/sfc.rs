//! Sample-fidelity ranker: gradient-boosted depth-1 regression trees.

use serde::{Deserialize, Serialize};

use super::{CorpusRecord, FactorVector, N_FACTORS};
use crate::checkpoint::{ModelKind, TensorTable};
use crate::error::{ensure, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SfcConfig {
    pub rounds: usize,
    pub learning_rate: f64,
    /// Candidate thresholds per factor (quantiles of the training values).
    pub bins: usize,
}

impl Default for SfcConfig {
    fn default() -> Self {
        Self {
            rounds: 200,
            learning_rate: 0.1,
            bins: 32,
        }
    }
}

/// `left` if `factor <= threshold`, else `right`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stump {
    pub factor: usize,
    pub threshold: f64,
    pub left: f64,
    pub right: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SfcModel {
    pub base: f64,
    pub stumps: Vec<Stump>,
    /// Set when every training label was identical.
    pub constant: bool,
}

impl SfcModel {
    pub fn score(&self, f: &FactorVector) -> f64 {
        let v = f.values();
        self.base
            + self
                .stumps
                .iter()
                .map(|s| {
                    if v[s.factor] <= s.threshold {
                        s.left
                    } else {
                        s.right
                    }
                })
                .sum::<f64>()
    }

    pub fn to_table(&self) -> TensorTable {
        let mut t = TensorTable::new(ModelKind::FidelityRanker);
        t.push_scalar("base", self.base);
        t.push_scalar("constant", self.constant as u8 as f64);
        let col = |f: fn(&Stump) -> f64| self.stumps.iter().map(f).collect::<Vec<_>>();
        t.push_vec("factor", &col(|s| s.factor as f64));
        t.push_vec("threshold", &col(|s| s.threshold));
        t.push_vec("left", &col(|s| s.left));
        t.push_vec("right", &col(|s| s.right));
        t
    }

    pub fn from_table(t: &TensorTable) -> Result<Self> {
        ensure!(
            t.kind == ModelKind::FidelityRanker,
            Format,
            "expected a fidelity ranker, found {:?}",
            t.kind
        );
        let (factor, threshold, left, right) = (
            t.vec("factor")?,
            t.vec("threshold")?,
            t.vec("left")?,
            t.vec("right")?,
        );
        let n = factor.len();
        ensure!(
            threshold.len() == n && left.len() == n && right.len() == n,
            Format,
            "stump columns differ in length"
        );
        let mut stumps = Vec::with_capacity(n);
        for i in 0..n {
            ensure!(
                factor[i] >= 0.0 && (factor[i] as usize) < N_FACTORS,
                Format,
                "stump factor {} out of range",
                factor[i]
            );
            stumps.push(Stump {
                factor: factor[i] as usize,
                threshold: threshold[i],
                left: left[i],
                right: right[i],
            });
        }
        Ok(Self {
            base: t.scalar("base")?,
            stumps,
            constant: t.scalar("constant")? != 0.0,
        })
    }
}

/// Candidate split points: midpoints between distinct quantile values.
fn thresholds(values: &[f64], bins: usize) -> Vec<f64> {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    if sorted.len() < 2 {
        return Vec::new();
    }
    let picks = bins.max(1).min(sorted.len() - 1);
    let mut out: Vec<f64> = (1..=picks)
        .map(|k| {
            let i = (k * (sorted.len() - 1)) / (picks + 1);
            0.5 * (sorted[i] + sorted[i + 1])
        })
        .collect();
    out.dedup();
    out
}

/// Boosted stumps on squared loss against the mean of the three labels.
pub fn fit_sfc(labeled: &[CorpusRecord], cfg: &SfcConfig) -> Result<SfcModel> {
    let rows: Vec<(&FactorVector, f64)> = labeled
        .iter()
        .filter_map(|r| r.labels.map(|l| (&r.factors, l.mean())))
        .collect();
    ensure!(
        !rows.is_empty(),
        InvalidArgument,
        "no labelled records to fit on"
    );
    let n = rows.len();
    let y: Vec<f64> = rows.iter().map(|r| r.1).collect();
    let base = y.iter().sum::<f64>() / n as f64;
    let constant = y.iter().all(|&v| v == y[0]);
    if constant || cfg.rounds == 0 {
        return Ok(SfcModel {
            base,
            stumps: Vec::new(),
            constant,
        });
    }
    // per factor: row order by value and candidate thresholds
    let columns: Vec<Vec<f64>> = (0..N_FACTORS)
        .map(|k| rows.iter().map(|r| r.0.values()[k]).collect())
        .collect();
    let orders: Vec<Vec<usize>> = columns
        .iter()
        .map(|c| {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.sort_by(|&a, &b| c[a].total_cmp(&c[b]));
            idx
        })
        .collect();
    let cuts: Vec<Vec<f64>> = columns.iter().map(|c| thresholds(c, cfg.bins)).collect();

    let mut pred = vec![base; n];
    let mut stumps = Vec::with_capacity(cfg.rounds);
    for _ in 0..cfg.rounds {
        let resid: Vec<f64> = y.iter().zip(&pred).map(|(a, b)| a - b).collect();
        let total: f64 = resid.iter().sum();
        let mut best: Option<(f64, Stump)> = None;
        for k in 0..N_FACTORS {
            let col = &columns[k];
            let order = &orders[k];
            let mut pos = 0;
            let mut left_sum = 0.0;
            for &th in &cuts[k] {
                while pos < n && col[order[pos]] <= th {
                    left_sum += resid[order[pos]];
                    pos += 1;
                }
                if pos == 0 || pos == n {
                    continue;
                }
                let (nl, nr) = (pos as f64, (n - pos) as f64);
                let right_sum = total - left_sum;
                // reduction in squared error from the split
                let gain = left_sum * left_sum / nl + right_sum * right_sum / nr;
                if best.as_ref().is_none_or(|(g, _)| gain > *g) {
                    best = Some((
                        gain,
                        Stump {
                            factor: k,
                            threshold: th,
                            left: cfg.learning_rate * left_sum / nl,
                            right: cfg.learning_rate * right_sum / nr,
                        },
                    ));
                }
            }
        }
        let Some((_, stump)) = best else { break };
        for (p, (f, _)) in pred.iter_mut().zip(&rows) {
            *p += if f.values()[stump.factor] <= stump.threshold {
                stump.left
            } else {
                stump.right
            };
        }
        stumps.push(stump);
    }
    Ok(SfcModel {
        base,
        stumps,
        constant: false,
    })
}
