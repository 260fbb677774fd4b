//! Binomial test, Wilson interval and correlation coefficients.

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;
use statrs::function::factorial::ln_factorial;

use crate::error::{ensure, Result};

/// Above this many decisive pairs the p-value uses the normal approximation
/// with continuity correction.
pub const EXACT_LIMIT: u64 = 1000;

fn ln_pmf_half(n: u64, k: u64) -> f64 {
    ln_factorial(n) - ln_factorial(k) - ln_factorial(n - k) - n as f64 * std::f64::consts::LN_2
}

/// Two-sided p-value of `wins` out of `wins + losses` under a fair coin: the
/// total mass of outcomes no more likely than the observed one.
pub fn binomial_two_sided(wins: u64, losses: u64) -> Result<f64> {
    let n = wins + losses;
    ensure!(
        n >= 1,
        InvalidArgument,
        "binomial test needs at least one decisive pair"
    );
    if n > EXACT_LIMIT {
        let half = n as f64 / 2.0;
        let z = ((wins as f64 - half).abs() - 0.5).max(0.0) / (n as f64 / 4.0).sqrt();
        return Ok(erfc(z / std::f64::consts::SQRT_2).clamp(0.0, 1.0));
    }
    let observed = ln_pmf_half(n, wins);
    // relative slack so mirrored outcomes with equal mass are both counted
    let cut = observed + 1e-9;
    let p: f64 = (0..=n)
        .map(|k| ln_pmf_half(n, k))
        .filter(|&l| l <= cut)
        .map(f64::exp)
        .sum();
    Ok(p.clamp(0.0, 1.0))
}

/// Wilson score interval for a proportion; `(0, 1)` when `n = 0`.
pub fn wilson_interval(successes: u64, n: u64, z: f64) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let n = n as f64;
    let p = successes as f64 / n;
    let z2 = z * z;
    let centre = (p + z2 / (2.0 * n)) / (1.0 + z2 / n);
    let half = z / (1.0 + z2 / n) * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt();
    ((centre - half).max(0.0), (centre + half).min(1.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub pearson: f64,
    pub spearman: f64,
}

fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    ensure!(
        saa > 0.0 && sbb > 0.0,
        InvalidArgument,
        "correlation of a constant series"
    );
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Ranks starting at 1, ties sharing their mean rank.
pub fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

/// Sample Pearson and Spearman (Pearson of tie-averaged ranks) coefficients.
pub fn correlation_report(a: &[f64], b: &[f64]) -> Result<Correlation> {
    ensure!(
        a.len() == b.len(),
        Shape,
        "series of length {} and {}",
        a.len(),
        b.len()
    );
    ensure!(
        a.len() >= 3,
        InvalidArgument,
        "correlation needs at least 3 points"
    );
    ensure!(
        a.iter().chain(b).all(|v| v.is_finite()),
        NonFinite,
        "correlation input"
    );
    Ok(Correlation {
        pearson: pearson(a, b)?,
        spearman: pearson(&ranks(a), &ranks(b))?,
    })
}
