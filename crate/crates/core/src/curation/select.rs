use super::score::ceil_share;
use super::CorpusRecord;
use crate::error::{ensure, Result};
use crate::rng::RngStream;

fn ranked<'a>(
    records: &'a [CorpusRecord],
    score: &impl Fn(&CorpusRecord) -> f64,
) -> Vec<&'a CorpusRecord> {
    let mut v: Vec<(f64, &CorpusRecord)> = records.iter().map(|r| (score(r), r)).collect();
    v.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.id.cmp(&b.1.id)));
    v.into_iter().map(|(_, r)| r).collect()
}

/// The best `ceil(n * fraction)` records by `score`, ties by id.
pub fn top_by(
    records: &[CorpusRecord],
    score: impl Fn(&CorpusRecord) -> f64,
    fraction: f64,
) -> Result<Vec<CorpusRecord>> {
    ensure!(
        fraction > 0.0 && fraction <= 1.0,
        InvalidArgument,
        "fraction {fraction} outside (0, 1]"
    );
    let k = ceil_share(records.len(), fraction);
    Ok(ranked(records, &score)
        .into_iter()
        .take(k)
        .cloned()
        .collect())
}

/// Top share by `score` with at most `monotonic_quota` of the result on a
/// plain background; excess plain-background records give way to the next
/// best textured ones. Output is in rank order.
pub fn select_top(
    records: &[CorpusRecord],
    score: impl Fn(&CorpusRecord) -> f64,
    fraction: f64,
    monotonic_quota: f64,
) -> Result<Vec<CorpusRecord>> {
    ensure!(
        fraction > 0.0 && fraction <= 1.0,
        InvalidArgument,
        "fraction {fraction} outside (0, 1]"
    );
    ensure!(
        (0.0..=1.0).contains(&monotonic_quota),
        InvalidArgument,
        "monotonic quota {monotonic_quota} outside [0, 1]"
    );
    let k = ceil_share(records.len(), fraction);
    let cap = (monotonic_quota * k as f64 + 1e-9).floor() as usize;
    let order = ranked(records, &score);
    let mut mono_taken = 0;
    let mut picked: Vec<&CorpusRecord> = Vec::with_capacity(k);
    for r in order {
        if picked.len() == k {
            break;
        }
        if r.monotonic_bg {
            if mono_taken < cap {
                mono_taken += 1;
                picked.push(r);
            }
        } else {
            picked.push(r);
        }
    }
    // too few textured records to fill up: shed the weakest plain ones
    // until the share respects the quota again
    if monotonic_quota < 1.0 {
        let textured = picked.len() - mono_taken;
        let mut allowed = mono_taken;
        while allowed > 0 && allowed as f64 > monotonic_quota * (allowed + textured) as f64 + 1e-9 {
            allowed -= 1;
        }
        let mut seen = 0;
        picked.retain(|r| {
            if r.monotonic_bg {
                seen += 1;
                seen <= allowed
            } else {
                true
            }
        });
    }
    Ok(picked.into_iter().cloned().collect())
}

/// Uniform sample without replacement of `floor(n * fraction)` records,
/// in input order.
pub fn subsample_uniform(
    records: &[CorpusRecord],
    fraction: f64,
    stream: &RngStream,
) -> Result<Vec<CorpusRecord>> {
    ensure!(
        fraction > 0.0 && fraction <= 1.0,
        InvalidArgument,
        "fraction {fraction} outside (0, 1]"
    );
    let n = records.len();
    let k = ((n as f64 * fraction + 1e-9).floor() as usize).min(n);
    let mut idx = rand::seq::index::sample(&mut stream.rng(), n, k).into_vec();
    idx.sort_unstable();
    Ok(idx.into_iter().map(|i| records[i].clone()).collect())
}
