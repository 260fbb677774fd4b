//! Checkpoint sweeps: every selected checkpoint against two baselines, three
//! independent repeats each.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{sbs_compare, EvalPrompt, ImageSource, JudgeConfig};
use crate::error::{ensure, Error, Result};
use crate::rng::RngStream;

pub const REPEATS: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub step: usize,
    pub baseline: String,
    pub repeat: usize,
    pub win_rate: f64,
    pub p_value: f64,
    pub n_pairs: u64,
}

/// Loads a checkpoint as something that can be sampled.
pub type SourceLoader<'a> = dyn Fn(&Path) -> Result<Box<dyn ImageSource>> + 'a;

/// Compare every checkpoint whose step is a multiple of `every_n` against
/// both baselines, [`REPEATS`] times each with fresh seeds and judges.
#[allow(clippy::too_many_arguments)]
pub fn sweep_harness(
    checkpoints: &[(usize, PathBuf)],
    load: &SourceLoader<'_>,
    baselines: [(&str, &dyn ImageSource); 2],
    every_n: usize,
    prompts: &[EvalPrompt],
    seeds_per_prompt: usize,
    judge: &JudgeConfig,
    stream: &RngStream,
) -> Result<Vec<SweepRow>> {
    ensure!(every_n >= 1, InvalidArgument, "every_n must be at least 1");
    let selected: Vec<&(usize, PathBuf)> = checkpoints
        .iter()
        .filter(|(s, _)| s % every_n == 0)
        .collect();
    for (_, path) in &selected {
        if !path.is_file() {
            return Err(Error::io(
                path,
                std::io::Error::new(std::io::ErrorKind::NotFound, "checkpoint not found"),
            ));
        }
    }
    let mut rows = Vec::with_capacity(selected.len() * 2 * REPEATS);
    for (step, path) in selected {
        let model = load(path)?;
        for (name, baseline) in baselines {
            for repeat in 0..REPEATS {
                let s = stream
                    .fork(name)
                    .fork_index(*step as u64)
                    .fork_index(repeat as u64);
                let (r, _) = sbs_compare(
                    model.as_ref(),
                    baseline,
                    prompts,
                    seeds_per_prompt,
                    judge,
                    &s,
                )?;
                rows.push(SweepRow {
                    step: *step,
                    baseline: name.to_string(),
                    repeat,
                    win_rate: r.win_rate_a,
                    p_value: r.p_value,
                    n_pairs: r.pairs(),
                });
            }
        }
    }
    Ok(rows)
}

pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::Format(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_sweep_csv(path: &Path) -> Result<Vec<SweepRow>> {
    let mut r = csv::Reader::from_path(path)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    r.deserialize()
        .map(|row| row.map_err(|e| Error::Format(e.to_string())))
        .collect()
}

/// Mean and sample std of the repeats at one step against one baseline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub step: usize,
    pub baseline: String,
    pub mean: f64,
    pub std: f64,
    pub repeats: usize,
}

pub fn summarize_sweep(rows: &[SweepRow]) -> Vec<SweepPoint> {
    let mut keys: Vec<(usize, String)> =
        rows.iter().map(|r| (r.step, r.baseline.clone())).collect();
    keys.sort();
    keys.dedup();
    keys.into_iter()
        .map(|(step, baseline)| {
            let v: Vec<f64> = rows
                .iter()
                .filter(|r| r.step == step && r.baseline == baseline)
                .map(|r| r.win_rate)
                .collect();
            let n = v.len() as f64;
            let mean = v.iter().sum::<f64>() / n;
            let std = if v.len() > 1 {
                (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
            } else {
                0.0
            };
            SweepPoint {
                step,
                baseline,
                mean,
                std,
                repeats: v.len(),
            }
        })
        .collect()
}
