//! The full selection pipeline: fit the Image Score and the SFC on the
//! labelled slice, prefilter, then take the SFC top share under the
//! plain-background quota.

use serde::{Deserialize, Serialize};

use super::score::ceil_share;
use super::{
    fit_score_weights, fit_sfc, prefilter, select_top, CorpusRecord, PrefilterLimits, SfcConfig,
};
use crate::error::{ensure, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurateConfig {
    /// Share of the input corpus to keep.
    pub fraction: f64,
    /// Largest share of the selection allowed on a plain background.
    pub monotonic_quota: f64,
    pub limits: PrefilterLimits,
    pub sfc: SfcConfig,
}

impl Default for CurateConfig {
    fn default() -> Self {
        Self {
            fraction: 0.1,
            monotonic_quota: 0.1,
            limits: PrefilterLimits::default(),
            sfc: SfcConfig::default(),
        }
    }
}

/// Survivor counts after each stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurationReport {
    pub input: usize,
    pub labeled: usize,
    pub size_aspect: usize,
    pub prefiltered: usize,
    pub selected: usize,
    pub selected_monotonic: usize,
}

pub fn curate(
    records: &[CorpusRecord],
    cfg: &CurateConfig,
) -> Result<(Vec<CorpusRecord>, CurationReport)> {
    ensure!(!records.is_empty(), InvalidArgument, "empty corpus");
    ensure!(
        cfg.fraction > 0.0 && cfg.fraction <= 1.0,
        InvalidArgument,
        "fraction {} outside (0, 1]",
        cfg.fraction
    );
    let labeled: Vec<CorpusRecord> = records
        .iter()
        .filter(|r| r.labels.is_some())
        .cloned()
        .collect();
    ensure!(
        labeled.len() >= 2,
        InvalidArgument,
        "curation needs labelled records to fit its rankers, found {}",
        labeled.len()
    );
    let weights = fit_score_weights(&labeled)?;
    let sfc = fit_sfc(&labeled, &cfg.sfc)?;
    let size_aspect = records.iter().filter(|r| cfg.limits.admits(r)).count();
    let pre = prefilter(records, &weights, &cfg.limits);
    let target = ceil_share(records.len(), cfg.fraction).min(pre.len());
    let selected = if pre.is_empty() || target == 0 {
        Vec::new()
    } else {
        select_top(
            &pre,
            |r| sfc.score(&r.factors),
            target as f64 / pre.len() as f64,
            cfg.monotonic_quota,
        )?
    };
    let report = CurationReport {
        input: records.len(),
        labeled: labeled.len(),
        size_aspect,
        prefiltered: pre.len(),
        selected: selected.len(),
        selected_monotonic: selected.iter().filter(|r| r.monotonic_bg).count(),
    };
    Ok((selected, report))
}
