//! Column filters (missingness, near-zero variance) and z-scoring of analytes.

use std::collections::HashMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panel::{AnalyteColumn, Standardization, ZipYearPanel};
use crate::table::{fmt_f64, fmt_flag, TableWriter};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FilterConfig {
    /// Drop an analyte when its missing fraction is at least this.
    pub missing_threshold: f64,
    pub nzv_freq_ratio: f64,
    /// Percent of unique values.
    pub nzv_unique_pct: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            missing_threshold: 0.5,
            nzv_freq_ratio: 19.0,
            nzv_unique_pct: 0.1024,
        }
    }
}

/// True when the column should be dropped for missingness.
pub fn filter_missingness(missing_fraction: f64, threshold: f64) -> bool {
    missing_fraction >= threshold
}

/// Frequency ratio and percent of unique values over the non-missing entries.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NzvStats {
    pub freq_ratio: f64,
    pub unique_pct: f64,
}

/// Rounds to 12 significant digits so float noise does not inflate the unique count.
fn rounded_key(x: f64) -> u64 {
    if x == 0.0 {
        return 0;
    }
    let r: f64 = format!("{x:.11e}").parse().expect("formatted float parses");
    r.to_bits()
}

pub fn nzv_stats(values: &[f64]) -> NzvStats {
    let mut counts: HashMap<u64, usize> = HashMap::new();
    for &v in values {
        *counts.entry(rounded_key(v)).or_default() += 1;
    }
    let mut freq: Vec<usize> = counts.values().copied().collect();
    freq.sort_unstable_by(|a, b| b.cmp(a));
    let freq_ratio = match freq.as_slice() {
        [] | [_] => f64::INFINITY,
        [first, second, ..] => *first as f64 / *second as f64,
    };
    let unique_pct = if values.is_empty() {
        0.0
    } else {
        counts.len() as f64 * 100.0 / values.len() as f64
    };
    NzvStats { freq_ratio, unique_pct }
}

/// True (drop) iff the frequency ratio exceeds the limit and the unique
/// percentage is below the limit.
pub fn near_zero_variance(values: &[f64], freq_ratio_limit: f64, unique_pct_limit: f64) -> bool {
    let s = nzv_stats(values);
    s.freq_ratio > freq_ratio_limit && s.unique_pct < unique_pct_limit
}

/// Sample mean and (n − 1) standard deviation of the observed entries.
pub fn column_moments(values: &[Option<f64>]) -> Option<Standardization> {
    let obs: Vec<f64> = values.iter().filter_map(|v| *v).collect();
    if obs.len() < 2 {
        return None;
    }
    let n = obs.len() as f64;
    let mean = obs.iter().sum::<f64>() / n;
    let ss: f64 = obs.iter().map(|x| (x - mean).powi(2)).sum();
    Some(Standardization {
        mean,
        sd: (ss / (n - 1.0)).sqrt(),
    })
}

/// Z-scores the observed entries; missing entries stay missing.
pub fn standardize(values: &[Option<f64>]) -> Result<(Vec<Option<f64>>, Standardization)> {
    let st = column_moments(values)
        .ok_or_else(|| Error::InvalidInput("standardize needs at least two observed values".into()))?;
    if !(st.sd > 0.0) {
        return Err(Error::InvalidInput("standardize: zero standard deviation".into()));
    }
    Ok((values.iter().map(|v| v.map(|x| st.apply(x))).collect(), st))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ColumnSummary {
    pub analyte: String,
    pub n_nonmissing: usize,
    pub missing_pct: f64,
    pub freq_ratio: f64,
    pub unique_pct: f64,
    pub kept: bool,
    pub mean: Option<f64>,
    pub sd: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct PreparedPanel {
    pub panel: ZipYearPanel,
    pub summary: Vec<ColumnSummary>,
}

impl PreparedPanel {
    pub fn n_kept(&self) -> usize {
        self.summary.iter().filter(|s| s.kept).count()
    }
}

/// Applies both filters and z-scores the surviving analytes.
pub fn prepare_panel(panel: &ZipYearPanel, config: &FilterConfig) -> Result<PreparedPanel> {
    if !(config.missing_threshold > 0.0 && config.missing_threshold <= 1.0) {
        return Err(Error::InvalidInput(format!(
            "missingness threshold {} outside (0, 1]",
            config.missing_threshold
        )));
    }
    let n = panel.n_rows();
    let results: Vec<(ColumnSummary, Option<AnalyteColumn>)> = panel
        .analytes()
        .par_iter()
        .map(|col| {
            let obs: Vec<f64> = col.observed().collect();
            let missing_fraction = if n == 0 { 1.0 } else { col.n_missing() as f64 / n as f64 };
            let stats = nzv_stats(&obs);
            let drop_missing = obs.is_empty() || filter_missingness(missing_fraction, config.missing_threshold);
            let drop_nzv = stats.freq_ratio > config.nzv_freq_ratio && stats.unique_pct < config.nzv_unique_pct;
            let moments = column_moments(&col.values);
            let zero_sd = moments.is_none_or(|m| !(m.sd > 0.0));
            let kept = !drop_missing && !drop_nzv && !zero_sd;
            let new_col = if kept {
                let (values, st) = standardize(&col.values)?;
                Some(AnalyteColumn {
                    name: col.name.clone(),
                    class: col.class.clone(),
                    values,
                    standardization: Some(st),
                })
            } else {
                None
            };
            Ok((
                ColumnSummary {
                    analyte: col.name.clone(),
                    n_nonmissing: obs.len(),
                    missing_pct: missing_fraction * 100.0,
                    freq_ratio: stats.freq_ratio,
                    unique_pct: stats.unique_pct,
                    kept,
                    mean: moments.map(|m| m.mean),
                    sd: moments.map(|m| m.sd),
                },
                new_col,
            ))
        })
        .collect::<Result<_>>()?;
    let (summary, cols): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    let panel = panel.with_analytes(cols.into_iter().flatten().collect())?;
    Ok(PreparedPanel { panel, summary })
}

pub fn write_summary_csv(summary: &[ColumnSummary], path: &Path) -> Result<()> {
    let mut w = TableWriter::create(
        path,
        &["analyte", "n_nonmissing", "missing_pct", "freq_ratio", "unique_pct", "kept", "mean", "sd"],
    )?;
    for s in summary {
        w.row([
            s.analyte.clone(),
            s.n_nonmissing.to_string(),
            fmt_f64(s.missing_pct),
            fmt_f64(s.freq_ratio),
            fmt_f64(s.unique_pct),
            fmt_flag(s.kept).to_string(),
            crate::table::fmt_opt(s.mean),
            crate::table::fmt_opt(s.sd),
        ])?;
    }
    w.finish()
}
