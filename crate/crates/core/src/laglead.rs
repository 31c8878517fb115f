//! Distributed-lag models: current and lagged exposure plus a one-year lead
//! used as a negative control, fitted jointly.

use std::collections::HashMap;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feglm::{fit_poisson_fe, DesignRows, FitOptions, FitResult, RegressionSpec};
use crate::panel::ZipYearPanel;
use crate::stats::{rate_increase, two_sided_p, RateIncrease, Z_95};
use crate::table::{fmt_f64, fmt_flag, TableWriter, NA};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DlmConfig {
    /// Lags in years; 0 is the contemporaneous exposure.
    pub lags: Vec<usize>,
    pub lead: Option<usize>,
}

impl Default for DlmConfig {
    fn default() -> Self {
        Self {
            lags: vec![0, 1, 2],
            lead: Some(1),
        }
    }
}

impl DlmConfig {
    pub fn term_names(&self) -> Vec<String> {
        let mut v: Vec<String> = self.lead.iter().map(|l| format!("lead{l}")).collect();
        v.extend(self.lags.iter().map(|l| format!("lag{l}")));
        v
    }
}

/// Shifted copies of `values`: entry `i` holds the value at the same zip and
/// year `year_i + shift`, or `None` when that year is absent or unobserved.
pub fn shifted(panel: &ZipYearPanel, values: &[Option<f64>], shift: i32) -> Vec<Option<f64>> {
    let index: HashMap<(&str, i32), usize> = panel
        .rows()
        .iter()
        .enumerate()
        .map(|(i, r)| ((r.zip.as_str(), r.year), i))
        .collect();
    panel
        .rows()
        .iter()
        .map(|r| index.get(&(r.zip.as_str(), r.year + shift)).and_then(|&j| values[j]))
        .collect()
}

/// Design with one exposure column per lead and lag term (lead first), on
/// rows where all of them are observed. Covariates, offset and fixed effects
/// stay aligned with the outcome year.
pub fn build_lag_design(panel: &ZipYearPanel, analyte: &str, spec: &RegressionSpec, config: &DlmConfig) -> Result<DesignRows> {
    let col = panel
        .analyte(analyte)
        .ok_or_else(|| Error::InvalidInput(format!("unknown analyte `{analyte}`")))?;
    let mut years: Vec<i32> = panel
        .rows()
        .iter()
        .zip(&col.values)
        .filter(|(_, v)| v.is_some())
        .map(|(r, _)| r.year)
        .collect();
    years.sort_unstable();
    years.dedup();
    if years.len() < 3 {
        return Err(Error::NoData(format!(
            "`{analyte}` is observed in {} distinct year(s); distributed lags need at least 3",
            years.len()
        )));
    }
    if config.lags.is_empty() {
        return Err(Error::InvalidInput("at least one lag is required".into()));
    }
    let names = config.term_names();
    let mut columns: Vec<Vec<Option<f64>>> = Vec::with_capacity(names.len());
    if let Some(l) = config.lead {
        columns.push(shifted(panel, &col.values, l as i32));
    }
    for &l in &config.lags {
        columns.push(shifted(panel, &col.values, -(l as i32)));
    }
    let exposures: Vec<(&str, &[Option<f64>])> = names.iter().map(String::as_str).zip(columns.iter().map(Vec::as_slice)).collect();
    spec.build(panel, &exposures)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DlmTerm {
    pub name: String,
    pub coef: f64,
    pub se: f64,
    pub ci: (f64, f64),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DlmResult {
    pub analyte: String,
    pub terms: Vec<DlmTerm>,
    /// Joint covariance of the exposure terms, row-major, in `terms` order.
    pub vcov: Vec<f64>,
    pub cumulative: f64,
    pub cumulative_se: f64,
    pub cumulative_ci: (f64, f64),
    pub cumulative_increase: RateIncrease,
    pub cumulative_p: f64,
    pub lead_ci: Option<(f64, f64)>,
    pub n_obs: usize,
    pub dropped_groups: usize,
}

impl DlmResult {
    pub fn term(&self, name: &str) -> Option<&DlmTerm> {
        self.terms.iter().find(|t| t.name == name)
    }

    /// Cumulative effect has the reference sign and its interval excludes 0.
    /// Without a reference only the interval is checked.
    pub fn pass_cumulative(&self, reference: Option<f64>) -> bool {
        let (lo, hi) = self.cumulative_ci;
        let excludes = lo > 0.0 || hi < 0.0;
        excludes && reference.is_none_or(|r| r.signum() == self.cumulative.signum())
    }

    /// Lead interval covers 0 (negative control passes).
    pub fn pass_lead(&self) -> bool {
        self.lead_ci.is_some_and(|(lo, hi)| lo <= 0.0 && hi >= 0.0)
    }
}

/// Sum of `coef[idx]` and its standard error `√(1′V1)` over `idx`.
pub fn linear_sum(coef: &[f64], vcov: &DMatrix<f64>, idx: &[usize]) -> (f64, f64) {
    let s: f64 = idx.iter().map(|&i| coef[i]).sum();
    let v: f64 = idx.iter().flat_map(|&a| idx.iter().map(move |&b| vcov[(a, b)])).sum();
    (s, v.max(0.0).sqrt())
}

pub fn summarize_dlm(analyte: &str, fit: &FitResult, config: &DlmConfig) -> DlmResult {
    let k = fit.n_exposures;
    let terms: Vec<DlmTerm> = (0..k)
        .map(|j| DlmTerm {
            name: fit.names[j].clone(),
            coef: fit.coef[j],
            se: fit.se(j),
            ci: fit.ci(j),
        })
        .collect();
    let first_lag = usize::from(config.lead.is_some());
    let lag_idx: Vec<usize> = (first_lag..k).collect();
    let (cum, cum_se) = linear_sum(&fit.coef, &fit.vcov, &lag_idx);
    DlmResult {
        analyte: analyte.to_string(),
        vcov: (0..k).flat_map(|a| (0..k).map(move |b| (a, b))).map(|(a, b)| fit.vcov[(a, b)]).collect(),
        lead_ci: config.lead.map(|_| terms[0].ci),
        terms,
        cumulative: cum,
        cumulative_se: cum_se,
        cumulative_ci: (cum - Z_95 * cum_se, cum + Z_95 * cum_se),
        cumulative_increase: rate_increase(cum, cum_se),
        cumulative_p: two_sided_p(cum / cum_se),
        n_obs: fit.n_obs,
        dropped_groups: fit.dropped_groups,
    }
}

pub fn fit_dlm(panel: &ZipYearPanel, analyte: &str, spec: &RegressionSpec, config: &DlmConfig, opts: &FitOptions) -> Result<DlmResult> {
    let design = build_lag_design(panel, analyte, spec, config)?;
    let fit = fit_poisson_fe(&design.problem, opts)?;
    Ok(summarize_dlm(analyte, &fit, config))
}

/// One row per analyte; failed fits carry their error message.
pub fn write_dlm_csv(
    results: &[(String, std::result::Result<DlmResult, String>, Option<f64>)],
    config: &DlmConfig,
    path: &Path,
) -> Result<()> {
    let names = config.term_names();
    let mut header = Vec::new();
    header.push("analyte".to_string());
    for n in names.iter().chain(std::iter::once(&"cum".to_string())) {
        for s in ["coef", "se", "ci_lo", "ci_hi"] {
            header.push(format!("{s}_{n}"));
        }
    }
    header.extend(["n_obs", "pass_m5", "pass_m6", "error"].map(String::from));
    let hdr: Vec<&str> = header.iter().map(String::as_str).collect();
    let mut w = TableWriter::create(path, &hdr)?;
    for (analyte, res, reference) in results {
        let mut row = vec![analyte.clone()];
        match res {
            Ok(r) => {
                for t in &r.terms {
                    row.extend([fmt_f64(t.coef), fmt_f64(t.se), fmt_f64(t.ci.0), fmt_f64(t.ci.1)]);
                }
                row.extend([
                    fmt_f64(r.cumulative),
                    fmt_f64(r.cumulative_se),
                    fmt_f64(r.cumulative_ci.0),
                    fmt_f64(r.cumulative_ci.1),
                    r.n_obs.to_string(),
                    fmt_flag(r.pass_cumulative(*reference)).to_string(),
                    fmt_flag(r.pass_lead()).to_string(),
                    String::new(),
                ]);
            }
            Err(msg) => {
                row.extend(std::iter::repeat_n(NA.to_string(), 4 * (names.len() + 1) + 1));
                row.extend(["0".to_string(), "0".to_string(), msg.clone()]);
            }
        }
        w.row(row)?;
    }
    w.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::panel::tests::row;
    use crate::panel::AnalyteColumn;

    fn panel(years: &[i32], zips: usize, values: impl Fn(usize, i32) -> Option<f64>) -> ZipYearPanel {
        let mut rows = Vec::new();
        let mut vals = Vec::new();
        for z in 0..zips {
            for &y in years {
                rows.push(row(&format!("z{z}"), y, 5 + (z as u64 * 7 + y as u64) % 9));
                vals.push(values(z, y));
            }
        }
        ZipYearPanel::new(rows, vec![AnalyteColumn::new("a", "c", vals)]).unwrap()
    }

    #[test]
    fn usable_outcome_years() {
        let years: Vec<i32> = (2012..=2022).collect();
        let p = panel(&years, 3, |z, y| Some((z as f64 + 1.0) * (y as f64 - 2000.0).sin()));
        let d = build_lag_design(&p, "a", &RegressionSpec::primary(), &DlmConfig::default()).unwrap();
        let mut used: Vec<i32> = d.panel_rows.iter().map(|&i| p.rows()[i].year).collect();
        used.sort_unstable();
        used.dedup();
        assert_eq!(used, (2014..=2021).collect::<Vec<_>>());
        assert_eq!(d.problem.names[..4], ["lead1", "lag0", "lag1", "lag2"]);
        let i = d.panel_rows[0];
        let r = &p.rows()[i];
        let at = |y: i32| p.analyte("a").unwrap().values[p.rows().iter().position(|q| q.zip == r.zip && q.year == y).unwrap()].unwrap();
        assert_eq!(d.problem.x[(0, 0)], at(r.year + 1));
        assert_eq!(d.problem.x[(0, 3)], at(r.year - 2));
    }

    #[test]
    fn missing_middle_year_drops_dependent_rows() {
        let years: Vec<i32> = (2012..=2019).filter(|y| *y != 2015).collect();
        let p = panel(&years, 2, |_, y| Some(y as f64));
        let d = build_lag_design(&p, "a", &RegressionSpec::primary(), &DlmConfig::default()).unwrap();
        let used: Vec<i32> = d.panel_rows.iter().map(|&i| p.rows()[i].year).collect();
        // outcome years need t−2..t+1 all present: only 2017 and 2018 qualify
        assert!(used.iter().all(|y| *y == 2017 || *y == 2018));
    }

    #[test]
    fn single_year_is_an_error() {
        let p = panel(&[2015], 4, |_, _| Some(1.0));
        assert!(build_lag_design(&p, "a", &RegressionSpec::primary(), &DlmConfig::default()).is_err());
    }

    #[test]
    fn cumulative_is_sum_with_quadratic_form_se() {
        let v = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![1e-6, 1e-6, 1e-6]));
        let (s, se) = linear_sum(&[0.01, 0.005, 0.003], &v, &[0, 1, 2]);
        assert!((s - 0.018).abs() < 1e-15);
        assert!((se - 3f64.sqrt() * 1e-3).abs() < 1e-15);
    }

    #[test]
    fn identical_columns_fail_cleanly() {
        let years: Vec<i32> = (2012..=2020).collect();
        let p = panel(&years, 4, |z, y| Some(((z * 31 + y as usize) % 7) as f64));
        let mut d = build_lag_design(&p, "a", &RegressionSpec::primary(), &DlmConfig::default()).unwrap();
        let first = d.problem.x.column(0).into_owned();
        for j in 1..4 {
            d.problem.x.set_column(j, &first);
        }
        let r = fit_poisson_fe(&d.problem, &FitOptions::default());
        assert!(matches!(r, Err(Error::DegenerateExposure(_))), "{r:?}");
    }
}
