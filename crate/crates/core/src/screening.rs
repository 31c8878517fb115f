//! The analyte-wide screen: one fixed-effects Poisson fit per analyte,
//! Benjamini–Hochberg adjustment, robustness checks and attributable deaths.

use std::fmt;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feglm::{fit_poisson_fe, Covariate, FitOptions, FitResult, Outcome, RegressionSpec};
use crate::laglead::{fit_dlm, DlmConfig, DlmResult};
use crate::panel::ZipYearPanel;
use crate::stats::RateIncrease;
use crate::table::{fmt_f64, fmt_opt, TableWriter, NA};

/// Benjamini–Hochberg step-up adjusted p-values, in input order.
pub fn bh_adjust(p: &[f64]) -> Vec<f64> {
    let m = p.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| p[a].total_cmp(&p[b]).then(a.cmp(&b)));
    let mut out = vec![0.0; m];
    let mut running = 1.0f64;
    for (rank, &i) in order.iter().enumerate().rev() {
        running = running.min(p[i] * (m as f64 / (rank + 1) as f64));
        out[i] = running.min(1.0);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Status {
    NotSignificant,
    ExcludedAfterChecks,
    Retained,
    /// The primary fit produced no p-value.
    Failed,
}

impl fmt::Display for Status {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Status::NotSignificant => "not_significant",
            Status::ExcludedAfterChecks => "excluded_after_checks",
            Status::Retained => "retained",
            Status::Failed => "fit_failed",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Flag {
    pub pass: bool,
    pub reason: Option<String>,
}

impl Flag {
    fn ok(pass: bool) -> Self {
        Self { pass, reason: None }
    }

    fn failed(reason: String) -> Self {
        Self {
            pass: false,
            reason: Some(reason),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScreenConfig {
    pub spec: RegressionSpec,
    pub alpha: f64,
    pub dlm: DlmConfig,
    pub fit: FitOptions,
    /// Clip negative per-row attributable fractions to zero.
    pub clip_attribution: bool,
}

impl Default for ScreenConfig {
    fn default() -> Self {
        Self {
            spec: RegressionSpec::primary(),
            alpha: 0.05,
            dlm: DlmConfig::default(),
            fit: FitOptions::default(),
            clip_attribution: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScreenRow {
    pub analyte: String,
    pub class: String,
    pub n_obs: usize,
    pub coef: Option<f64>,
    pub se: Option<f64>,
    pub increase: Option<RateIncrease>,
    pub p_value: Option<f64>,
    pub bh_p: Option<f64>,
    /// M1..M6; present only for analytes that pass the BH screen.
    pub flags: Option<Vec<Flag>>,
    pub status: Status,
    pub dropped_groups: usize,
    pub iterations: usize,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttributionResult {
    pub analyte: String,
    pub total: f64,
    pub ci: (f64, f64),
    /// `(zip, year, attributable deaths)` per used row.
    pub rows: Vec<(String, i32, f64)>,
}

#[derive(Debug, Clone)]
pub struct ScreenOutput {
    pub rows: Vec<ScreenRow>,
    pub attribution: Vec<AttributionResult>,
    /// DLM results computed for the robustness checks.
    pub dlm: Vec<DlmResult>,
}

/// Primary fit of one analyte, with the panel rows it used.
#[derive(Debug, Clone)]
pub struct AnalyteFit {
    pub fit: FitResult,
    pub panel_rows: Vec<usize>,
    pub exposure: Vec<f64>,
    pub outcome: Vec<f64>,
}

pub fn fit_analyte(panel: &ZipYearPanel, analyte: &str, spec: &RegressionSpec, opts: &FitOptions) -> Result<AnalyteFit> {
    let col = panel
        .analyte(analyte)
        .ok_or_else(|| Error::InvalidInput(format!("unknown analyte `{analyte}`")))?;
    let design = spec.build(panel, &[(analyte, &col.values)])?;
    let fit = fit_poisson_fe(&design.problem, opts)?;
    let used = &fit.used_rows;
    Ok(AnalyteFit {
        panel_rows: used.iter().map(|&i| design.panel_rows[i]).collect(),
        exposure: used.iter().map(|&i| design.problem.x[(i, 0)]).collect(),
        outcome: used.iter().map(|&i| design.problem.y[i]).collect(),
        fit,
    })
}

/// The four alternative specifications M1..M4 derived from `primary`.
pub fn ladder_specs(primary: &RegressionSpec) -> [RegressionSpec; 4] {
    let no_age: Vec<Covariate> = primary
        .covariates
        .iter()
        .copied()
        .filter(|c| !matches!(c, Covariate::AgeShare(_)))
        .collect();
    let mut income_age = vec![Covariate::MedianIncome];
    income_age.extend(Covariate::age_shares());
    [
        primary.clone().with_outcome(Outcome::AgeAdjustedCounts).with_covariates(no_age),
        primary.clone().with_covariates(Vec::new()),
        primary.clone().with_covariates(income_age),
        primary.clone().with_covariates(Covariate::age_shares()),
    ]
}

/// Flags M1..M6 for one analyte; `primary_coef` fixes the reference sign.
pub fn robustness_ladder(
    panel: &ZipYearPanel,
    analyte: &str,
    primary_coef: f64,
    config: &ScreenConfig,
) -> (Vec<Flag>, Option<DlmResult>) {
    let mut flags: Vec<Flag> = ladder_specs(&config.spec)
        .par_iter()
        .map(|spec| match fit_analyte(panel, analyte, spec, &config.fit) {
            Ok(f) => {
                let same_sign = f.fit.coef[0].signum() == primary_coef.signum();
                Flag::ok(same_sign && f.fit.p_value(0) < config.alpha)
            }
            Err(e) => Flag::failed(e.to_string()),
        })
        .collect();
    match fit_dlm(panel, analyte, &config.spec, &config.dlm, &config.fit) {
        Ok(d) => {
            flags.push(Flag::ok(d.pass_cumulative(Some(primary_coef))));
            flags.push(if config.dlm.lead.is_some() {
                Flag::ok(d.pass_lead())
            } else {
                Flag::failed("no lead term configured".into())
            });
            (flags, Some(d))
        }
        Err(e) => {
            let msg = e.to_string();
            flags.push(Flag::failed(msg.clone()));
            flags.push(Flag::failed(msg));
            (flags, None)
        }
    }
}

/// Per-row attributable fraction `1 − exp(−βA)`, optionally clipped at 0.
pub fn attributable_fraction(beta: f64, a: f64, clip: bool) -> f64 {
    let af = -(-beta * a).exp_m1();
    if clip {
        af.max(0.0)
    } else {
        af
    }
}

fn attributable_total(beta: f64, exposure: &[f64], outcome: &[f64], clip: bool) -> f64 {
    exposure.iter().zip(outcome).map(|(a, y)| y * attributable_fraction(beta, *a, clip)).sum()
}

pub fn attributable_mortality(panel: &ZipYearPanel, analyte: &str, fit: &AnalyteFit, clip: bool) -> AttributionResult {
    let beta = fit.fit.coef[0];
    let (lo, hi) = fit.fit.ci(0);
    let t_lo = attributable_total(lo, &fit.exposure, &fit.outcome, clip);
    let t_hi = attributable_total(hi, &fit.exposure, &fit.outcome, clip);
    let rows = fit
        .panel_rows
        .iter()
        .zip(fit.exposure.iter().zip(&fit.outcome))
        .map(|(&i, (a, y))| {
            let r = &panel.rows()[i];
            (r.zip.clone(), r.year, y * attributable_fraction(beta, *a, clip))
        })
        .collect();
    AttributionResult {
        analyte: analyte.to_string(),
        total: attributable_total(beta, &fit.exposure, &fit.outcome, clip),
        ci: (t_lo.min(t_hi), t_lo.max(t_hi)),
        rows,
    }
}

/// Screens every analyte of `panel`. Fits run in parallel; results are in
/// panel analyte order regardless of scheduling.
pub fn run_screen(panel: &ZipYearPanel, config: &ScreenConfig) -> Result<ScreenOutput> {
    if panel.analytes().is_empty() {
        return Err(Error::NoData("panel has no analytes to screen".into()));
    }
    let fits: Vec<(String, String, Result<AnalyteFit>)> = panel
        .analytes()
        .par_iter()
        .map(|a| (a.name.clone(), a.class.clone(), fit_analyte(panel, &a.name, &config.spec, &config.fit)))
        .collect();

    let pvals: Vec<(usize, f64)> = fits
        .iter()
        .enumerate()
        .filter_map(|(i, (_, _, f))| f.as_ref().ok().map(|f| (i, f.fit.p_value(0))).filter(|(_, p)| p.is_finite()))
        .collect();
    let adjusted = bh_adjust(&pvals.iter().map(|p| p.1).collect::<Vec<_>>());
    let mut bh = vec![None; fits.len()];
    for ((i, _), q) in pvals.iter().zip(adjusted) {
        bh[*i] = Some(q);
    }

    let ladders: Vec<Option<(Vec<Flag>, Option<DlmResult>)>> = fits
        .par_iter()
        .enumerate()
        .map(|(i, (name, _, f))| match (f, bh[i]) {
            (Ok(f), Some(q)) if q < config.alpha => Some(robustness_ladder(panel, name, f.fit.coef[0], config)),
            _ => None,
        })
        .collect();

    let mut rows = Vec::with_capacity(fits.len());
    let mut attribution = Vec::new();
    let mut dlm = Vec::new();
    for ((i, (name, class, f)), ladder) in fits.iter().enumerate().zip(ladders) {
        let row = match f {
            Ok(af) => {
                let fit = &af.fit;
                let (flags, status) = match ladder {
                    Some((flags, d)) => {
                        dlm.extend(d);
                        let status = if flags.iter().all(|f| f.pass) {
                            attribution.push(attributable_mortality(panel, name, af, config.clip_attribution));
                            Status::Retained
                        } else {
                            Status::ExcludedAfterChecks
                        };
                        (Some(flags), status)
                    }
                    None if bh[i].is_some() => (None, Status::NotSignificant),
                    None => (None, Status::Failed),
                };
                let p = fit.p_value(0);
                ScreenRow {
                    analyte: name.clone(),
                    class: class.clone(),
                    n_obs: fit.n_obs,
                    coef: Some(fit.coef[0]),
                    se: Some(fit.se(0)),
                    increase: Some(fit.rate_increase(0)),
                    p_value: p.is_finite().then_some(p),
                    bh_p: bh[i],
                    flags,
                    status,
                    dropped_groups: fit.dropped_groups,
                    iterations: fit.iterations,
                    error: None,
                }
            }
            Err(e) => ScreenRow {
                analyte: name.clone(),
                class: class.clone(),
                n_obs: 0,
                coef: None,
                se: None,
                increase: None,
                p_value: None,
                bh_p: None,
                flags: None,
                status: Status::Failed,
                dropped_groups: 0,
                iterations: 0,
                error: Some(e.to_string()),
            },
        };
        rows.push(row);
    }
    Ok(ScreenOutput { rows, attribution, dlm })
}

pub fn write_screen_csv(rows: &[ScreenRow], path: &Path) -> Result<()> {
    let mut w = TableWriter::create(
        path,
        &[
            "analyte", "class", "coefficient", "std_err", "increase_pct", "ci_lo", "ci_hi", "p_value", "bh_p", "m1", "m2", "m3",
            "m4", "m5", "m6", "status", "n_obs", "error",
        ],
    )?;
    for r in rows {
        let mut cells = vec![
            r.analyte.clone(),
            r.class.clone(),
            fmt_opt(r.coef),
            fmt_opt(r.se),
            fmt_opt(r.increase.map(|i| i.point)),
            fmt_opt(r.increase.map(|i| i.lo)),
            fmt_opt(r.increase.map(|i| i.hi)),
            fmt_opt(r.p_value),
            fmt_opt(r.bh_p),
        ];
        match &r.flags {
            Some(f) => cells.extend(f.iter().map(|f| u8::from(f.pass).to_string())),
            None => cells.extend(std::iter::repeat_n(NA.to_string(), 6)),
        }
        let mut notes: Vec<String> = r.error.iter().cloned().collect();
        if let Some(f) = &r.flags {
            notes.extend(f.iter().enumerate().filter_map(|(k, f)| f.reason.as_ref().map(|m| format!("M{}: {m}", k + 1))));
        }
        cells.extend([r.status.to_string(), r.n_obs.to_string(), notes.join("; ")]);
        w.row(cells)?;
    }
    w.finish()
}

pub fn write_attribution_csv(results: &[AttributionResult], path: &Path, totals_path: &Path) -> Result<()> {
    let mut w = TableWriter::create(path, &["analyte", "zip", "year", "attributable_deaths"])?;
    for a in results {
        for (zip, year, d) in &a.rows {
            w.row([a.analyte.clone(), zip.clone(), year.to_string(), fmt_f64(*d)])?;
        }
    }
    w.finish()?;
    let mut t = TableWriter::create(totals_path, &["analyte", "attributable_deaths", "ci_lo", "ci_hi"])?;
    for a in results {
        t.row([a.analyte.clone(), fmt_f64(a.total), fmt_f64(a.ci.0), fmt_f64(a.ci.1)])?;
    }
    t.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn bh_examples() {
        let close = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-15);
        assert!(close(&bh_adjust(&[0.01, 0.02, 0.03, 0.04]), &[0.04; 4]));
        assert_eq!(bh_adjust(&[0.005]), vec![0.005]);
        assert!(close(&bh_adjust(&[0.001, 0.5]), &[0.002, 0.5]));
        assert!(close(&bh_adjust(&[0.5, 0.001]), &[0.5, 0.002]));
        assert_eq!(bh_adjust(&[0.9, 0.95]), vec![0.95, 0.95]);
    }

    proptest! {
        #[test]
        fn bh_monotone_and_dominating(p in proptest::collection::vec(0.0f64..=1.0, 1..40)) {
            let q = bh_adjust(&p);
            let mut idx: Vec<usize> = (0..p.len()).collect();
            idx.sort_by(|&a, &b| p[a].total_cmp(&p[b]));
            for w in idx.windows(2) {
                prop_assert!(q[w[0]] <= q[w[1]] + 1e-15);
            }
            for (a, b) in p.iter().zip(&q) {
                prop_assert!(b >= a && *b <= 1.0);
            }
        }

        #[test]
        fn attribution_antisymmetric_without_clipping(b in -0.2f64..0.2, a in -3.0f64..3.0) {
            prop_assert_eq!(attributable_fraction(-b, -a, false), attributable_fraction(b, a, false));
        }
    }

    #[test]
    fn attribution_examples() {
        assert!((100.0 * attributable_fraction(0.0046, 1.0, true) - 0.458_944).abs() < 1e-5);
        assert_eq!(attributable_fraction(0.0, 1.0, true), 0.0);
        assert_eq!(attributable_fraction(0.01, -1.0, true), 0.0);
        assert!(attributable_fraction(0.01, -1.0, false) < 0.0);
    }

    #[test]
    fn ladder_specs_reduce_to_primary_when_differences_disabled() {
        use crate::synth::{generate_panel, SynthSpec};
        let (panel, _) = generate_panel(&SynthSpec {
            n_zips: 20,
            n_years: 5,
            n_analytes: 1,
            seed: 3,
            ..Default::default()
        })
        .unwrap();
        let primary = RegressionSpec::primary();
        let base = fit_analyte(&panel, "analyte_01", &primary, &FitOptions::default()).unwrap();
        for spec in ladder_specs(&primary) {
            // re-enable every difference: primary outcome and covariates
            let same = spec.with_outcome(primary.outcome).with_covariates(primary.covariates.clone());
            let f = fit_analyte(&panel, "analyte_01", &same, &FitOptions::default()).unwrap();
            assert_eq!(f.fit.coef, base.fit.coef);
            assert_eq!(f.fit.vcov, base.fit.vcov);
        }
    }

    #[test]
    fn screen_is_ordered_and_reproducible() {
        use crate::synth::{generate_panel, SynthSpec};
        let (panel, _) = generate_panel(&SynthSpec {
            n_zips: 30,
            n_years: 6,
            n_analytes: 5,
            beta: vec![0.0, 0.08],
            seed: 5,
            ..Default::default()
        })
        .unwrap();
        let a = run_screen(&panel, &ScreenConfig::default()).unwrap();
        let b = run_screen(&panel, &ScreenConfig::default()).unwrap();
        let names: Vec<&str> = a.rows.iter().map(|r| r.analyte.as_str()).collect();
        assert_eq!(names, panel.analyte_names());
        for (x, y) in a.rows.iter().zip(&b.rows) {
            assert_eq!(x.coef, y.coef);
            assert_eq!(x.bh_p, y.bh_p);
        }
        let planted = &a.rows[1];
        assert!(planted.bh_p.unwrap() < 0.05);
        assert!(planted.flags.is_some());
    }
}
