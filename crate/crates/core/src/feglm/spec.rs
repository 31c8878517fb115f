//! Translation of a model specification plus panel into a numeric problem.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{FeProblem, Factor};
use crate::doseresponse::natural_spline_basis;
use crate::error::{Error, Result};
use crate::panel::{PanelRow, ZipYearPanel, AGE_BANDS};

/// Median income enters the design in units of this many dollars.
pub const INCOME_SCALE: f64 = 10_000.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Covariate {
    MedianIncome,
    Groundwater,
    /// Percent of the population in age band `k` of [`AGE_BANDS`].
    AgeShare(usize),
}

impl Covariate {
    pub fn name(&self) -> String {
        match self {
            Covariate::MedianIncome => "median_income".into(),
            Covariate::Groundwater => "groundwater".into(),
            Covariate::AgeShare(k) => format!("pct_{}", AGE_BANDS[*k]),
        }
    }

    fn value(&self, r: &PanelRow) -> f64 {
        match self {
            Covariate::MedianIncome => r.median_income / INCOME_SCALE,
            Covariate::Groundwater => f64::from(u8::from(r.groundwater)),
            Covariate::AgeShare(k) => r.age_shares[*k],
        }
    }

    pub fn age_shares() -> Vec<Covariate> {
        (0..AGE_BANDS.len()).map(Covariate::AgeShare).collect()
    }

    /// Income, water source and the five age shares.
    pub fn primary_set() -> Vec<Covariate> {
        let mut v = vec![Covariate::MedianIncome, Covariate::Groundwater];
        v.extend(Self::age_shares());
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Outcome {
    /// All-cause death counts.
    Deaths,
    /// Age-adjusted rate per 100,000 converted to rounded expected counts.
    AgeAdjustedCounts,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum YearEffect {
    /// Year as an absorbed factor.
    Fixed,
    /// Natural cubic spline in calendar year with this many degrees of freedom.
    NaturalSpline { df: usize },
}

/// Outcome, covariates and fixed-effect structure of one regression. The
/// offset is always log population and zip is always absorbed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionSpec {
    pub outcome: Outcome,
    pub covariates: Vec<Covariate>,
    pub year: YearEffect,
    pub cluster_by_zip: bool,
}

impl Default for RegressionSpec {
    fn default() -> Self {
        Self::primary()
    }
}

/// A numeric problem plus the panel row behind each of its rows.
#[derive(Debug, Clone)]
pub struct DesignRows {
    pub problem: FeProblem,
    pub panel_rows: Vec<usize>,
}

impl RegressionSpec {
    pub fn primary() -> Self {
        Self {
            outcome: Outcome::Deaths,
            covariates: Covariate::primary_set(),
            year: YearEffect::Fixed,
            cluster_by_zip: true,
        }
    }

    pub fn with_covariates(mut self, covariates: Vec<Covariate>) -> Self {
        self.covariates = covariates;
        self
    }

    pub fn with_outcome(mut self, outcome: Outcome) -> Self {
        self.outcome = outcome;
        self
    }

    /// Builds the problem on rows where every exposure is observed, every
    /// covariate is finite and the outcome is available.
    pub fn build(&self, panel: &ZipYearPanel, exposures: &[(&str, &[Option<f64>])]) -> Result<DesignRows> {
        let n_all = panel.n_rows();
        for (name, v) in exposures {
            if v.len() != n_all {
                return Err(Error::InvalidInput(format!(
                    "exposure `{name}` has {} values for {n_all} rows",
                    v.len()
                )));
            }
        }
        let outcome = |r: &PanelRow| -> Option<f64> {
            match self.outcome {
                Outcome::Deaths => Some(r.deaths as f64),
                Outcome::AgeAdjustedCounts => r
                    .age_adjusted_rate
                    .filter(|v| v.is_finite() && *v >= 0.0)
                    .map(|rate| (rate * r.population / 1e5).round()),
            }
        };
        let rows: Vec<usize> = (0..n_all)
            .filter(|&i| {
                let r = &panel.rows()[i];
                exposures.iter().all(|(_, v)| v[i].is_some_and(f64::is_finite))
                    && self.covariates.iter().all(|c| c.value(r).is_finite())
                    && outcome(r).is_some()
            })
            .collect();
        if rows.is_empty() {
            let what = exposures.iter().map(|(n, _)| *n).collect::<Vec<_>>().join(", ");
            return Err(Error::NoData(format!("no complete rows for [{what}]")));
        }
        let prow = |i: usize| &panel.rows()[rows[i]];
        let n = rows.len();

        let spline = match self.year {
            YearEffect::Fixed => None,
            YearEffect::NaturalSpline { df } => {
                let years: Vec<f64> = rows.iter().map(|&i| f64::from(panel.rows()[i].year)).collect();
                Some(natural_spline_basis(&years, df)?)
            }
        };
        let n_spline = spline.as_ref().map_or(0, |s| s.ncols());
        let p = exposures.len() + self.covariates.len() + n_spline;
        let mut names: Vec<String> = exposures.iter().map(|(n, _)| n.to_string()).collect();
        names.extend(self.covariates.iter().map(Covariate::name));
        names.extend((1..=n_spline).map(|k| format!("year_ns{k}")));

        let x = DMatrix::from_fn(n, p, |i, j| {
            if j < exposures.len() {
                exposures[j].1[rows[i]].expect("complete case")
            } else if j < exposures.len() + self.covariates.len() {
                self.covariates[j - exposures.len()].value(prow(i))
            } else {
                spline.as_ref().expect("spline present")[(i, j - exposures.len() - self.covariates.len())]
            }
        });
        let y: Vec<f64> = (0..n).map(|i| outcome(prow(i)).expect("filtered")).collect();
        let offset: Vec<f64> = (0..n).map(|i| prow(i).population.ln()).collect();
        let zips: Vec<&str> = (0..n).map(|i| prow(i).zip.as_str()).collect();
        let zip = Factor::from_keys(&zips);
        let mut factors = vec![zip.clone()];
        if self.year == YearEffect::Fixed {
            let years: Vec<i32> = (0..n).map(|i| prow(i).year).collect();
            factors.push(Factor::from_keys(&years));
        }
        Ok(DesignRows {
            problem: FeProblem {
                y,
                offset,
                x,
                names,
                n_exposures: exposures.len(),
                factors,
                clusters: self.cluster_by_zip.then_some(zip),
                prior_weights: None,
            },
            panel_rows: rows,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::panel::tests::row;
    use crate::panel::AnalyteColumn;

    #[test]
    fn complete_cases_and_names() {
        let mut rows: Vec<PanelRow> = (0..4).map(|i| row(&format!("z{}", i / 2), 2012 + i % 2, 3)).collect();
        rows[1].age_adjusted_rate = Some(500.0);
        let a = AnalyteColumn::new("a", "c", vec![Some(1.0), None, Some(0.5), Some(-0.5)]);
        let panel = ZipYearPanel::new(rows, vec![a]).unwrap();
        let vals = panel.analytes()[0].values.clone();
        let d = RegressionSpec::primary().build(&panel, &[("a", &vals)]).unwrap();
        assert_eq!(d.panel_rows, vec![0, 2, 3]);
        assert_eq!(d.problem.names[0], "a");
        assert_eq!(d.problem.names[1], "median_income");
        assert_eq!(d.problem.x[(0, 1)], 5.0);
        assert_eq!(d.problem.factors.len(), 2);

        let spec = RegressionSpec::primary().with_outcome(Outcome::AgeAdjustedCounts);
        let vals = vec![Some(1.0); 4];
        let d = spec.build(&panel, &[("a", &vals)]).unwrap();
        assert_eq!(d.panel_rows, vec![1]);
        assert_eq!(d.problem.y, vec![5.0]);
    }
}
