//! Penalized-spline exposure-response curves with absorbed fixed effects.
//!
//! The exposure enters through a cubic B-spline basis with a second-order
//! difference penalty (a P-spline). Fixed effects and unpenalized covariates
//! are handled exactly as in [`crate::feglm`]; when fixed effects are present
//! the first basis column is dropped because the constant is absorbed.

mod basis;

pub use basis::{bspline_basis, difference_matrix, divided_difference_matrix, natural_spline_basis, BSplineBasis};

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feglm::{fit_penalized, FeProblem, FitOptions, FitResult, RegressionSpec};
use crate::panel::ZipYearPanel;
use crate::stats::quantile_sorted;
use crate::table::{fmt_f64, fmt_flag, TableWriter};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PsplineConfig {
    pub n_interior_knots: usize,
    pub degree: usize,
    pub penalty_order: usize,
}

impl Default for PsplineConfig {
    fn default() -> Self {
        Self {
            n_interior_knots: 20,
            degree: 3,
            penalty_order: 2,
        }
    }
}

/// Inputs of a penalized-spline Poisson fit.
#[derive(Debug, Clone)]
pub struct PsplineData {
    pub y: Vec<f64>,
    pub exposure: Vec<f64>,
    /// Unpenalized covariates, `n × q`.
    pub covariates: DMatrix<f64>,
    pub covariate_names: Vec<String>,
    pub offset: Vec<f64>,
    pub factors: Vec<crate::feglm::Factor>,
}

impl PsplineData {
    /// Complete-case data for one analyte under a regression specification.
    pub fn from_panel(panel: &ZipYearPanel, analyte: &str, spec: &RegressionSpec) -> Result<Self> {
        let col = panel
            .analyte(analyte)
            .ok_or_else(|| Error::InvalidInput(format!("unknown analyte `{analyte}`")))?;
        let d = spec.build(panel, &[(analyte, &col.values)])?;
        let pr = d.problem;
        let q = pr.x.ncols() - 1;
        Ok(Self {
            y: pr.y,
            exposure: pr.x.column(0).iter().copied().collect(),
            covariates: pr.x.columns(1, q).into_owned(),
            covariate_names: pr.names[1..].to_vec(),
            offset: pr.offset,
            factors: pr.factors,
        })
    }
}

#[derive(Debug, Clone)]
pub struct GamFit {
    pub basis: BSplineBasis,
    /// Spline coefficients over the full basis (the first is pinned to zero
    /// when fixed effects absorb the constant).
    pub spline_coef: Vec<f64>,
    pub lambda: f64,
    /// Effective degrees of freedom of the smooth term.
    pub edf: f64,
    pub covariate_coef: Vec<(String, f64)>,
    /// Constant subtracted so the curve averages zero over the observed exposures.
    pub center: f64,
    pub deviance: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Fixed-effect degrees of freedom used in GCV.
    pub fe_df: f64,
    pub n_obs: usize,
    /// The numeric problem and penalty actually fitted, kept for diagnostics.
    pub problem: FeProblem,
    pub penalty: DMatrix<f64>,
    pub fit: FitResult,
}

impl GamFit {
    fn raw_f(&self, a: f64) -> f64 {
        self.basis.eval(a).iter().zip(&self.spline_coef).map(|(b, c)| b * c).sum()
    }

    /// Fitted smooth on the link scale, centered.
    pub fn link(&self, a: f64) -> f64 {
        self.raw_f(a) - self.center
    }

    pub fn link_slope(&self, a: f64) -> f64 {
        self.basis.deriv(a).iter().zip(&self.spline_coef).map(|(b, c)| b * c).sum()
    }

    /// GCV score `n·D / (n − τ)²` with τ the total effective degrees of freedom.
    pub fn gcv(&self) -> f64 {
        let n = self.n_obs as f64;
        let tau = self.fit.edf + self.fe_df;
        n * self.deviance / (n - tau).powi(2)
    }

    /// Penalized log-likelihood (up to a constant) at coefficient vector
    /// `theta`, holding the fitted fixed-effect contribution fixed.
    pub fn penalized_loglik(&self, theta: &[f64]) -> f64 {
        let eta = self.linear_predictor(theta);
        let ll: f64 = self.used_y().zip(&eta).map(|(y, e)| y * e - e.exp()).sum();
        let t = DVector::from_column_slice(theta);
        ll - 0.5 * (t.transpose() * &self.penalty_kept() * &t)[(0, 0)]
    }

    /// Analytic gradient of [`GamFit::penalized_loglik`].
    pub fn gradient(&self, theta: &[f64]) -> Vec<f64> {
        let eta = self.linear_predictor(theta);
        let resid: Vec<f64> = self.used_y().zip(&eta).map(|(y, e)| y - e.exp()).collect();
        let x = self.kept_design();
        let t = DVector::from_column_slice(theta);
        let g = x.transpose() * DVector::from_vec(resid) - self.penalty_kept() * t;
        g.iter().copied().collect()
    }

    pub fn linear_predictor(&self, theta: &[f64]) -> Vec<f64> {
        let x = self.kept_design();
        let xb = &x * DVector::from_column_slice(theta);
        self.fit
            .used_rows
            .iter()
            .enumerate()
            .map(|(k, &i)| self.problem.offset[i] + self.fit.fe_contribution[k] + xb[k])
            .collect()
    }

    fn used_y(&self) -> impl Iterator<Item = f64> + '_ {
        self.fit.used_rows.iter().map(|&i| self.problem.y[i])
    }

    fn kept_cols(&self) -> Vec<usize> {
        self.fit
            .names
            .iter()
            .map(|n| self.problem.names.iter().position(|m| m == n).expect("kept column"))
            .collect()
    }

    /// Design restricted to used rows and estimated columns.
    pub fn kept_design(&self) -> DMatrix<f64> {
        let cols = self.kept_cols();
        DMatrix::from_fn(self.fit.used_rows.len(), cols.len(), |r, c| self.problem.x[(self.fit.used_rows[r], cols[c])])
    }

    pub fn penalty_kept(&self) -> DMatrix<f64> {
        let cols = self.kept_cols();
        DMatrix::from_fn(cols.len(), cols.len(), |a, b| self.penalty[(cols[a], cols[b])])
    }
}

/// Fits the penalized spline for smoothing parameter `lambda`.
pub fn fit_pspline(data: &PsplineData, lambda: f64, config: &PsplineConfig, opts: &FitOptions) -> Result<GamFit> {
    let basis = BSplineBasis::from_data(&data.exposure, config.n_interior_knots, config.degree)?;
    fit_pspline_with_basis(data, basis, lambda, config, opts)
}

pub fn fit_pspline_with_basis(
    data: &PsplineData,
    basis: BSplineBasis,
    lambda: f64,
    config: &PsplineConfig,
    opts: &FitOptions,
) -> Result<GamFit> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::InvalidInput(format!("smoothing parameter must be finite and ≥ 0, got {lambda}")));
    }
    let n = data.y.len();
    let dim = basis.dim();
    let absorbed = !data.factors.is_empty();
    let first = usize::from(absorbed);
    let n_spline = dim - first;
    let q = data.covariates.ncols();
    let bmat = basis.matrix(&data.exposure);
    let x = DMatrix::from_fn(n, n_spline + q, |i, j| {
        if j < n_spline {
            bmat[(i, j + first)]
        } else {
            data.covariates[(i, j - n_spline)]
        }
    });
    let mut names: Vec<String> = (first..dim).map(|k| format!("s(exposure).{k}")).collect();
    names.extend(data.covariate_names.iter().cloned());

    let d = divided_difference_matrix(&basis.greville(), config.penalty_order.min(dim.saturating_sub(1)))?;
    let dtd = d.transpose() * d;
    let mut penalty = DMatrix::zeros(n_spline + q, n_spline + q);
    for a in 0..n_spline {
        for b in 0..n_spline {
            penalty[(a, b)] = lambda * dtd[(a + first, b + first)];
        }
    }
    let problem = FeProblem {
        y: data.y.clone(),
        offset: data.offset.clone(),
        x,
        names,
        n_exposures: n_spline,
        factors: data.factors.clone(),
        clusters: None,
        prior_weights: None,
    };
    let fit = fit_penalized(&problem, Some(&penalty), opts).map_err(|e| match e {
        Error::DegenerateExposure(c) => Error::Singular(format!(
            "spline column {c} is not identified; increase the smoothing parameter or reduce the knot count"
        )),
        other => other,
    })?;

    let mut spline_coef = vec![0.0; dim];
    spline_coef[first..].copy_from_slice(&fit.coef[..n_spline]);
    let covariate_coef = fit.names[n_spline..]
        .iter()
        .cloned()
        .zip(fit.coef[n_spline..].iter().copied())
        .collect();
    let edf = fit.edf - (fit.coef.len() - n_spline) as f64;
    let fe_df = match data.factors.len() {
        0 => 0.0,
        k => {
            let rows = &fit.used_rows;
            data.factors.iter().map(|f| f.subset(rows).n_levels() as f64).sum::<f64>() - (k as f64 - 1.0)
        }
    };
    let mut gam = GamFit {
        basis,
        spline_coef,
        lambda,
        edf,
        covariate_coef,
        center: 0.0,
        deviance: fit.deviance,
        iterations: fit.iterations,
        converged: fit.converged,
        fe_df,
        n_obs: fit.n_obs,
        problem,
        penalty,
        fit,
    };
    let used: Vec<f64> = gam.fit.used_rows.iter().map(|&i| data.exposure[i]).collect();
    gam.center = used.iter().map(|&a| gam.raw_f(a)).sum::<f64>() / used.len() as f64;
    Ok(gam)
}

/// Log-spaced grid of `n` points from `lo` to `hi`.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.log10(), hi.log10());
    (0..n).map(|i| 10f64.powf(a + (b - a) * i as f64 / (n - 1) as f64)).collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LambdaSelection {
    pub lambda: f64,
    pub index: usize,
    /// `(λ, GCV, edf)` per grid point; failed fits carry `NaN`.
    pub scores: Vec<(f64, f64, f64)>,
    pub at_endpoint: bool,
}

/// GCV-minimizing smoothing parameter over `grid`.
pub fn select_lambda(data: &PsplineData, grid: &[f64], config: &PsplineConfig, opts: &FitOptions) -> Result<LambdaSelection> {
    if grid.is_empty() {
        return Err(Error::InvalidInput("empty smoothing-parameter grid".into()));
    }
    let basis = BSplineBasis::from_data(&data.exposure, config.n_interior_knots, config.degree)?;
    let scores: Vec<(f64, f64, f64)> = grid
        .par_iter()
        .map(|&lam| match fit_pspline_with_basis(data, basis.clone(), lam, config, opts) {
            Ok(f) => (lam, f.gcv(), f.edf),
            Err(_) => (lam, f64::NAN, f64::NAN),
        })
        .collect();
    let (index, _) = scores
        .iter()
        .enumerate()
        .filter(|(_, s)| s.1.is_finite())
        .fold((usize::MAX, f64::INFINITY), |acc, (i, s)| if s.1 < acc.1 { (i, s.1) } else { acc });
    if index == usize::MAX {
        return Err(Error::NoData("no smoothing parameter on the grid produced a fit".into()));
    }
    Ok(LambdaSelection {
        lambda: grid[index],
        index,
        at_endpoint: index == 0 || index == grid.len() - 1,
        scores,
    })
}

/// `d/dA exp(f(A)) = exp(f(A)) · f′(A)` with covariates held at zero.
pub fn derivative_curve(fit: &GamFit, grid: &[f64]) -> Vec<f64> {
    grid.iter().map(|&a| fit.link(a).exp() * fit.link_slope(a)).collect()
}

/// Evenly spaced grid over the observed exposure range.
pub fn exposure_grid(fit: &GamFit, n: usize) -> Vec<f64> {
    let (lo, hi) = fit.basis.range();
    let mut grid: Vec<f64> = (0..n).map(|i| (lo + (hi - lo) * i as f64 / (n - 1).max(1) as f64).min(hi)).collect();
    if n > 1 {
        grid[n - 1] = hi;
    }
    grid
}

/// Plot table: grid, fitted link, fitted response, derivative and whether
/// the grid point lies at or below the 99th percentile of the exposure.
pub fn write_curve_csv(fit: &GamFit, exposure: &[f64], n_grid: usize, path: &Path) -> Result<()> {
    let mut sorted = exposure.to_vec();
    sorted.sort_by(f64::total_cmp);
    let p99 = quantile_sorted(&sorted, 0.99);
    let grid = exposure_grid(fit, n_grid);
    let deriv = derivative_curve(fit, &grid);
    let mut w = TableWriter::create(path, &["grid", "fitted_link", "fitted_response", "derivative", "within_p99"])?;
    for (a, d) in grid.iter().zip(deriv) {
        let f = fit.link(*a);
        w.row([fmt_f64(*a), fmt_f64(f), fmt_f64(f.exp()), fmt_f64(d), fmt_flag(*a <= p99).to_string()])?;
    }
    w.finish()
}

/// Gaussian kernel density of the exposure with values above the 99th
/// percentile top-coded, on `n_grid` points.
pub fn density_table(exposure: &[f64], n_grid: usize) -> Vec<(f64, f64)> {
    let mut sorted = exposure.to_vec();
    sorted.sort_by(f64::total_cmp);
    if sorted.len() < 2 {
        return Vec::new();
    }
    let p99 = quantile_sorted(&sorted, 0.99);
    let top: Vec<f64> = sorted.iter().map(|v| v.min(p99)).collect();
    let n = top.len() as f64;
    let sd = crate::stats::sample_sd(&top);
    let iqr = quantile_sorted(&top, 0.75) - quantile_sorted(&top, 0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    let bw = if spread > 0.0 { 0.9 * spread * n.powf(-0.2) } else { 1.0 };
    let (lo, hi) = (top[0], top[top.len() - 1]);
    (0..n_grid)
        .map(|i| {
            let x = lo + (hi - lo) * i as f64 / (n_grid - 1).max(1) as f64;
            let d: f64 = top.iter().map(|v| (-0.5 * ((x - v) / bw).powi(2)).exp()).sum::<f64>()
                / (n * bw * (2.0 * std::f64::consts::PI).sqrt());
            (x, d)
        })
        .collect()
}

pub fn write_density_csv(exposure: &[f64], n_grid: usize, path: &Path) -> Result<()> {
    let mut w = TableWriter::create(path, &["value", "density"])?;
    for (x, d) in density_table(exposure, n_grid) {
        w.row([fmt_f64(x), fmt_f64(d)])?;
    }
    w.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feglm::Factor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Poisson};

    /// Zip × year panel with log-rate `truth(exposure)`.
    pub(super) fn simulate(seed: u64, n_zip: usize, n_year: usize, truth: impl Fn(f64) -> f64) -> PsplineData {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = n_zip * n_year;
        let zip_fe: Vec<f64> = (0..n_zip).map(|_| rng.random_range(-0.3..0.3)).collect();
        let year_fe: Vec<f64> = (0..n_year).map(|_| rng.random_range(-0.1..0.1)).collect();
        let mut y = Vec::with_capacity(n);
        let mut exposure = Vec::with_capacity(n);
        let mut offset = Vec::with_capacity(n);
        let mut cov = Vec::with_capacity(n);
        for i in 0..n {
            let (z, t) = (i / n_year, i % n_year);
            let a: f64 = rng.random_range(-2.0..2.0);
            let c: f64 = rng.random_range(-1.0..1.0);
            let off = (4000.0f64).ln() - 5.0;
            let mu = (off + zip_fe[z] + year_fe[t] + truth(a) + 0.1 * c).exp();
            y.push(Poisson::new(mu).unwrap().sample(&mut rng));
            exposure.push(a);
            offset.push(off);
            cov.push(c);
        }
        PsplineData {
            y,
            exposure,
            covariates: DMatrix::from_column_slice(n, 1, &cov),
            covariate_names: vec!["c".into()],
            offset,
            factors: vec![
                Factor::from_codes((0..n).map(|i| i / n_year).collect()),
                Factor::from_codes((0..n).map(|i| i % n_year).collect()),
            ],
        }
    }

    #[test]
    fn huge_penalty_gives_affine_fit() {
        let data = simulate(3, 40, 6, |a| 0.2 * a.sin());
        let fit = fit_pspline(&data, 1e12, &PsplineConfig::default(), &FitOptions::default()).unwrap();
        let grid = exposure_grid(&fit, 101);
        let (a0, a1) = (grid[0], grid[100]);
        let (f0, f1) = (fit.link(a0), fit.link(a1));
        for a in &grid {
            let line = f0 + (f1 - f0) * (a - a0) / (a1 - a0);
            assert!((fit.link(*a) - line).abs() < 1e-6);
        }
        assert!(fit.edf > 1.0 - 1e-4 && fit.edf < 1.1, "edf {}", fit.edf);
    }

    #[test]
    fn grid_ends_inside_the_range() {
        let data = simulate(5, 30, 5, |a| 0.1 * a);
        let fit = fit_pspline(&data, 1.0, &PsplineConfig::default(), &FitOptions::default()).unwrap();
        let (lo, hi) = fit.basis.range();
        for n in [2, 7, 200, 201, 999] {
            let g = exposure_grid(&fit, n);
            assert_eq!((g[0], g[n - 1]), (lo, hi));
            assert!(derivative_curve(&fit, &g).iter().all(|d| *d != 0.0));
        }
    }

    #[test]
    fn derivative_of_affine_and_constant_curves() {
        let data = simulate(4, 30, 5, |a| 0.1 * a);
        let mut fit = fit_pspline(&data, 1e12, &PsplineConfig::default(), &FitOptions::default()).unwrap();
        // coefficients at the Greville abscissae reproduce an exactly affine curve
        let (t, p) = (fit.basis.knots().to_vec(), fit.basis.degree());
        let b = 0.1;
        fit.spline_coef = (0..fit.basis.dim()).map(|j| b * t[j + 1..=j + p].iter().sum::<f64>() / p as f64).collect();
        let grid = exposure_grid(&fit, 25);
        for (a, d) in grid.iter().zip(derivative_curve(&fit, &grid)) {
            assert!((fit.link_slope(*a) - b).abs() < 1e-12);
            assert!((d - b * fit.link(*a).exp()).abs() < 1e-12);
            assert!(d > 0.0);
        }
        fit.spline_coef.iter_mut().for_each(|c| *c = 0.0);
        assert!(derivative_curve(&fit, &grid).iter().all(|d| *d == 0.0));
    }

    #[test]
    fn edf_nonincreasing_in_lambda() {
        let data = simulate(5, 30, 5, |a| 0.3 * (1.5 * a).sin());
        let grid = log_grid(1e-4, 1e8, 40);
        let sel = select_lambda(&data, &grid, &PsplineConfig::default(), &FitOptions::default()).unwrap();
        for w in sel.scores.windows(2) {
            assert!(w[1].2 <= w[0].2 + 1e-6, "edf rose from {} to {}", w[0].2, w[1].2);
        }
        let again = select_lambda(&data, &grid, &PsplineConfig::default(), &FitOptions::default()).unwrap();
        assert_eq!(sel.lambda, again.lambda);
    }

    #[test]
    fn translation_equivariance() {
        let data = simulate(6, 30, 5, |a| 0.2 * a * a);
        let fit = fit_pspline(&data, 10.0, &PsplineConfig::default(), &FitOptions::default()).unwrap();
        let mut shifted = data.clone();
        shifted.exposure.iter_mut().for_each(|a| *a += 3.5);
        let fit2 = fit_pspline_with_basis(&shifted, fit.basis.shifted(3.5), 10.0, &PsplineConfig::default(), &FitOptions::default()).unwrap();
        for a in [-1.5, -0.2, 0.7, 1.9] {
            assert!((fit.link(a) - fit2.link(a + 3.5)).abs() < 1e-6);
        }
    }

    #[test]
    fn unpenalized_small_basis_matches_dense_oracle() {
        use crate::synth::oracle_fit_dense;
        let mut data = simulate(7, 1, 300, |a| 0.3 * a - 0.1 * a * a);
        data.factors.clear();
        data.covariates = DMatrix::zeros(300, 0);
        data.covariate_names.clear();
        let config = PsplineConfig {
            n_interior_knots: 1,
            degree: 1,
            penalty_order: 2,
        };
        let fit = fit_pspline(&data, 0.0, &config, &FitOptions::default()).unwrap();
        assert_eq!(fit.spline_coef.len(), 3);
        let x = fit.basis.matrix(&data.exposure);
        let oracle = oracle_fit_dense(&data.y, &x, &data.offset, None).unwrap();
        for (a, b) in fit.spline_coef.iter().zip(&oracle.coef) {
            assert!((a - b).abs() / b.abs().max(1e-3) < 1e-8, "{a} vs {b}");
        }
    }

    #[test]
    fn negative_lambda_rejected() {
        let data = simulate(8, 10, 3, |_| 0.0);
        assert!(fit_pspline(&data, -1.0, &PsplineConfig::default(), &FitOptions::default()).is_err());
    }

    #[test]
    fn density_is_normalized() {
        let x: Vec<f64> = (0..400).map(|i| (i as f64 * 0.37).sin()).collect();
        let d = density_table(&x, 512);
        let dx = d[1].0 - d[0].0;
        let area: f64 = d.iter().map(|p| p.1).sum::<f64>() * dx;
        assert!(area > 0.8 && area < 1.05);
    }
}
