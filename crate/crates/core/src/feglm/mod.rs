//! Poisson regression with absorbed fixed effects.
//!
//! Each IRLS step solves a weighted least-squares problem in which the
//! fixed-effect factors are swept out of the working response and the design
//! by weighted alternating projections, so the fixed-effect coefficients are
//! never formed. The linear predictor is recovered from the WLS residual:
//! `η = offset + z − (z̃ − X̃β)` where `~` denotes demeaned quantities.
//!
//! Inference uses the cluster-robust sandwich over the demeaned design, which
//! coincides with the corresponding block of the full dummy-variable sandwich.

mod demean;
mod spec;

pub use demean::{demean, demean_in_place, max_group_mean, DemeanOptions, DemeanStats, Factor};
pub use spec::{Covariate, DesignRows, Outcome, RegressionSpec, YearEffect, INCOME_SCALE};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::{rate_increase, two_sided_p, RateIncrease, Z_95};

/// A fully numeric regression problem: complete cases only.
#[derive(Debug, Clone)]
pub struct FeProblem {
    pub y: Vec<f64>,
    pub offset: Vec<f64>,
    /// `n × p` design; the first `n_exposures` columns are the exposures.
    pub x: DMatrix<f64>,
    pub names: Vec<String>,
    pub n_exposures: usize,
    /// Zero, one or two absorbed factors.
    pub factors: Vec<Factor>,
    /// Cluster factor for the sandwich; `None` gives model-based covariance only.
    pub clusters: Option<Factor>,
    /// Optional prior (frequency) weights.
    pub prior_weights: Option<Vec<f64>>,
}

impl FeProblem {
    pub fn n(&self) -> usize {
        self.y.len()
    }

    fn validate(&self) -> Result<()> {
        let n = self.y.len();
        if self.offset.len() != n || self.x.nrows() != n {
            return Err(Error::InvalidInput(format!(
                "inconsistent row counts: y {n}, offset {}, design {}",
                self.offset.len(),
                self.x.nrows()
            )));
        }
        if self.names.len() != self.x.ncols() {
            return Err(Error::InvalidInput("one name per design column required".into()));
        }
        if self.n_exposures > self.x.ncols() {
            return Err(Error::InvalidInput("more exposures than design columns".into()));
        }
        if self.factors.len() > 2 {
            return Err(Error::InvalidInput("at most two fixed-effect factors are supported".into()));
        }
        if self.factors.iter().chain(&self.clusters).any(|f| f.len() != n) {
            return Err(Error::InvalidInput("factor length differs from row count".into()));
        }
        if let Some(w) = &self.prior_weights {
            if w.len() != n || w.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
                return Err(Error::InvalidInput("prior weights must be finite, non-negative, one per row".into()));
            }
        }
        if self.y.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::InvalidInput("outcome must be finite and non-negative".into()));
        }
        if self.offset.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("offset must be finite".into()));
        }
        if self.x.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("design contains non-finite values".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FitOptions {
    /// Relative deviance change `|Δdev| / (|dev| + 0.1)` at convergence.
    pub tol: f64,
    pub max_iter: usize,
    pub demean: DemeanOptions,
    /// Multiply the cluster sandwich by `G / (G − 1)`.
    pub small_sample_correction: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            tol: 1e-9,
            max_iter: 100,
            demean: DemeanOptions::default(),
            small_sample_correction: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FitResult {
    /// Names of the estimated (non-collinear) columns, exposures first.
    pub names: Vec<String>,
    pub coef: Vec<f64>,
    pub n_exposures: usize,
    /// Cluster-robust covariance when clusters were supplied, otherwise model-based.
    pub vcov: DMatrix<f64>,
    /// Inverse of the (penalized) weighted Gram matrix of the demeaned design.
    pub vcov_model: DMatrix<f64>,
    pub clustered: bool,
    pub n_clusters: usize,
    /// Fitted means on the used rows.
    pub fitted: Vec<f64>,
    /// Absorbed fixed-effect part of the linear predictor on the used rows.
    pub fe_contribution: Vec<f64>,
    /// Indices (into the problem's rows) of the rows used.
    pub used_rows: Vec<usize>,
    pub deviance: f64,
    /// Deviance plus the penalty term; equals `deviance` when unpenalized.
    pub penalized_deviance: f64,
    /// Trace of the influence matrix over the estimated columns.
    pub edf: f64,
    pub n_obs: usize,
    /// Fixed-effect levels removed because their outcome was identically zero.
    pub dropped_groups: usize,
    pub dropped_covariates: Vec<String>,
    pub iterations: usize,
    pub converged: bool,
    pub max_demean_sweeps: usize,
}

impl FitResult {
    pub fn beta(&self) -> &[f64] {
        &self.coef[..self.n_exposures]
    }

    pub fn gamma(&self) -> &[f64] {
        &self.coef[self.n_exposures..]
    }

    pub fn se(&self, j: usize) -> f64 {
        self.vcov[(j, j)].max(0.0).sqrt()
    }

    pub fn se_model(&self, j: usize) -> f64 {
        self.vcov_model[(j, j)].max(0.0).sqrt()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn z(&self, j: usize) -> f64 {
        self.coef[j] / self.se(j)
    }

    pub fn p_value(&self, j: usize) -> f64 {
        two_sided_p(self.z(j))
    }

    pub fn ci(&self, j: usize) -> (f64, f64) {
        let se = self.se(j);
        (self.coef[j] - Z_95 * se, self.coef[j] + Z_95 * se)
    }

    pub fn rate_increase(&self, j: usize) -> RateIncrease {
        rate_increase(self.coef[j], self.se(j))
    }
}

/// Rows surviving iterative removal of fixed-effect levels whose outcome is
/// all zero, and the number of levels removed.
pub fn drop_zero_outcome_levels(y: &[f64], factors: &[Factor]) -> (Vec<usize>, usize) {
    let mut alive = vec![true; y.len()];
    let mut dropped = 0;
    loop {
        let mut changed = false;
        for f in factors {
            let mut pos = vec![false; f.n_levels()];
            let mut present = vec![false; f.n_levels()];
            for (i, &c) in f.codes().iter().enumerate() {
                if alive[i] {
                    present[c] = true;
                    pos[c] |= y[i] > 0.0;
                }
            }
            for lvl in 0..f.n_levels() {
                if present[lvl] && !pos[lvl] {
                    dropped += 1;
                    changed = true;
                }
            }
            for (i, &c) in f.codes().iter().enumerate() {
                if alive[i] && !pos[c] {
                    alive[i] = false;
                }
            }
        }
        if !changed {
            break;
        }
    }
    ((0..y.len()).filter(|&i| alive[i]).collect(), dropped)
}

pub fn poisson_deviance(y: &[f64], mu: &[f64], prior: Option<&[f64]>) -> f64 {
    y.iter()
        .zip(mu)
        .enumerate()
        .map(|(i, (&yi, &mi))| {
            let w = prior.map_or(1.0, |p| p[i]);
            let term = if yi > 0.0 { yi * (yi / mi).ln() } else { 0.0 };
            2.0 * w * (term - (yi - mi))
        })
        .sum()
}

/// Greedy selection of linearly independent columns of a Gram matrix, in
/// order, via an incrementally grown Cholesky factor. A column is rejected
/// when its residual squared norm is at most `tol × scale[j]`.
fn independent_columns(gram: &DMatrix<f64>, scale: &[f64], tol: f64) -> Vec<usize> {
    let p = gram.nrows();
    let mut kept: Vec<usize> = Vec::new();
    let mut l = DMatrix::<f64>::zeros(p, p);
    for j in 0..p {
        let k = kept.len();
        let mut v = vec![0.0; k];
        for a in 0..k {
            let mut s = gram[(kept[a], j)];
            for b in 0..a {
                s -= l[(a, b)] * v[b];
            }
            v[a] = s / l[(a, a)];
        }
        let r = gram[(j, j)] - v.iter().map(|x| x * x).sum::<f64>();
        if r > tol * scale[j] && r > 0.0 {
            for (b, vb) in v.iter().enumerate() {
                l[(k, b)] = *vb;
            }
            l[(k, k)] = r.sqrt();
            kept.push(j);
        }
    }
    kept
}

fn weighted_gram(cols: &[Vec<f64>], w: &[f64]) -> DMatrix<f64> {
    let p = cols.len();
    let mut g = DMatrix::zeros(p, p);
    for a in 0..p {
        for b in a..p {
            let s: f64 = cols[a].iter().zip(&cols[b]).zip(w).map(|((x, y), w)| w * x * y).sum();
            g[(a, b)] = s;
            g[(b, a)] = s;
        }
    }
    g
}

fn spd_inverse(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    m.clone()
        .cholesky()
        .map(|c| c.inverse())
        .ok_or_else(|| Error::Singular(what.to_string()))
}

/// `R` with `RᵀR = P` for a symmetric positive semidefinite `P`.
/// Square root `R` of a positive semi-definite penalty (`RᵀR = P`) and the
/// map `v ↦ t` with `Rᵀt = v` for `v` in the range of `P`.
struct PenaltyRoot {
    root: DMatrix<f64>,
    vectors: DMatrix<f64>,
    inv_sqrt: Vec<f64>,
}

impl PenaltyRoot {
    fn new(p: &DMatrix<f64>) -> Self {
        let eig = nalgebra::SymmetricEigen::new((p + p.transpose()) * 0.5);
        let top = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(*v));
        let mut root = eig.eigenvectors.transpose();
        let mut inv_sqrt = Vec::with_capacity(eig.eigenvalues.len());
        for (i, lam) in eig.eigenvalues.iter().enumerate() {
            let s = lam.max(0.0).sqrt();
            root.row_mut(i).scale_mut(s);
            inv_sqrt.push(if *lam > 1e-12 * top { 1.0 / s } else { 0.0 });
        }
        Self {
            root,
            vectors: eig.eigenvectors,
            inv_sqrt,
        }
    }

    /// Penalty rows target `t` with `Rᵀt = −Pβ`, using `Pβ` formed directly
    /// so the fixed point does not inherit the rounding in `RᵀR`.
    fn target(&self, p: &DMatrix<f64>, beta: &DVector<f64>) -> DVector<f64> {
        let coords = self.vectors.transpose() * (p * beta);
        DVector::from_fn(coords.len(), |i, _| -coords[i] * self.inv_sqrt[i])
    }
}

/// Penalized weighted least squares by QR of the stacked system
/// `[√W X; R] β ≈ [√W z; t]`, which avoids squaring the condition number.
/// The penalty target `t` defaults to zero.
fn solve_wls(
    cols: &[Vec<f64>],
    w: &[f64],
    z: &[f64],
    pen_root: Option<&DMatrix<f64>>,
    pen_target: Option<&DVector<f64>>,
) -> Result<DVector<f64>> {
    let p = cols.len();
    if p == 0 {
        return Ok(DVector::zeros(0));
    }
    let n = z.len();
    let extra = pen_root.map_or(0, |r| r.nrows());
    let mut a = DMatrix::zeros(n + extra, p);
    let mut b = DVector::zeros(n + extra);
    for i in 0..n {
        let sw = w[i].sqrt();
        for (j, c) in cols.iter().enumerate() {
            a[(i, j)] = sw * c[i];
        }
        b[i] = sw * z[i];
    }
    if let Some(r) = pen_root {
        a.rows_mut(n, extra).copy_from(r);
        if let Some(t) = pen_target {
            b.rows_mut(n, extra).copy_from(t);
        }
    }
    let qr = a.qr();
    let mut qtb = b;
    qr.q_tr_mul(&mut qtb);
    let r = qr.r();
    if (0..p).any(|j| !(r[(j, j)].abs() > 0.0)) {
        return Err(Error::Singular("weighted least-squares system is rank deficient".into()));
    }
    r.solve_upper_triangular(&qtb.rows(0, p).into_owned())
        .ok_or_else(|| Error::Singular("weighted least-squares system is rank deficient".into()))
}

/// Liang–Zeger sandwich `B⁻¹ (Σ_g s_g s_gᵀ) B⁻¹` with `B` the supplied bread
/// and `s_g` the per-cluster sums of `design_i × score_i`.
pub fn cluster_vcov(
    bread: &DMatrix<f64>,
    design: &[Vec<f64>],
    scores: &[f64],
    clusters: &Factor,
    small_sample_correction: bool,
) -> Result<DMatrix<f64>> {
    let p = design.len();
    let g = clusters.n_levels();
    if g < 2 {
        return Err(Error::InvalidInput(format!("cluster-robust covariance needs at least 2 clusters, got {g}")));
    }
    let binv = spd_inverse(bread, "sandwich bread is not positive definite")?;
    let mut sums = DMatrix::<f64>::zeros(g, p);
    for (j, col) in design.iter().enumerate() {
        for ((&c, &x), &s) in clusters.codes().iter().zip(col).zip(scores) {
            sums[(c, j)] += x * s;
        }
    }
    let meat = sums.transpose() * &sums;
    let mut v = &binv * meat * &binv;
    if small_sample_correction {
        v *= g as f64 / (g as f64 - 1.0);
    }
    Ok((&v + v.transpose()) * 0.5)
}

/// Fits `log λ = offset + Xβ + Σ fixed effects` by IRLS with absorbed fixed effects.
pub fn fit_poisson_fe(problem: &FeProblem, opts: &FitOptions) -> Result<FitResult> {
    fit_penalized(problem, None, opts)
}

/// As [`fit_poisson_fe`], maximizing the log-likelihood minus `½ βᵀPβ` for a
/// positive semidefinite `penalty` P over the design columns.
pub fn fit_penalized(problem: &FeProblem, penalty: Option<&DMatrix<f64>>, opts: &FitOptions) -> Result<FitResult> {
    problem.validate()?;
    let p_all = problem.x.ncols();
    if let Some(pen) = penalty {
        if pen.nrows() != p_all || pen.ncols() != p_all {
            return Err(Error::InvalidInput("penalty dimension differs from design".into()));
        }
    }
    let (rows, dropped_groups) = drop_zero_outcome_levels(&problem.y, &problem.factors);
    if rows.is_empty() {
        return Err(Error::NoData("every fixed-effect level has an all-zero outcome".into()));
    }
    let n = rows.len();
    let pick = |v: &[f64]| -> Vec<f64> { rows.iter().map(|&i| v[i]).collect() };
    let y = pick(&problem.y);
    let offset = pick(&problem.offset);
    let prior = problem.prior_weights.as_deref().map(pick);
    let factors: Vec<Factor> = problem.factors.iter().map(|f| f.subset(&rows)).collect();
    let frefs: Vec<&Factor> = factors.iter().collect();
    let x_raw: Vec<Vec<f64>> = (0..p_all)
        .map(|j| rows.iter().map(|&i| problem.x[(i, j)]).collect())
        .collect();
    let prior_w = |i: usize| prior.as_ref().map_or(1.0, |p| p[i]);

    let mut mu: Vec<f64> = y.iter().map(|v| v + 0.5).collect();
    let mut eta: Vec<f64> = mu.iter().map(|m| m.ln()).collect();
    let mut pdev = poisson_deviance(&y, &mu, prior.as_deref());
    let mut kept: Option<Vec<usize>> = None;
    let mut pen_k: Option<DMatrix<f64>> = None;
    let mut pen_root: Option<PenaltyRoot> = None;
    let mut beta = DVector::<f64>::zeros(0);
    let mut converged = false;
    let mut iterations = 0;
    let mut last_change = f64::INFINITY;
    let mut max_sweeps = 0;
    let mut anchored = false;

    for iter in 1..=opts.max_iter {
        iterations = iter;
        let w: Vec<f64> = (0..n).map(|i| prior_w(i) * mu[i]).collect();
        // after the first step the solve is for the increment, whose rounding
        // error scales with the step rather than with the coefficients
        let increment = anchored;
        let z: Vec<f64> = (0..n)
            .map(|i| {
                let u = (y[i] - mu[i]) / mu[i];
                if increment { u } else { eta[i] - offset[i] + u }
            })
            .collect();

        let sel: Vec<usize> = kept.clone().unwrap_or_else(|| (0..p_all).collect());
        let mut cols: Vec<Vec<f64>> = Vec::with_capacity(sel.len() + 1);
        cols.push(z.clone());
        cols.extend(sel.iter().map(|&j| x_raw[j].clone()));
        let stats = demean_in_place(&mut cols, &frefs, &w, &opts.demean)?;
        max_sweeps = max_sweeps.max(stats.sweeps);
        let zt = cols.remove(0);

        if kept.is_none() {
            let mut gram = weighted_gram(&cols, &w);
            let scale: Vec<f64> = x_raw
                .iter()
                .map(|c| c.iter().zip(&w).map(|(x, w)| w * x * x).sum::<f64>())
                .collect();
            // the tolerance stays relative to the data so a large penalty
            // cannot mask a direction the data do not identify
            if let Some(pen) = penalty {
                gram += pen;
            }
            let k = independent_columns(&gram, &scale, 1e-9);
            if let Some(bad) = (0..problem.n_exposures).find(|j| !k.contains(j)) {
                return Err(Error::DegenerateExposure(problem.names[bad].clone()));
            }
            if k.is_empty() && p_all > 0 {
                return Err(Error::Singular("no estimable design columns".into()));
            }
            cols = k.iter().map(|&j| cols[j].clone()).collect();
            pen_k = penalty.map(|pen| DMatrix::from_fn(k.len(), k.len(), |a, b| pen[(k[a], k[b])]));
            pen_root = pen_k.as_ref().map(PenaltyRoot::new);
            beta = DVector::zeros(k.len());
            kept = Some(k);
        }

        let target = match (&pen_root, &pen_k) {
            (Some(r), Some(pk)) if increment => Some(r.target(pk, &beta)),
            _ => None,
        };
        let step = solve_wls(&cols, &w, &zt, pen_root.as_ref().map(|r| &r.root), target.as_ref())?;
        let mut resid = zt.clone();
        for (c, b) in cols.iter().zip(step.iter()) {
            for (r, x) in resid.iter_mut().zip(c) {
                *r -= b * x;
            }
        }
        let beta_new = if increment { &beta + step } else { step };
        let eta_full: Vec<f64> = (0..n)
            .map(|i| if increment { eta[i] } else { offset[i] } + z[i] - resid[i])
            .collect();

        // step-halving guards against overshooting from poor starting values
        let mut t = 1.0;
        let (mut eta_try, mut mu_try, mut beta_try, mut pdev_try);
        loop {
            eta_try = if t == 1.0 {
                eta_full.clone()
            } else {
                eta.iter().zip(&eta_full).map(|(o, f)| o + t * (f - o)).collect()
            };
            mu_try = eta_try.iter().map(|e| e.exp()).collect::<Vec<f64>>();
            beta_try = if t == 1.0 { beta_new.clone() } else { &beta + (&beta_new - &beta) * t };
            pdev_try = poisson_deviance(&y, &mu_try, prior.as_deref());
            if let Some(pk) = &pen_k {
                pdev_try += (beta_try.transpose() * pk * &beta_try)[(0, 0)];
            }
            let ok = pdev_try.is_finite() && mu_try.iter().all(|m| m.is_finite() && *m > 0.0);
            if (ok && (iter == 1 || pdev_try <= pdev * (1.0 + 1e-10) + 1e-10)) || t < 1e-6 {
                break;
            }
            t *= 0.5;
        }
        if !pdev_try.is_finite() {
            return Err(Error::NotConverged {
                iterations: iter,
                last_change: f64::INFINITY,
            });
        }
        anchored |= t == 1.0;
        last_change = (pdev_try - pdev).abs() / (pdev_try.abs() + 0.1);
        eta = eta_try;
        mu = mu_try;
        beta = beta_try;
        pdev = pdev_try;
        if converged {
            break;
        }
        // one further step once the deviance settles tightens the score
        // equations well past what the deviance change can resolve
        converged = last_change < opts.tol;
    }
    if !converged {
        return Err(Error::NotConverged {
            iterations,
            last_change,
        });
    }

    let kept = kept.unwrap_or_default();
    let w: Vec<f64> = (0..n).map(|i| prior_w(i) * mu[i]).collect();
    let mut xt: Vec<Vec<f64>> = kept.iter().map(|&j| x_raw[j].clone()).collect();
    demean_in_place(&mut xt, &frefs, &w, &opts.demean)?;
    let gram = weighted_gram(&xt, &w);
    let mut bread = gram.clone();
    if let Some(pk) = &pen_k {
        bread += pk;
    }
    let p = kept.len();
    let (vcov_model, edf) = if p == 0 {
        (DMatrix::zeros(0, 0), 0.0)
    } else {
        let inv = spd_inverse(&bread, "weighted Gram matrix of the demeaned design")?;
        let edf = (&inv * &gram).trace();
        (inv, edf)
    };
    let clusters = problem.clusters.as_ref().map(|c| c.subset(&rows));
    let (vcov, clustered, n_clusters) = match &clusters {
        Some(c) if p > 0 => {
            let scores: Vec<f64> = (0..n).map(|i| prior_w(i) * (y[i] - mu[i])).collect();
            (
                cluster_vcov(&bread, &xt, &scores, c, opts.small_sample_correction)?,
                true,
                c.n_levels(),
            )
        }
        Some(c) => (vcov_model.clone(), true, c.n_levels()),
        None => (vcov_model.clone(), false, 0),
    };

    let fe_contribution = (0..n)
        .map(|i| eta[i] - offset[i] - kept.iter().zip(beta.iter()).map(|(&j, b)| b * x_raw[j][i]).sum::<f64>())
        .collect();
    let names: Vec<String> = kept.iter().map(|&j| problem.names[j].clone()).collect();
    let dropped_covariates = (0..p_all)
        .filter(|j| !kept.contains(j))
        .map(|j| problem.names[j].clone())
        .collect();
    let deviance = poisson_deviance(&y, &mu, prior.as_deref());
    Ok(FitResult {
        names,
        coef: beta.iter().copied().collect(),
        n_exposures: problem.n_exposures,
        vcov,
        vcov_model,
        clustered,
        n_clusters,
        fitted: mu,
        fe_contribution,
        used_rows: rows,
        deviance,
        penalized_deviance: pdev,
        edf,
        n_obs: n,
        dropped_groups,
        dropped_covariates,
        iterations,
        converged,
        max_demean_sweeps: max_sweeps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn problem(y: Vec<f64>, offset: Vec<f64>, x: DMatrix<f64>, names: &[&str], factors: Vec<Factor>) -> FeProblem {
        FeProblem {
            y,
            offset,
            x,
            names: names.iter().map(|s| s.to_string()).collect(),
            n_exposures: 0,
            factors,
            clusters: None,
            prior_weights: None,
        }
    }

    #[test]
    fn intercept_only_is_log_mean() {
        let pr = problem(vec![1.0, 2.0, 3.0], vec![0.0; 3], DMatrix::from_element(3, 1, 1.0), &["(intercept)"], vec![]);
        let fit = fit_poisson_fe(&pr, &FitOptions::default()).unwrap();
        assert!((fit.coef[0] - 2f64.ln()).abs() < 1e-10);
    }

    #[test]
    fn intercept_with_offset_is_log_rate() {
        let pr = problem(
            vec![2.0, 4.0],
            vec![1f64.ln(), 2f64.ln()],
            DMatrix::from_element(2, 1, 1.0),
            &["(intercept)"],
            vec![],
        );
        let fit = fit_poisson_fe(&pr, &FitOptions::default()).unwrap();
        assert!((fit.coef[0] - 2f64.ln()).abs() < 1e-10);
    }

    #[test]
    fn all_zero_levels_are_dropped() {
        let zip = Factor::from_codes(vec![0, 0, 1, 1, 2, 2]);
        let year = Factor::from_codes(vec![0, 1, 0, 1, 0, 1]);
        let x = DMatrix::from_column_slice(6, 1, &[0.1, 0.4, -0.3, 0.2, 0.5, -0.1]);
        let mut pr = problem(vec![3.0, 5.0, 0.0, 0.0, 2.0, 7.0], vec![0.0; 6], x, &["a"], vec![zip, year]);
        pr.n_exposures = 1;
        let fit = fit_poisson_fe(&pr, &FitOptions::default()).unwrap();
        assert_eq!(fit.dropped_groups, 1);
        assert_eq!(fit.used_rows, vec![0, 1, 4, 5]);
    }

    #[test]
    fn absorbed_covariate_is_dropped_but_exposure_errors() {
        let zip = Factor::from_codes(vec![0, 0, 1, 1, 2, 2]);
        let x = DMatrix::from_row_slice(6, 2, &[0.1, 1.0, 0.4, 1.0, -0.3, 2.0, 0.2, 2.0, 0.5, 3.0, -0.1, 3.0]);
        let mut pr = problem(vec![3.0, 5.0, 1.0, 4.0, 2.0, 7.0], vec![0.0; 6], x, &["a", "zipconst"], vec![zip]);
        pr.n_exposures = 1;
        let fit = fit_poisson_fe(&pr, &FitOptions::default()).unwrap();
        assert_eq!(fit.dropped_covariates, vec!["zipconst".to_string()]);

        pr.n_exposures = 2;
        match fit_poisson_fe(&pr, &FitOptions::default()) {
            Err(Error::DegenerateExposure(name)) => assert_eq!(name, "zipconst"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn score_identity_holds() {
        let zip = Factor::from_codes((0..40).map(|i| i / 4).collect());
        let year = Factor::from_codes((0..40).map(|i| i % 4).collect());
        let x = DMatrix::from_fn(40, 1, |i, _| ((i * 37 % 11) as f64 - 5.0) / 5.0);
        let y: Vec<f64> = (0..40).map(|i| ((i * 13) % 9 + 1) as f64).collect();
        let mut pr = problem(y.clone(), vec![0.0; 40], x, &["a"], vec![zip.clone(), year]);
        pr.n_exposures = 1;
        pr.clusters = Some(zip);
        let fit = fit_poisson_fe(&pr, &FitOptions::default()).unwrap();
        let sy: f64 = y.iter().sum();
        let sm: f64 = fit.fitted.iter().sum();
        assert!((sy - sm).abs() / sy < 1e-6);
        assert!(fit.converged);
        assert_eq!(fit.n_clusters, 10);
        let v = &fit.vcov;
        assert!((v - v.transpose()).amax() < 1e-8);
    }

    #[test]
    fn hc0_when_each_row_is_a_cluster() {
        let n = 30;
        let x = DMatrix::from_fn(n, 2, |i, j| if j == 0 { 1.0 } else { (i as f64 * 0.37).sin() });
        let y: Vec<f64> = (0..n).map(|i| ((i * 7) % 5) as f64 + 1.0).collect();
        let mut pr = problem(y.clone(), vec![0.0; n], x.clone(), &["c", "a"], vec![]);
        pr.clusters = Some(Factor::from_codes((0..n).collect()));
        let fit = fit_poisson_fe(&pr, &FitOptions::default()).unwrap();
        let mut bread = DMatrix::<f64>::zeros(2, 2);
        let mut meat = DMatrix::<f64>::zeros(2, 2);
        for i in 0..n {
            let xi = x.row(i).transpose();
            let mu = fit.fitted[i];
            bread += &xi * xi.transpose() * mu;
            meat += &xi * xi.transpose() * (y[i] - mu).powi(2);
        }
        let binv = bread.try_inverse().unwrap();
        let hc0 = &binv * meat * &binv;
        assert!((&fit.vcov - &hc0).amax() / hc0.amax() < 1e-8);
    }

    #[test]
    fn duplicated_rows_with_halved_weights_leave_beta_unchanged() {
        let n = 24;
        let zip: Vec<usize> = (0..n).map(|i| i / 4).collect();
        let year: Vec<usize> = (0..n).map(|i| i % 4).collect();
        let xv: Vec<f64> = (0..n).map(|i| ((i * 5 % 7) as f64 - 3.0) / 3.0).collect();
        let y: Vec<f64> = (0..n).map(|i| ((i * 11) % 6 + 1) as f64).collect();
        let base = FeProblem {
            y: y.clone(),
            offset: vec![0.0; n],
            x: DMatrix::from_column_slice(n, 1, &xv),
            names: vec!["a".into()],
            n_exposures: 1,
            factors: vec![Factor::from_codes(zip.clone()), Factor::from_codes(year.clone())],
            clusters: Some(Factor::from_codes(zip.clone())),
            prior_weights: None,
        };
        let dup = |v: &[f64]| v.iter().chain(v).copied().collect::<Vec<f64>>();
        let dupu = |v: &[usize]| v.iter().chain(v).copied().collect::<Vec<usize>>();
        let doubled = FeProblem {
            y: dup(&y),
            offset: vec![0.0; 2 * n],
            x: DMatrix::from_column_slice(2 * n, 1, &dup(&xv)),
            names: vec!["a".into()],
            n_exposures: 1,
            factors: vec![Factor::from_codes(dupu(&zip)), Factor::from_codes(dupu(&year))],
            clusters: Some(Factor::from_codes(dupu(&zip))),
            prior_weights: Some(vec![0.5; 2 * n]),
        };
        let a = fit_poisson_fe(&base, &FitOptions::default()).unwrap();
        let b = fit_poisson_fe(&doubled, &FitOptions::default()).unwrap();
        assert!((a.coef[0] - b.coef[0]).abs() < 1e-9);
        assert!((a.se(0) - b.se(0)).abs() / a.se(0) < 1e-6);
    }

    #[test]
    fn non_convergence_is_reported() {
        let pr = problem(vec![1.0, 2.0, 3.0], vec![0.0; 3], DMatrix::from_element(3, 1, 1.0), &["c"], vec![]);
        let opts = FitOptions {
            max_iter: 1,
            tol: 0.0,
            ..Default::default()
        };
        assert!(matches!(fit_poisson_fe(&pr, &opts), Err(Error::NotConverged { .. })));
    }

    #[test]
    fn cluster_vcov_needs_two_clusters() {
        let bread = DMatrix::identity(1, 1);
        let err = cluster_vcov(&bread, &[vec![1.0, 2.0]], &[0.1, -0.1], &Factor::from_codes(vec![0, 0]), false);
        assert!(err.is_err());
    }
}
