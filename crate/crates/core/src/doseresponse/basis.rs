//! B-spline and natural cubic spline bases.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::quantile_sorted;

/// Clamped B-spline basis on `[lo, hi]`. Arguments outside the boundary
/// knots are clamped to the nearest boundary, so the fitted curve is
/// constant-extended and its derivative there is zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BSplineBasis {
    knots: Vec<f64>,
    degree: usize,
}

fn sorted_finite(x: &[f64]) -> Result<Vec<f64>> {
    let mut v: Vec<f64> = x.iter().copied().filter(|v| v.is_finite()).collect();
    v.sort_by(f64::total_cmp);
    match (v.first(), v.last()) {
        (Some(lo), Some(hi)) if hi > lo => Ok(v),
        _ => Err(Error::InvalidInput("spline basis needs at least two distinct finite values".into())),
    }
}

impl BSplineBasis {
    /// `n_interior` knots at equally spaced quantiles of `x`.
    pub fn from_data(x: &[f64], n_interior: usize, degree: usize) -> Result<Self> {
        if n_interior == 0 {
            return Err(Error::InvalidInput("at least one interior knot required".into()));
        }
        let v = sorted_finite(x)?;
        let interior: Vec<f64> = (1..=n_interior)
            .map(|j| quantile_sorted(&v, j as f64 / (n_interior + 1) as f64))
            .collect();
        Self::with_interior(v[0], v[v.len() - 1], &interior, degree)
    }

    pub fn with_interior(lo: f64, hi: f64, interior: &[f64], degree: usize) -> Result<Self> {
        if !(hi > lo) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::InvalidInput(format!("degenerate spline range [{lo}, {hi}]")));
        }
        if interior.iter().any(|k| !(*k >= lo && *k <= hi)) || interior.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::InvalidInput("interior knots must be sorted and inside the range".into()));
        }
        let mut knots = vec![lo; degree + 1];
        knots.extend_from_slice(interior);
        knots.extend(std::iter::repeat_n(hi, degree + 1));
        Ok(Self { knots, degree })
    }

    pub fn dim(&self) -> usize {
        self.knots.len() - self.degree - 1
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn range(&self) -> (f64, f64) {
        (self.knots[0], self.knots[self.knots.len() - 1])
    }

    /// Shifts every knot by `c`.
    pub fn shifted(&self, c: f64) -> Self {
        Self {
            knots: self.knots.iter().map(|k| k + c).collect(),
            degree: self.degree,
        }
    }

    /// Basis functions of degree `d` at `x` (already clamped).
    fn basis_of_degree(&self, x: f64, d: usize) -> Vec<f64> {
        let t = &self.knots;
        let m = t.len() - 1;
        let (lo, hi) = self.range();
        let mut n = vec![0.0; m];
        if x >= hi {
            // right end: last non-empty interval
            let last = (0..m).rev().find(|&i| t[i] < t[i + 1]).expect("non-degenerate range");
            n[last] = 1.0;
        } else {
            let x = x.max(lo);
            if let Some(i) = (0..m).find(|&i| t[i] <= x && x < t[i + 1]) {
                n[i] = 1.0;
            }
        }
        for p in 1..=d {
            for i in 0..(m - p) {
                let left = if t[i + p] > t[i] { (x - t[i]) / (t[i + p] - t[i]) * n[i] } else { 0.0 };
                let right = if t[i + p + 1] > t[i + 1] {
                    (t[i + p + 1] - x) / (t[i + p + 1] - t[i + 1]) * n[i + 1]
                } else {
                    0.0
                };
                n[i] = left + right;
            }
        }
        n.truncate(self.knots.len() - d - 1);
        n
    }

    pub fn eval(&self, x: f64) -> Vec<f64> {
        let (lo, hi) = self.range();
        self.basis_of_degree(x.clamp(lo, hi), self.degree)
    }

    /// First derivatives of the basis functions; zero outside the range.
    pub fn deriv(&self, x: f64) -> Vec<f64> {
        let (lo, hi) = self.range();
        let dim = self.dim();
        if x < lo || x > hi || self.degree == 0 {
            return vec![0.0; dim];
        }
        let p = self.degree;
        let t = &self.knots;
        let lower = self.basis_of_degree(x, p - 1);
        (0..dim)
            .map(|i| {
                let a = if t[i + p] > t[i] { p as f64 / (t[i + p] - t[i]) * lower[i] } else { 0.0 };
                let b = if t[i + p + 1] > t[i + 1] {
                    p as f64 / (t[i + p + 1] - t[i + 1]) * lower[i + 1]
                } else {
                    0.0
                };
                a - b
            })
            .collect()
    }

    /// Greville abscissae: knot averages at which the coefficients of an
    /// affine function are the function values.
    pub fn greville(&self) -> Vec<f64> {
        let p = self.degree.max(1);
        (0..self.dim())
            .map(|j| self.knots[j + 1..=j + p].iter().sum::<f64>() / p as f64)
            .collect()
    }

    pub fn matrix(&self, x: &[f64]) -> DMatrix<f64> {
        let dim = self.dim();
        let mut m = DMatrix::zeros(x.len(), dim);
        for (i, &xi) in x.iter().enumerate() {
            for (j, v) in self.eval(xi).into_iter().enumerate() {
                m[(i, j)] = v;
            }
        }
        m
    }
}

/// Cubic B-spline design matrix with `k` interior knots at quantiles of `x`.
pub fn bspline_basis(x: &[f64], k: usize, degree: usize) -> Result<DMatrix<f64>> {
    Ok(BSplineBasis::from_data(x, k, degree)?.matrix(x))
}

/// Order-`order` difference matrix of size `(dim − order) × dim`.
pub fn difference_matrix(dim: usize, order: usize) -> DMatrix<f64> {
    let mut d = DMatrix::<f64>::identity(dim, dim);
    for _ in 0..order {
        let r = d.nrows();
        d = DMatrix::from_fn(r - 1, dim, |i, j| d[(i + 1, j)] - d[(i, j)]);
    }
    d
}

/// Order-`order` divided differences at the abscissae `g`, scaled by
/// `order! · h̄^order` with `h̄` the mean spacing. Equally spaced abscissae give
/// [`difference_matrix`]; the null space is the polynomials in `g` of degree
/// below `order`.
pub fn divided_difference_matrix(g: &[f64], order: usize) -> Result<DMatrix<f64>> {
    let dim = g.len();
    if order >= dim {
        return Err(Error::InvalidInput(format!("difference order {order} needs more than {dim} coefficients")));
    }
    if g.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::InvalidInput("penalty abscissae must be strictly increasing".into()));
    }
    let h = (g[dim - 1] - g[0]) / (dim - 1) as f64;
    let mut d = DMatrix::<f64>::identity(dim, dim);
    for j in 1..=order {
        let r = d.nrows();
        d = DMatrix::from_fn(r - 1, dim, |i, c| (d[(i + 1, c)] - d[(i, c)]) * j as f64 * h / (g[i + j] - g[i]));
    }
    Ok(d)
}

/// Natural cubic spline basis (no intercept) with `df` columns: boundary
/// knots at the range of `x` and `df − 1` interior knots at its quantiles.
/// Duplicate knots are merged, which can reduce the column count.
pub fn natural_spline_basis(x: &[f64], df: usize) -> Result<DMatrix<f64>> {
    if df == 0 {
        return Err(Error::InvalidInput("natural spline needs df ≥ 1".into()));
    }
    let v = sorted_finite(x)?;
    let (lo, hi) = (v[0], v[v.len() - 1]);
    let scale = |t: f64| (t - lo) / (hi - lo);
    let mut knots: Vec<f64> = vec![0.0];
    knots.extend((1..df).map(|j| scale(quantile_sorted(&v, j as f64 / df as f64))));
    knots.push(1.0);
    knots.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
    let k = knots.len();
    let cube = |t: f64| if t > 0.0 { t * t * t } else { 0.0 };
    let d = |t: f64, j: usize| (cube(t - knots[j]) - cube(t - knots[k - 1])) / (knots[k - 1] - knots[j]);
    let ncol = 1 + k.saturating_sub(2);
    Ok(DMatrix::from_fn(x.len(), ncol, |i, c| {
        let t = scale(x[i]);
        if c == 0 {
            t
        } else {
            d(t, c - 1) - d(t, k - 2)
        }
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hat_functions() {
        let b = BSplineBasis::with_interior(0.0, 1.0, &[0.5], 1).unwrap();
        assert_eq!(b.dim(), 3);
        let v = b.eval(0.25);
        assert!((v[0] - 0.5).abs() < 1e-15 && (v[1] - 0.5).abs() < 1e-15 && v[2] == 0.0);
        let from_data = BSplineBasis::from_data(&[0.0, 0.5, 1.0], 1, 1).unwrap();
        assert_eq!(from_data, b);
    }

    #[test]
    fn partition_of_unity() {
        let x: Vec<f64> = (0..500).map(|i| (i as f64 * 0.731).sin() * 3.0).collect();
        let b = BSplineBasis::from_data(&x, 20, 3).unwrap();
        assert_eq!(b.dim(), 24);
        for xi in x.iter().chain(&[-3.0, 3.0]) {
            let s: f64 = b.eval(*xi).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn clamps_outside_range() {
        let b = BSplineBasis::with_interior(0.0, 1.0, &[0.3, 0.6], 3).unwrap();
        assert_eq!(b.eval(-5.0), b.eval(0.0));
        assert_eq!(b.eval(7.0), b.eval(1.0));
        assert!(b.deriv(7.0).iter().all(|d| *d == 0.0));
    }

    #[test]
    fn derivative_matches_finite_difference() {
        let b = BSplineBasis::with_interior(-1.0, 2.0, &[0.0, 0.4, 1.1], 3).unwrap();
        for x in [-0.7, 0.1, 0.9, 1.7] {
            let h = 1e-6;
            let (up, dn) = (b.eval(x + h), b.eval(x - h));
            for (j, d) in b.deriv(x).iter().enumerate() {
                assert!((d - (up[j] - dn[j]) / (2.0 * h)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn degenerate_input_rejected() {
        assert!(BSplineBasis::from_data(&[1.0, 1.0, 1.0], 3, 3).is_err());
        assert!(natural_spline_basis(&[2.0; 4], 4).is_err());
    }

    #[test]
    fn second_difference_annihilates_linear() {
        let d = difference_matrix(6, 2);
        assert_eq!(d.shape(), (4, 6));
        let c = nalgebra::DVector::from_iterator(6, (0..6).map(|i| 2.0 - 0.5 * i as f64));
        assert!((&d * c).amax() < 1e-15);
    }

    #[test]
    fn natural_spline_is_linear_beyond_boundary_knots_and_has_df_columns() {
        let years: Vec<f64> = (2012..=2022).map(f64::from).collect();
        let m = natural_spline_basis(&years, 4).unwrap();
        assert_eq!(m.ncols(), 4);
        // second derivative vanishes at the boundary: check linearity near the ends
        let xs = [2012.0, 2012.001, 2012.002];
        let e = natural_spline_basis(&[xs.to_vec(), years.clone()].concat(), 4).unwrap();
        for c in 0..4 {
            let curv = e[(0, c)] - 2.0 * e[(1, c)] + e[(2, c)];
            assert!(curv.abs() < 1e-9);
        }
    }
}
