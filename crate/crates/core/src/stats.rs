//! Small statistical helpers.

use serde::{Deserialize, Serialize};
use libm::erfc;

/// Two-sided 95% normal quantile.
pub const Z_95: f64 = 1.959964;

/// Two-sided p-value of a z statistic under the standard normal.
pub fn two_sided_p(z: f64) -> f64 {
    if !z.is_finite() {
        return if z.is_nan() { f64::NAN } else { 0.0 };
    }
    erfc(z.abs() / std::f64::consts::SQRT_2).min(1.0)
}

/// Percent change in the rate per unit increase, with a 95% interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateIncrease {
    pub point: f64,
    pub lo: f64,
    pub hi: f64,
}

/// `(exp(β) − 1) × 100` with the interval mapped through the same transform.
pub fn rate_increase(beta: f64, se: f64) -> RateIncrease {
    let pct = |b: f64| b.exp_m1() * 100.0;
    RateIncrease {
        point: pct(beta),
        lo: pct(beta - Z_95 * se),
        hi: pct(beta + Z_95 * se),
    }
}

/// Empirical quantile with linear interpolation between order statistics
/// (`(n − 1)p` positioning). `sorted` must be ascending and non-empty.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    assert!(n > 0, "quantile of empty slice");
    let h = (n - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let frac = h - lo as f64;
    if lo + 1 >= n || frac == 0.0 {
        sorted[lo.min(n - 1)]
    } else {
        sorted[lo] + frac * (sorted[lo + 1] - sorted[lo])
    }
}

pub fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Sample standard deviation (n − 1 denominator).
pub fn sample_sd(x: &[f64]) -> f64 {
    let m = mean(x);
    (x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() as f64 - 1.0)).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rate_increase_examples() {
        assert!((rate_increase(0.0046, 0.0).point - 0.461_059_6).abs() < 1e-6);
        assert_eq!(rate_increase(0.0, 0.1).point, 0.0);
        assert!((rate_increase(-0.0066, 0.0).point + 0.657_827_0).abs() < 1e-6);
        let r = rate_increase(0.1, 0.05);
        assert!(r.lo < r.point && r.point < r.hi);
    }

    #[test]
    fn p_values() {
        assert!((two_sided_p(1.959964) - 0.05).abs() < 1e-6);
        assert_eq!(two_sided_p(0.0), 1.0);
        assert!(two_sided_p(40.0) < 1e-300 || two_sided_p(40.0) == 0.0);
    }

    #[test]
    fn interpolated_quantiles() {
        let v: Vec<f64> = (1..=8).map(f64::from).collect();
        assert_eq!(quantile_sorted(&v, 0.25), 2.75);
        assert_eq!(quantile_sorted(&v, 0.5), 4.5);
        assert_eq!(quantile_sorted(&v, 0.75), 6.25);
        assert_eq!(quantile_sorted(&v, 1.0), 8.0);
    }
}
