//! Weighted within-transformation by alternating projections.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Integer-coded categorical variable (levels `0..n_levels`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Factor {
    codes: Vec<usize>,
    n_levels: usize,
}

impl Factor {
    /// Codes levels in sorted key order.
    pub fn from_keys<K: Ord + Clone>(keys: &[K]) -> Self {
        let mut uniq: Vec<K> = keys.to_vec();
        uniq.sort();
        uniq.dedup();
        let codes = keys
            .iter()
            .map(|k| uniq.binary_search(k).expect("key present"))
            .collect();
        Self {
            codes,
            n_levels: uniq.len(),
        }
    }

    pub fn from_codes(codes: Vec<usize>) -> Self {
        let n_levels = codes.iter().max().map_or(0, |m| m + 1);
        Self { codes, n_levels }
    }

    pub fn codes(&self) -> &[usize] {
        &self.codes
    }

    pub fn n_levels(&self) -> usize {
        self.n_levels
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    /// Restricts to `rows` and renumbers the surviving levels densely.
    pub fn subset(&self, rows: &[usize]) -> Self {
        let mut map = vec![usize::MAX; self.n_levels];
        let mut next = 0;
        let codes = rows
            .iter()
            .map(|&r| {
                let c = self.codes[r];
                if map[c] == usize::MAX {
                    map[c] = next;
                    next += 1;
                }
                map[c]
            })
            .collect();
        Self { codes, n_levels: next }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DemeanOptions {
    /// Stop once the sup-norm change over a full sweep falls below this.
    pub tol: f64,
    pub max_sweeps: usize,
}

impl Default for DemeanOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_sweeps: 10_000,
        }
    }
}

/// Sweep count and last sup-norm change.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct DemeanStats {
    pub sweeps: usize,
    pub last_delta: f64,
}

struct FactorWeights<'a> {
    factor: &'a Factor,
    inv_wsum: Vec<f64>,
}

impl<'a> FactorWeights<'a> {
    fn new(factor: &'a Factor, weights: &[f64]) -> Self {
        let mut wsum = vec![0.0; factor.n_levels];
        for (&c, &w) in factor.codes.iter().zip(weights) {
            wsum[c] += w;
        }
        let inv_wsum = wsum.into_iter().map(|s| if s > 0.0 { 1.0 / s } else { 0.0 }).collect();
        Self { factor, inv_wsum }
    }

    /// Subtracts weighted level means in place; returns the largest mean removed.
    fn project(&self, x: &mut [f64], weights: &[f64], sums: &mut [f64]) -> f64 {
        sums.iter_mut().for_each(|s| *s = 0.0);
        for ((&c, &v), &w) in self.factor.codes.iter().zip(x.iter()).zip(weights) {
            sums[c] += w * v;
        }
        let mut delta = 0.0f64;
        for (s, inv) in sums.iter_mut().zip(&self.inv_wsum) {
            *s *= inv;
            delta = delta.max(s.abs());
        }
        for (&c, v) in self.factor.codes.iter().zip(x.iter_mut()) {
            *v -= sums[c];
        }
        delta
    }
}

fn demean_column(x: &mut [f64], factors: &[FactorWeights<'_>], weights: &[f64], opts: &DemeanOptions) -> Result<DemeanStats> {
    let mut scratch: Vec<Vec<f64>> = factors.iter().map(|f| vec![0.0; f.factor.n_levels]).collect();
    match factors.len() {
        0 => return Ok(DemeanStats::default()),
        1 => {
            let d = factors[0].project(x, weights, &mut scratch[0]);
            return Ok(DemeanStats {
                sweeps: 1,
                last_delta: d,
            });
        }
        _ => {}
    }
    let mut last_delta = f64::INFINITY;
    for sweep in 1..=opts.max_sweeps {
        let mut delta = 0.0f64;
        for (f, s) in factors.iter().zip(scratch.iter_mut()) {
            delta = delta.max(f.project(x, weights, s));
        }
        last_delta = delta;
        if delta < opts.tol {
            return Ok(DemeanStats { sweeps: sweep, last_delta });
        }
    }
    Err(Error::DemeanNotConverged {
        sweeps: opts.max_sweeps,
        last_delta,
    })
}

/// Removes weighted group means of every factor from each column in place,
/// alternating over factors until a full sweep changes no entry by more
/// than `opts.tol`. A single factor is exact after one pass.
pub fn demean_in_place(
    columns: &mut [Vec<f64>],
    factors: &[&Factor],
    weights: &[f64],
    opts: &DemeanOptions,
) -> Result<DemeanStats> {
    let n = weights.len();
    for f in factors {
        if f.len() != n {
            return Err(Error::InvalidInput(format!("factor has {} rows, weights {n}", f.len())));
        }
    }
    if let Some(c) = columns.iter().find(|c| c.len() != n) {
        return Err(Error::InvalidInput(format!("column has {} rows, weights {n}", c.len())));
    }
    if weights.iter().any(|w| !(*w >= 0.0)) {
        return Err(Error::InvalidInput("demeaning weights must be non-negative".into()));
    }
    let fw: Vec<FactorWeights<'_>> = factors.iter().map(|f| FactorWeights::new(f, weights)).collect();
    let run = |c: &mut Vec<f64>| demean_column(c, &fw, weights, opts);
    let stats: Vec<DemeanStats> = if n * columns.len() > 200_000 {
        columns.par_iter_mut().map(run).collect::<Result<_>>()?
    } else {
        columns.iter_mut().map(run).collect::<Result<_>>()?
    };
    Ok(stats.into_iter().fold(DemeanStats::default(), |acc, s| DemeanStats {
        sweeps: acc.sweeps.max(s.sweeps),
        last_delta: acc.last_delta.max(s.last_delta),
    }))
}

/// Copying convenience wrapper around [`demean_in_place`].
pub fn demean(columns: &[Vec<f64>], factors: &[&Factor], weights: &[f64], opts: &DemeanOptions) -> Result<Vec<Vec<f64>>> {
    let mut out = columns.to_vec();
    demean_in_place(&mut out, factors, weights, opts)?;
    Ok(out)
}

/// Largest absolute weighted level mean of `x` under `factor`.
pub fn max_group_mean(x: &[f64], factor: &Factor, weights: &[f64]) -> f64 {
    let mut sums = vec![0.0; factor.n_levels()];
    let mut wsum = vec![0.0; factor.n_levels()];
    for ((&c, &v), &w) in factor.codes().iter().zip(x).zip(weights) {
        sums[c] += w * v;
        wsum[c] += w;
    }
    sums.iter()
        .zip(&wsum)
        .filter(|(_, &w)| w > 0.0)
        .map(|(s, w)| (s / w).abs())
        .fold(0.0, f64::max)
}
