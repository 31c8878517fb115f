//! Co-occurrence structure of analytes and joint mixture effects.

use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feglm::{fit_poisson_fe, FitOptions, RegressionSpec, YearEffect};
use crate::panel::ZipYearPanel;
use crate::stats::{rate_increase, RateIncrease};
use crate::table::{fmt_f64, fmt_opt, TableWriter};

/// Pearson correlation of `x` and `y` over rows where both are observed.
/// `None` when fewer than three such rows exist or either side is constant.
pub fn pearson(x: &[Option<f64>], y: &[Option<f64>]) -> (Option<f64>, usize) {
    let pairs: Vec<(f64, f64)> = x.iter().zip(y).filter_map(|(a, b)| Some(((*a)?, (*b)?))).collect();
    let n = pairs.len();
    if n < 3 {
        return (None, n);
    }
    let nf = n as f64;
    let mx = pairs.iter().map(|p| p.0).sum::<f64>() / nf;
    let my = pairs.iter().map(|p| p.1).sum::<f64>() / nf;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in &pairs {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return (None, n);
    }
    (Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0)), n)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationMatrix {
    pub names: Vec<String>,
    /// `r[i][j]`; `None` for pairs with too few complete rows.
    pub r: Vec<Vec<Option<f64>>>,
    pub n: Vec<Vec<usize>>,
}

impl CorrelationMatrix {
    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

pub fn correlation_matrix(panel: &ZipYearPanel, analytes: &[&str]) -> Result<CorrelationMatrix> {
    if analytes.len() < 2 {
        return Err(Error::InvalidInput("correlation needs at least two analytes".into()));
    }
    let cols = analytes
        .iter()
        .map(|a| {
            panel
                .analyte(a)
                .map(|c| &c.values)
                .ok_or_else(|| Error::InvalidInput(format!("unknown analyte `{a}`")))
        })
        .collect::<Result<Vec<_>>>()?;
    let k = cols.len();
    let mut r = vec![vec![None; k]; k];
    let mut n = vec![vec![0; k]; k];
    for i in 0..k {
        let count = cols[i].iter().filter(|v| v.is_some()).count();
        n[i][i] = count;
        r[i][i] = (count >= 3).then_some(1.0);
        for j in (i + 1)..k {
            let (rij, nij) = pearson(cols[i], cols[j]);
            r[i][j] = rij;
            r[j][i] = rij;
            n[i][j] = nij;
            n[j][i] = nij;
        }
    }
    Ok(CorrelationMatrix {
        names: analytes.iter().map(|s| s.to_string()).collect(),
        r,
        n,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub a: String,
    pub b: String,
    pub r: f64,
}

/// Pairs with `|r| > threshold`, in upper-triangular order.
pub fn correlation_network(m: &CorrelationMatrix, threshold: f64) -> Vec<Edge> {
    let mut edges = Vec::new();
    for i in 0..m.len() {
        for j in (i + 1)..m.len() {
            if let Some(r) = m.r[i][j] {
                if r.abs() > threshold {
                    edges.push(Edge {
                        a: m.names[i].clone(),
                        b: m.names[j].clone(),
                        r,
                    });
                }
            }
        }
    }
    edges
}

/// `1 − |r|` with missing pairs set to the largest observed dissimilarity
/// (or 1 when none is observed). Returns the matrix and the imputed pair count.
pub fn dissimilarity(m: &CorrelationMatrix) -> (DMatrix<f64>, usize) {
    let k = m.len();
    let mut d = DMatrix::from_element(k, k, f64::NAN);
    let mut max_d = f64::NEG_INFINITY;
    for i in 0..k {
        d[(i, i)] = 0.0;
        for j in (i + 1)..k {
            if let Some(r) = m.r[i][j] {
                let v = 1.0 - r.abs();
                d[(i, j)] = v;
                d[(j, i)] = v;
                max_d = max_d.max(v);
            }
        }
    }
    let fill = if max_d.is_finite() { max_d } else { 1.0 };
    let mut imputed = 0;
    for i in 0..k {
        for j in (i + 1)..k {
            if d[(i, j)].is_nan() {
                d[(i, j)] = fill;
                d[(j, i)] = fill;
                imputed += 1;
            }
        }
    }
    (d, imputed)
}

#[derive(Debug, Clone)]
pub struct MdsEmbedding {
    /// `n × dims` coordinates, `dims ∈ {1, 2}` (0 for degenerate input).
    pub coords: DMatrix<f64>,
    pub eigenvalues: Vec<f64>,
}

impl MdsEmbedding {
    pub fn dims(&self) -> usize {
        self.coords.ncols()
    }

    pub fn point(&self, i: usize) -> [f64; 2] {
        let c = |j: usize| if j < self.dims() { self.coords[(i, j)] } else { 0.0 };
        [c(0), c(1)]
    }
}

/// Classical (Torgerson) scaling of a symmetric dissimilarity matrix into
/// two dimensions. Each axis is oriented so its first nonzero loading is positive.
pub fn mds_embed(d: &DMatrix<f64>) -> Result<MdsEmbedding> {
    let n = d.nrows();
    if d.ncols() != n || d.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("dissimilarities must form a finite square matrix".into()));
    }
    if n == 0 {
        return Ok(MdsEmbedding {
            coords: DMatrix::zeros(0, 0),
            eigenvalues: Vec::new(),
        });
    }
    let d2 = d.map(|v| v * v);
    let row_mean: Vec<f64> = (0..n).map(|i| d2.row(i).sum() / n as f64).collect();
    let col_mean: Vec<f64> = (0..n).map(|j| d2.column(j).sum() / n as f64).collect();
    let grand = d2.sum() / (n * n) as f64;
    let b = DMatrix::from_fn(n, n, |i, j| -0.5 * (d2[(i, j)] - row_mean[i] - col_mean[j] + grand));
    let b = (&b + b.transpose()) * 0.5;
    let eig = SymmetricEigen::new(b);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &c| eig.eigenvalues[c].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&c)));
    let scale = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
    let positive: Vec<usize> = order
        .iter()
        .copied()
        .filter(|&k| eig.eigenvalues[k] > 1e-12 * scale)
        .take(2)
        .collect();
    if positive.len() < 2 {
        log::warn!("classical scaling found {} positive eigenvalue(s); emitting a lower-dimensional embedding", positive.len());
    }
    let mut coords = DMatrix::zeros(n, positive.len());
    let mut eigenvalues = Vec::with_capacity(positive.len());
    for (axis, &k) in positive.iter().enumerate() {
        let lam = eig.eigenvalues[k];
        let v = eig.eigenvectors.column(k);
        let sign = v.iter().find(|x| x.abs() > 1e-12).map_or(1.0, |x| x.signum());
        for i in 0..n {
            coords[(i, axis)] = sign * v[i] * lam.sqrt();
        }
        eigenvalues.push(lam);
    }
    Ok(MdsEmbedding { coords, eigenvalues })
}

/// Quantile scores `0..q−1`: the number of type-7 empirical quantile
/// breakpoints `k/q` lying strictly below each value. Comparisons are made
/// against order statistics, so scores depend only on ranks.
pub fn quantize(values: &[f64], q: usize) -> Result<Vec<u32>> {
    if q < 1 {
        return Err(Error::InvalidInput("quantile count must be at least 1".into()));
    }
    if values.len() < q {
        return Err(Error::InvalidInput(format!("{} values are too few for {q} quantiles", values.len())));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("quantize requires finite values".into()));
    }
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    if s[0] == s[s.len() - 1] {
        log::warn!("constant column quantized to a single bin");
        return Ok(vec![0; values.len()]);
    }
    let m = s.len() - 1;
    // v > breakpoint_k  ⇔  v > s[lo] when the breakpoint is an order statistic,
    // otherwise v ≥ s[lo + 1] (the breakpoint lies strictly between the two)
    let rules: Vec<(f64, bool)> = (1..q)
        .map(|k| {
            let lo = m * k / q;
            let exact = (m * k).is_multiple_of(q) || s[lo] == s[lo + 1];
            if exact {
                (s[lo], true)
            } else {
                (s[lo + 1], false)
            }
        })
        .collect();
    Ok(values
        .iter()
        .map(|&v| rules.iter().filter(|&&(t, strict)| if strict { v > t } else { v >= t }).count() as u32)
        .collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub name: String,
    pub analytes: Vec<String>,
}

impl MixtureSpec {
    pub fn new(name: &str, analytes: &[&str]) -> Self {
        Self {
            name: name.into(),
            analytes: analytes.iter().map(|s| s.to_string()).collect(),
        }
    }
}

pub fn builtin_mixtures() -> Vec<MixtureSpec> {
    vec![
        MixtureSpec::new(
            "toxic_metals",
            &["Lead", "Arsenic", "Mercury", "Chromium Hex", "Barium", "Copper", "Manganese", "Aluminum"],
        ),
        MixtureSpec::new("industrial", &["Perchlorate", "Mercury", "Cyanide"]),
        MixtureSpec::new("salinity_ions_fig6", &["Sodium", "Chloride", "Sulfate"]),
        MixtureSpec::new(
            "inorganic_ions_methods",
            &[
                "Chloride",
                "Sodium",
                "Total Dissolved Solids (TDS)",
                "Sulfate",
                "Conductivity, μ mhos/cm at 25°C",
                "Hardness (Total as CaCO ₃)",
            ],
        ),
        MixtureSpec::new(
            "disinfection_byproducts",
            &[
                "Bromodichloromethane",
                "Bromoform",
                "Chloroform",
                "Dibromoacetic Acid",
                "Dibromochloromethane",
                "Dichloroacetic Acid",
                "Total Haloacetic Acids (HAA5)",
                "Trihalomethanes (TTHM)",
                "Trichloroacetic Acid",
                "Ethylene Dibromide",
            ],
        ),
    ]
}

pub fn read_mixtures_json(path: &Path) -> Result<Vec<MixtureSpec>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    serde_json::from_str(&text).map_err(|e| Error::parse(path, 0, e.to_string()))
}

pub fn write_mixtures_json(specs: &[MixtureSpec], path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(specs).expect("mixture specs serialize");
    std::fs::write(path, text + "\n").map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QgcompConfig {
    pub n_quantiles: usize,
    pub year_spline_df: usize,
    pub clustered: bool,
}

impl Default for QgcompConfig {
    fn default() -> Self {
        Self {
            n_quantiles: 4,
            year_spline_df: 4,
            clustered: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MixtureResult {
    pub name: String,
    pub analytes_used: Vec<String>,
    pub analytes_missing: Vec<String>,
    pub n_obs: usize,
    /// Log-rate change per simultaneous one-quantile rise of every component.
    pub psi: f64,
    pub se: f64,
    pub p_value: f64,
    pub increase: RateIncrease,
    /// Relative rate `exp(ψ·k)` at joint quantile level `k = 0..q−1`.
    pub curve: Vec<(u32, f64)>,
}

/// Resolves mixture members against panel analytes, ignoring case.
fn resolve(panel: &ZipYearPanel, spec: &MixtureSpec) -> (Vec<String>, Vec<String>) {
    let names = panel.analyte_names();
    let mut used = Vec::new();
    let mut missing = Vec::new();
    for a in &spec.analytes {
        match names.iter().find(|n| n.eq_ignore_ascii_case(a)) {
            Some(n) if !used.iter().any(|u: &String| u == n) => used.push(n.to_string()),
            Some(_) => {}
            None => missing.push(a.clone()),
        }
    }
    (used, missing)
}

/// Quantile g-computation: Poisson fit on the mean of the components'
/// quantile scores, computed over rows where every component is observed.
pub fn qgcomp_fit(
    panel: &ZipYearPanel,
    spec: &MixtureSpec,
    covariates: &RegressionSpec,
    config: &QgcompConfig,
    opts: &FitOptions,
) -> Result<MixtureResult> {
    if spec.analytes.is_empty() {
        return Err(Error::InvalidInput(format!("mixture `{}` has no components", spec.name)));
    }
    let (used, missing) = resolve(panel, spec);
    if used.is_empty() || (spec.analytes.len() >= 2 && used.len() < 2) {
        return Err(Error::InvalidInput(format!(
            "mixture `{}` has {} of its {} components in the panel",
            spec.name,
            used.len(),
            spec.analytes.len()
        )));
    }
    let cols: Vec<&[Option<f64>]> = used
        .iter()
        .map(|a| panel.analyte(a).expect("resolved").values.as_slice())
        .collect();
    let complete: Vec<usize> = (0..panel.n_rows()).filter(|&i| cols.iter().all(|c| c[i].is_some())).collect();
    let mut index = vec![0.0; complete.len()];
    for c in &cols {
        let v: Vec<f64> = complete.iter().map(|&i| c[i].expect("complete")).collect();
        for (s, q) in index.iter_mut().zip(quantize(&v, config.n_quantiles)?) {
            *s += f64::from(q);
        }
    }
    let m = used.len() as f64;
    let mut exposure = vec![None; panel.n_rows()];
    for (&i, s) in complete.iter().zip(&index) {
        exposure[i] = Some(s / m);
    }
    let mut rs = covariates.clone();
    rs.year = YearEffect::NaturalSpline {
        df: config.year_spline_df,
    };
    rs.cluster_by_zip = config.clustered;
    let name = "mixture_index";
    let design = rs.build(panel, &[(name, &exposure)])?;
    let fit = fit_poisson_fe(&design.problem, opts)?;
    let (psi, se) = (fit.coef[0], fit.se(0));
    Ok(MixtureResult {
        name: spec.name.clone(),
        analytes_used: used,
        analytes_missing: missing,
        n_obs: fit.n_obs,
        psi,
        se,
        p_value: fit.p_value(0),
        increase: rate_increase(psi, se),
        curve: (0..config.n_quantiles as u32).map(|k| (k, (psi * f64::from(k)).exp())).collect(),
    })
}

pub fn write_correlations_csv(m: &CorrelationMatrix, path: &Path) -> Result<()> {
    let mut w = TableWriter::create(path, &["i", "j", "r", "n"])?;
    for i in 0..m.len() {
        for j in 0..m.len() {
            w.row([m.names[i].clone(), m.names[j].clone(), fmt_opt(m.r[i][j]), m.n[i][j].to_string()])?;
        }
    }
    w.finish()
}

pub fn write_network_csv(edges: &[Edge], path: &Path) -> Result<()> {
    let mut w = TableWriter::create(path, &["i", "j", "r"])?;
    for e in edges {
        w.row([e.a.clone(), e.b.clone(), fmt_f64(e.r)])?;
    }
    w.finish()
}

pub fn write_mds_csv(names: &[String], classes: &[String], emb: &MdsEmbedding, path: &Path) -> Result<()> {
    let mut w = TableWriter::create(path, &["analyte", "x", "y", "class"])?;
    for (i, name) in names.iter().enumerate() {
        let [x, y] = emb.point(i);
        w.row([name.clone(), fmt_f64(x), fmt_f64(y), classes[i].clone()])?;
    }
    w.finish()
}

pub fn write_mixture_results_csv(results: &[std::result::Result<MixtureResult, (String, String)>], path: &Path) -> Result<()> {
    let mut w = TableWriter::create(
        path,
        &["mixture", "components_used", "components_missing", "n_obs", "psi", "std_err", "increase_pct", "ci_lo", "ci_hi", "p_value", "error"],
    )?;
    for r in results {
        match r {
            Ok(m) => w.row([
                m.name.clone(),
                m.analytes_used.join(";"),
                m.analytes_missing.join(";"),
                m.n_obs.to_string(),
                fmt_f64(m.psi),
                fmt_f64(m.se),
                fmt_f64(m.increase.point),
                fmt_f64(m.increase.lo),
                fmt_f64(m.increase.hi),
                fmt_f64(m.p_value),
                String::new(),
            ])?,
            Err((name, msg)) => {
                let mut row = vec![name.clone()];
                row.extend(std::iter::repeat_n(crate::table::NA.to_string(), 9));
                row.push(msg.clone());
                w.row(row)?
            }
        }
    }
    w.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn obs(v: &[f64]) -> Vec<Option<f64>> {
        v.iter().copied().map(Some).collect()
    }

    #[test]
    fn pearson_examples() {
        let x = obs(&[1.0, 2.0, 3.0, 4.0]);
        assert!((pearson(&x, &obs(&[1.0, 3.0, 2.0, 4.0])).0.unwrap() - 0.8).abs() < 1e-12);
        assert_eq!(pearson(&x, &x).0, Some(1.0));
        assert_eq!(pearson(&x, &obs(&[-1.0, -2.0, -3.0, -4.0])).0, Some(-1.0));
        let sparse = vec![Some(1.0), None, Some(2.0), None];
        assert_eq!(pearson(&sparse, &x), (None, 2));
    }

    #[test]
    fn network_threshold_is_strict_on_absolute_value() {
        let m = CorrelationMatrix {
            names: vec!["a".into(), "b".into(), "c".into(), "d".into()],
            r: vec![
                vec![Some(1.0), Some(0.31), Some(0.29), Some(-0.5)],
                vec![Some(0.31), Some(1.0), Some(0.3), None],
                vec![Some(0.29), Some(0.3), Some(1.0), Some(0.0)],
                vec![Some(-0.5), None, Some(0.0), Some(1.0)],
            ],
            n: vec![vec![10; 4]; 4],
        };
        let e = correlation_network(&m, 0.3);
        let pairs: Vec<(&str, &str)> = e.iter().map(|e| (e.a.as_str(), e.b.as_str())).collect();
        assert_eq!(pairs, vec![("a", "b"), ("a", "d")]);
        let (d, imputed) = dissimilarity(&m);
        assert_eq!(imputed, 1);
        assert_eq!(d[(1, 3)], 1.0);
    }

    fn distances(points: &[[f64; 2]]) -> DMatrix<f64> {
        let n = points.len();
        DMatrix::from_fn(n, n, |i, j| ((points[i][0] - points[j][0]).powi(2) + (points[i][1] - points[j][1]).powi(2)).sqrt())
    }

    #[test]
    fn two_points_sit_at_half_distance() {
        let d = DMatrix::from_row_slice(2, 2, &[0.0, 0.6, 0.6, 0.0]);
        let e = mds_embed(&d).unwrap();
        assert_eq!(e.dims(), 1);
        assert!((e.coords[(0, 0)] - 0.3).abs() < 1e-12 && (e.coords[(1, 0)] + 0.3).abs() < 1e-12);
    }

    #[test]
    fn collinear_points_reproduce_distances() {
        let p = [[0.0, 0.0], [1.0, 0.0], [3.0, 0.0]];
        let d = distances(&p);
        let e = mds_embed(&d).unwrap();
        let q: Vec<[f64; 2]> = (0..3).map(|i| e.point(i)).collect();
        assert!((distances(&q) - d).amax() < 1e-9);
    }

    #[test]
    fn planted_configuration_recovered() {
        let p: Vec<[f64; 2]> = (0..10).map(|i| [(i as f64 * 1.3).sin(), (i as f64 * 0.7).cos() * 0.5]).collect();
        let d = distances(&p);
        let e = mds_embed(&d).unwrap();
        assert_eq!(e.dims(), 2);
        let q: Vec<[f64; 2]> = (0..10).map(|i| e.point(i)).collect();
        assert!((distances(&q) - &d).amax() < 1e-8);
        let again = mds_embed(&distances(&q)).unwrap();
        let r: Vec<[f64; 2]> = (0..10).map(|i| again.point(i)).collect();
        assert!((distances(&r) - d).amax() < 1e-8);
    }

    #[test]
    fn quantize_examples() {
        let v: Vec<f64> = (1..=8).map(f64::from).collect();
        assert_eq!(quantize(&v, 4).unwrap(), vec![0, 0, 1, 1, 2, 2, 3, 3]);
        assert_eq!(quantize(&[2.0; 6], 4).unwrap(), vec![0; 6]);
        assert!(quantize(&[1.0, 2.0], 4).is_err());
        // ties at a breakpoint fall in the lower bin
        assert_eq!(quantize(&[1.0, 2.0, 2.0, 2.0, 3.0], 2).unwrap(), vec![0, 0, 0, 0, 1]);
    }

    fn rank_oracle(v: &[f64], q: usize) -> Vec<u32> {
        let mut s = v.to_vec();
        s.sort_by(f64::total_cmp);
        let bps: Vec<f64> = (1..q).map(|k| crate::stats::quantile_sorted(&s, k as f64 / q as f64)).collect();
        v.iter().map(|x| bps.iter().filter(|b| **b < *x).count() as u32).collect()
    }

    proptest! {
        #[test]
        fn quantize_matches_interpolated_breakpoints_on_integers(v in proptest::collection::vec(0i32..20, 4..60)) {
            let v: Vec<f64> = v.into_iter().map(f64::from).collect();
            prop_assert_eq!(quantize(&v, 4).unwrap(), rank_oracle(&v, 4));
        }

        #[test]
        fn quantize_invariant_under_monotone_maps(v in proptest::collection::vec(-5.0f64..5.0, 4..60)) {
            let a = quantize(&v, 4).unwrap();
            let t: Vec<f64> = v.iter().map(|x| (x * 0.9).exp() * 3.0 + 1.0).collect();
            prop_assert_eq!(&a, &quantize(&t, 4).unwrap());
            let c: Vec<f64> = v.iter().map(|x| x.powi(3)).collect();
            prop_assert_eq!(&a, &quantize(&c, 4).unwrap());
        }

        #[test]
        fn correlation_matrix_symmetric(seed in 0u64..50) {
            use crate::synth::{generate_panel, SynthSpec};
            let spec = SynthSpec { n_zips: 8, n_years: 4, n_analytes: 4, seed, ..SynthSpec::default() };
            let (panel, _) = generate_panel(&spec).unwrap();
            let names = panel.analyte_names();
            let m = correlation_matrix(&panel, &names).unwrap();
            for i in 0..m.len() {
                for j in 0..m.len() {
                    prop_assert_eq!(m.r[i][j], m.r[j][i]);
                }
            }
            let rev: Vec<&str> = names.iter().rev().copied().collect();
            let mr = correlation_matrix(&panel, &rev).unwrap();
            let k = m.len();
            for i in 0..k {
                for j in 0..k {
                    prop_assert_eq!(m.r[i][j], mr.r[k - 1 - i][k - 1 - j]);
                }
            }
        }
    }
}
