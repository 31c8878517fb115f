//! Synthetic zip × year panels with known parameters, and a dense
//! dummy-variable Poisson fit used as a reference implementation.
//!
//! Every random draw comes from a ChaCha stream keyed by
//! `(seed, zip, year, tag)`, so output does not depend on generation order.

use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feglm::{poisson_deviance, Factor};
use crate::mixtures::{quantize, write_mixtures_json, MixtureSpec};
use crate::panel::{AnalyteColumn, PanelRow, Standardization, ZipYearPanel, AGE_BANDS};
use crate::panelprep::column_moments;
use crate::table::{fmt_f64, TableWriter};

const CLASSES: [&str; 5] = ["metals", "inorganics", "organics", "radionuclides", "byproducts"];

/// Within-zip serially correlated noise on the log rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Overdispersion {
    pub sd: f64,
    /// AR(1) coefficient across consecutive years.
    pub rho: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_zips: usize,
    pub n_years: usize,
    pub first_year: i32,
    pub n_analytes: usize,
    /// Log-rate effect per SD of each analyte's standardized concentration;
    /// shorter vectors are padded with zeros.
    pub beta: Vec<f64>,
    /// Log-rate effect per quartile score of each analyte (padded with zeros).
    pub quartile_effects: Vec<f64>,
    pub zip_fe_sd: f64,
    pub year_fe_sd: f64,
    /// Share of exposure variance that is constant within a zip.
    pub exposure_zip_share: f64,
    /// Analytes are grouped in consecutive blocks of this size that share a
    /// common factor with loading `exposure_block_rho`.
    pub exposure_block_size: usize,
    pub exposure_block_rho: f64,
    pub missing_rate: f64,
    /// Counts below this are censored to zero.
    pub censor_threshold: Option<u64>,
    /// Baseline deaths per person-year.
    pub base_rate: f64,
    pub population_range: (f64, f64),
    pub overdispersion: Option<Overdispersion>,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_zips: 150,
            n_years: 11,
            first_year: 2012,
            n_analytes: 20,
            beta: Vec::new(),
            quartile_effects: Vec::new(),
            zip_fe_sd: 0.3,
            year_fe_sd: 0.05,
            exposure_zip_share: 0.5,
            exposure_block_size: 1,
            exposure_block_rho: 0.0,
            missing_rate: 0.05,
            censor_threshold: None,
            base_rate: 0.007,
            population_range: (2_000.0, 40_000.0),
            overdispersion: None,
            seed: 0,
        }
    }
}

impl SynthSpec {
    fn validate(&self) -> Result<()> {
        if self.n_zips == 0 || self.n_years == 0 || self.n_analytes == 0 {
            return Err(Error::InvalidInput("synthetic panel needs at least one zip, year and analyte".into()));
        }
        if !(0.0..1.0).contains(&self.missing_rate) {
            return Err(Error::InvalidInput("missing rate must lie in [0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.exposure_zip_share) || !(0.0..=1.0).contains(&self.exposure_block_rho) {
            return Err(Error::InvalidInput("exposure variance shares must lie in [0, 1]".into()));
        }
        if self.exposure_block_size == 0 {
            return Err(Error::InvalidInput("exposure block size must be at least 1".into()));
        }
        let (lo, hi) = self.population_range;
        if !(lo > 0.0 && hi >= lo) {
            return Err(Error::InvalidInput("population range must be positive and ordered".into()));
        }
        Ok(())
    }

    pub fn analyte_name(k: usize) -> String {
        format!("analyte_{:02}", k + 1)
    }

    fn coef(v: &[f64], k: usize) -> f64 {
        v.get(k).copied().unwrap_or(0.0)
    }
}

/// Generating parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthTruth {
    pub beta: Vec<f64>,
    pub quartile_effects: Vec<f64>,
    /// `(covariate name, coefficient)` on the design scale used by the regressions.
    pub gamma: Vec<(String, f64)>,
    pub alpha: Vec<f64>,
    pub delta: Vec<f64>,
    /// Expected deaths per panel row, in panel order.
    pub expected: Vec<f64>,
    /// Standardization constants of each analyte's observed concentrations.
    pub standardization: Vec<Standardization>,
}

const TAG_ZIP: u64 = 1;
const TAG_YEAR: u64 = 2;
const TAG_ROW: u64 = 3;
const TAG_BLOCK: u64 = 1 << 20;
const TAG_ANALYTE_ZIP: u64 = 2 << 20;
const TAG_ANALYTE: u64 = 3 << 20;
const NONE: u64 = u64::MAX;

fn stream(seed: u64, zip: u64, year: u64, tag: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&zip.to_le_bytes());
    key[16..24].copy_from_slice(&year.to_le_bytes());
    key[24..].copy_from_slice(&tag.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

fn std_normal(rng: &mut ChaCha8Rng) -> f64 {
    Normal::new(0.0, 1.0).expect("unit normal").sample(rng)
}

const GAMMA_INCOME: f64 = -0.02;
const GAMMA_AGE65: f64 = 0.02;

struct ZipDraw {
    alpha: f64,
    income: f64,
    groundwater: bool,
    shares: [f64; 5],
    population: f64,
    exposure_level: Vec<f64>,
    noise: Vec<f64>,
}

fn draw_zip(spec: &SynthSpec, z: usize) -> ZipDraw {
    let mut rng = stream(spec.seed, z as u64, NONE, TAG_ZIP);
    let alpha = spec.zip_fe_sd * std_normal(&mut rng);
    let income = rng.random_range(35_000.0..130_000.0);
    let groundwater = rng.random_bool(0.4);
    let raw: [f64; 5] = [6.0, 12.0, 13.0, 53.0, 16.0].map(|m| m * rng.random_range(0.7..1.3));
    let total: f64 = raw.iter().sum();
    let shares = raw.map(|v| v / total * 100.0);
    let (lo, hi) = spec.population_range;
    let population = if hi > lo { rng.random_range(lo..hi) } else { lo };
    let noise = match spec.overdispersion {
        Some(od) => {
            let mut e = Vec::with_capacity(spec.n_years);
            let mut prev = od.sd * std_normal(&mut rng);
            e.push(prev);
            for _ in 1..spec.n_years {
                prev = od.rho * prev + od.sd * (1.0 - od.rho * od.rho).sqrt() * std_normal(&mut rng);
                e.push(prev);
            }
            e
        }
        None => vec![0.0; spec.n_years],
    };
    let exposure_level = (0..spec.n_analytes)
        .map(|k| std_normal(&mut stream(spec.seed, z as u64, NONE, TAG_ANALYTE_ZIP + k as u64)))
        .collect();
    ZipDraw {
        alpha,
        income,
        groundwater,
        shares,
        population,
        exposure_level,
        noise,
    }
}

/// Simulates a panel under `log λ = log N + log(base) + βz + b·q + γX + α + δ (+ noise)`.
pub fn generate_panel(spec: &SynthSpec) -> Result<(ZipYearPanel, SynthTruth)> {
    spec.validate()?;
    let (nz, ny, na) = (spec.n_zips, spec.n_years, spec.n_analytes);
    let zips: Vec<ZipDraw> = (0..nz).into_par_iter().map(|z| draw_zip(spec, z)).collect();
    let delta: Vec<f64> = (0..ny)
        .map(|t| spec.year_fe_sd * std_normal(&mut stream(spec.seed, NONE, t as u64, TAG_YEAR)))
        .collect();
    let n = nz * ny;
    let n_blocks = na.div_ceil(spec.exposure_block_size);

    // raw concentrations, row-major over (zip, year); lognormal around 1
    let per_row: Vec<(Vec<Option<f64>>, f64, [f64; 5], f64)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let (z, t) = (i / ny, i % ny);
            let zd = &zips[z];
            let blocks: Vec<f64> = (0..n_blocks)
                .map(|b| std_normal(&mut stream(spec.seed, z as u64, t as u64, TAG_BLOCK + b as u64)))
                .collect();
            let values = (0..na)
                .map(|k| {
                    let mut rng = stream(spec.seed, z as u64, t as u64, TAG_ANALYTE + k as u64);
                    let e = std_normal(&mut rng);
                    let rho = spec.exposure_block_rho;
                    let within = rho.sqrt() * blocks[k / spec.exposure_block_size] + (1.0 - rho).sqrt() * e;
                    let s = spec.exposure_zip_share;
                    let a = s.sqrt() * zd.exposure_level[k] + (1.0 - s).sqrt() * within;
                    let missing = rng.random_bool(spec.missing_rate);
                    (!missing).then(|| (0.5 * a).exp())
                })
                .collect();
            let mut rng = stream(spec.seed, z as u64, t as u64, TAG_ROW);
            let income = zd.income * (1.0 + 0.02 * t as f64) * rng.random_range(0.97..1.03);
            let raw = zd.shares.map(|s| s * rng.random_range(0.97..1.03));
            let total: f64 = raw.iter().sum();
            let shares = raw.map(|s| s / total * 100.0);
            let pop = (zd.population * rng.random_range(0.95..1.05)).round();
            (values, income, shares, pop)
        })
        .collect();

    let mut columns: Vec<Vec<Option<f64>>> = vec![Vec::with_capacity(n); na];
    for (values, ..) in &per_row {
        for (c, v) in columns.iter_mut().zip(values) {
            c.push(*v);
        }
    }
    let standardization: Vec<Standardization> = columns
        .iter()
        .map(|c| {
            column_moments(c).filter(|s| s.sd > 0.0).unwrap_or_else(|| Standardization {
                mean: c.iter().flatten().next().copied().unwrap_or(0.0),
                sd: 1.0,
            })
        })
        .collect();
    let scores: Vec<Option<Vec<u32>>> = (0..na)
        .map(|k| {
            if SynthSpec::coef(&spec.quartile_effects, k) == 0.0 {
                return Ok(None);
            }
            let obs: Vec<f64> = columns[k].iter().flatten().copied().collect();
            let q = quantize(&obs, 4)?;
            let mut it = q.into_iter();
            Ok(Some(columns[k].iter().map(|v| v.map_or(0, |_| it.next().expect("score"))).collect()))
        })
        .collect::<Result<_>>()?;

    let log_base = spec.base_rate.ln();
    let rows_expected: Vec<(PanelRow, f64)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let (z, t) = (i / ny, i % ny);
            let zd = &zips[z];
            let (_, income, shares, pop) = &per_row[i];
            let mut eta = pop.ln() + log_base + zd.alpha + delta[t] + zd.noise[t];
            eta += GAMMA_INCOME * income / crate::feglm::INCOME_SCALE + GAMMA_AGE65 * shares[4];
            for k in 0..na {
                let b = SynthSpec::coef(&spec.beta, k);
                if b != 0.0 {
                    if let Some(v) = columns[k][i] {
                        eta += b * standardization[k].apply(v);
                    }
                }
                if let Some(sc) = &scores[k] {
                    if columns[k][i].is_some() {
                        eta += SynthSpec::coef(&spec.quartile_effects, k) * f64::from(sc[i]);
                    }
                }
            }
            let mu = eta.exp();
            let mut rng = stream(spec.seed, z as u64, t as u64, TAG_ROW + 1);
            let draw = Poisson::new(mu).map(|p| p.sample(&mut rng)).unwrap_or(0.0) as u64;
            let censored = spec.censor_threshold.is_some_and(|c| draw < c);
            let deaths = if censored { 0 } else { draw };
            let age_adjusted_rate = Some(draw as f64 / pop * 1e5 * (-GAMMA_AGE65 * (shares[4] - 16.0)).exp());
            let row = PanelRow {
                zip: format!("9{:04}", z),
                year: spec.first_year + t as i32,
                deaths,
                censored,
                population: *pop,
                median_income: *income,
                age_shares: *shares,
                groundwater: zd.groundwater,
                age_adjusted_rate,
            };
            (row, mu)
        })
        .collect();
    let (rows, expected): (Vec<PanelRow>, Vec<f64>) = rows_expected.into_iter().unzip();
    let analytes = columns
        .into_iter()
        .enumerate()
        .map(|(k, v)| AnalyteColumn::new(SynthSpec::analyte_name(k), CLASSES[k % CLASSES.len()], v))
        .collect();
    let panel = ZipYearPanel::new(rows, analytes)?;
    let truth = SynthTruth {
        beta: (0..na).map(|k| SynthSpec::coef(&spec.beta, k)).collect(),
        quartile_effects: (0..na).map(|k| SynthSpec::coef(&spec.quartile_effects, k)).collect(),
        gamma: vec![
            ("median_income".into(), GAMMA_INCOME),
            (format!("pct_{}", AGE_BANDS[4]), GAMMA_AGE65),
        ],
        alpha: zips.iter().map(|z| z.alpha).collect(),
        delta,
        expected,
        standardization,
    };
    Ok((panel, truth))
}

/// Writes the raw input files consumed by [`crate::ingest`]: one water
/// system per zip with weight 1, plus class and mixture definitions.
pub fn write_ingest_inputs(panel: &ZipYearPanel, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    let pws = |zip: &str| format!("CA{zip}");
    let mut samples = TableWriter::create(&dir.join("samples.csv"), &["pws_id", "analyte", "year", "value"])?;
    for (i, r) in panel.rows().iter().enumerate() {
        for a in panel.analytes() {
            if let Some(v) = a.values[i] {
                samples.row([pws(&r.zip), a.name.clone(), r.year.to_string(), fmt_f64(v)])?;
            }
        }
    }
    samples.finish()?;

    let mut lods = TableWriter::create(&dir.join("lods.csv"), &["analyte", "lod"])?;
    let mut classes = TableWriter::create(&dir.join("analyte_classes.csv"), &["analyte", "class"])?;
    for a in panel.analytes() {
        let min = a.observed().fold(f64::INFINITY, f64::min);
        lods.row([a.name.clone(), fmt_f64(if min.is_finite() { min / 2.0 } else { 1e-3 })])?;
        classes.row([a.name.clone(), a.class.clone()])?;
    }
    lods.finish()?;
    classes.finish()?;

    let mut cw = TableWriter::create(&dir.join("crosswalk.csv"), &["pws_id", "zip", "weight"])?;
    let mut src = TableWriter::create(&dir.join("sources.csv"), &["pws_id", "source_code"])?;
    let mut seen = std::collections::BTreeSet::new();
    for r in panel.rows() {
        if seen.insert(r.zip.clone()) {
            cw.row([pws(&r.zip), r.zip.clone(), "1".to_string()])?;
            src.row([pws(&r.zip), if r.groundwater { "GW" } else { "SW" }.to_string()])?;
        }
    }
    cw.finish()?;
    src.finish()?;

    let mut header = vec!["zip", "year", "population", "median_income"];
    header.extend(AGE_BANDS);
    let mut demo = TableWriter::create(&dir.join("demographics.csv"), &header)?;
    let mut deaths = TableWriter::create(&dir.join("deaths.csv"), &["zip", "year", "deaths", "censored", "age_adjusted_rate"])?;
    for r in panel.rows() {
        let mut cells = vec![r.zip.clone(), r.year.to_string(), fmt_f64(r.population), fmt_f64(r.median_income)];
        cells.extend(r.age_shares.iter().map(|s| fmt_f64(s * r.population / 100.0)));
        demo.row(cells)?;
        deaths.row([
            r.zip.clone(),
            r.year.to_string(),
            r.deaths.to_string(),
            u8::from(r.censored).to_string(),
            crate::table::fmt_opt(r.age_adjusted_rate),
        ])?;
    }
    demo.finish()?;
    deaths.finish()?;

    let names = panel.analyte_names();
    let mixtures: Vec<MixtureSpec> = names
        .chunks(4)
        .take(2)
        .enumerate()
        .map(|(k, c)| MixtureSpec::new(&format!("block_{}", k + 1), c))
        .collect();
    write_mixtures_json(&mixtures, &dir.join("mixtures.json"))
}

/// Dense reference fit.
#[derive(Debug, Clone)]
pub struct OracleFit {
    pub coef: Vec<f64>,
    pub vcov: Option<DMatrix<f64>>,
    pub hessian_inverse: DMatrix<f64>,
    pub fitted: Vec<f64>,
    pub deviance: f64,
    pub iterations: usize,
}

/// Newton–Raphson on the Poisson log-likelihood with an explicit design
/// (fixed effects as dummy columns), plus the explicit cluster sandwich.
pub fn oracle_fit_dense(y: &[f64], x: &DMatrix<f64>, offset: &[f64], clusters: Option<&[usize]>) -> Result<OracleFit> {
    let (n, p) = x.shape();
    if y.len() != n || offset.len() != n {
        return Err(Error::InvalidInput("oracle inputs have inconsistent lengths".into()));
    }
    if p > 2000 {
        return Err(Error::InvalidInput(format!("oracle limited to 2000 parameters, got {p}")));
    }
    let hessian = |mu: &[f64]| -> DMatrix<f64> {
        let mut h = DMatrix::zeros(p, p);
        for i in 0..n {
            let r = x.row(i);
            h.ger(mu[i], &r.transpose(), &r.transpose(), 1.0);
        }
        h
    };
    let check = |h: &DMatrix<f64>| -> Result<DMatrix<f64>> {
        let d: Vec<f64> = (0..p).map(|j| h[(j, j)].max(f64::MIN_POSITIVE).sqrt().recip()).collect();
        let scaled = DMatrix::from_fn(p, p, |a, b| h[(a, b)] * d[a] * d[b]);
        let ev = SymmetricEigen::new(scaled.clone()).eigenvalues;
        let (mn, mx) = ev.iter().fold((f64::INFINITY, 0.0f64), |(a, b), v| (a.min(*v), b.max(*v)));
        if !(mn > 1e-10 * mx) {
            return Err(Error::Singular("dense information matrix is singular".into()));
        }
        let inv = scaled.try_inverse().ok_or_else(|| Error::Singular("dense information matrix is singular".into()))?;
        Ok(DMatrix::from_fn(p, p, |a, b| inv[(a, b)] * d[a] * d[b]))
    };

    // one weighted least-squares step from μ = y + 0.5, then Newton
    let mu0: Vec<f64> = y.iter().map(|v| v + 0.5).collect();
    let h0 = check(&hessian(&mu0))?;
    let rhs = DVector::from_iterator(
        p,
        (0..p).map(|j| (0..n).map(|i| x[(i, j)] * mu0[i] * (mu0[i].ln() - offset[i] + (y[i] - mu0[i]) / mu0[i])).sum()),
    );
    let mut beta = h0 * rhs;
    let eta_of = |b: &DVector<f64>| -> Vec<f64> { (x * b).iter().zip(offset).map(|(e, o)| e + o).collect() };
    let mut mu: Vec<f64> = eta_of(&beta).iter().map(|e| e.exp()).collect();
    let mut dev = poisson_deviance(y, &mu, None);
    let mut iterations = 0;
    for it in 1..=200 {
        iterations = it;
        let hinv = check(&hessian(&mu))?;
        let grad = DVector::from_iterator(p, (0..p).map(|j| (0..n).map(|i| x[(i, j)] * (y[i] - mu[i])).sum()));
        let step = &hinv * grad;
        let mut t = 1.0;
        loop {
            let cand = &beta + &step * t;
            let m: Vec<f64> = eta_of(&cand).iter().map(|e| e.exp()).collect();
            let d = poisson_deviance(y, &m, None);
            if (d.is_finite() && d <= dev + 1e-12 * dev.abs().max(1.0)) || t < 1e-8 {
                beta = cand;
                mu = m;
                dev = d;
                break;
            }
            t *= 0.5;
        }
        if step.amax() * t < 1e-12 * beta.amax().max(1.0) {
            break;
        }
    }
    let hinv = check(&hessian(&mu))?;
    let vcov = match clusters {
        Some(c) => {
            if c.len() != n {
                return Err(Error::InvalidInput("cluster ids must match rows".into()));
            }
            let f = Factor::from_codes(c.to_vec());
            let mut s = DMatrix::<f64>::zeros(f.n_levels(), p);
            for i in 0..n {
                for j in 0..p {
                    s[(f.codes()[i], j)] += x[(i, j)] * (y[i] - mu[i]);
                }
            }
            Some(&hinv * (s.transpose() * s) * &hinv)
        }
        None => None,
    };
    Ok(OracleFit {
        coef: beta.iter().copied().collect(),
        vcov,
        hessian_inverse: hinv,
        fitted: mu,
        deviance: dev,
        iterations,
    })
}

/// Dense design `[X | zip dummies | year dummies (first dropped)]` for the oracle.
pub fn dummy_design(x: &DMatrix<f64>, factors: &[Factor]) -> DMatrix<f64> {
    let n = x.nrows();
    let mut widths = Vec::new();
    for (k, f) in factors.iter().enumerate() {
        widths.push(if k == 0 { f.n_levels() } else { f.n_levels() - 1 });
    }
    let total = x.ncols() + widths.iter().sum::<usize>();
    let mut d = DMatrix::zeros(n, total);
    d.columns_mut(0, x.ncols()).copy_from(x);
    let mut off = x.ncols();
    for (k, f) in factors.iter().enumerate() {
        for (i, &c) in f.codes().iter().enumerate() {
            if k == 0 {
                d[(i, off + c)] = 1.0;
            } else if c > 0 {
                d[(i, off + c - 1)] = 1.0;
            }
        }
        off += widths[k];
    }
    d
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_panel() {
        let spec = SynthSpec {
            n_zips: 12,
            n_years: 5,
            seed: 9,
            ..Default::default()
        };
        let (a, ta) = generate_panel(&spec).unwrap();
        let (b, tb) = generate_panel(&spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(ta, tb);
        let (c, _) = generate_panel(&SynthSpec { seed: 10, ..spec }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn draws_do_not_depend_on_panel_size() {
        let small = SynthSpec {
            n_zips: 5,
            n_years: 3,
            n_analytes: 3,
            missing_rate: 0.0,
            seed: 4,
            ..Default::default()
        };
        let big = SynthSpec { n_zips: 9, ..small.clone() };
        let (a, _) = generate_panel(&small).unwrap();
        let (b, _) = generate_panel(&big).unwrap();
        assert_eq!(a.rows()[..15], b.rows()[..15]);
    }

    #[test]
    fn censoring_only_touches_small_counts() {
        let spec = SynthSpec {
            n_zips: 20,
            n_years: 4,
            n_analytes: 2,
            population_range: (100.0, 3000.0),
            seed: 1,
            ..Default::default()
        };
        let (plain, _) = generate_panel(&spec).unwrap();
        let (cens, _) = generate_panel(&SynthSpec {
            censor_threshold: Some(11),
            ..spec
        })
        .unwrap();
        let mut n_cens = 0;
        for (a, b) in plain.rows().iter().zip(cens.rows()) {
            if a.deaths >= 11 {
                assert_eq!(a, b);
            } else {
                assert!(b.censored && b.deaths == 0);
                n_cens += 1;
            }
        }
        assert!(n_cens > 0);
    }

    #[test]
    fn mean_count_matches_expectation() {
        let mut total = 0.0;
        let reps = 400;
        let mut expected = 0.0;
        for seed in 0..reps {
            let spec = SynthSpec {
                n_zips: 1,
                n_years: 1,
                n_analytes: 1,
                missing_rate: 0.0,
                population_range: (5000.0, 5000.0),
                zip_fe_sd: 0.0,
                year_fe_sd: 0.0,
                seed,
                ..Default::default()
            };
            let (p, t) = generate_panel(&spec).unwrap();
            total += p.rows()[0].deaths as f64;
            expected += t.expected[0];
        }
        // 400 draws of a Poisson with mean ≈ 35: relative MC error ≈ 0.8%
        assert!((total / expected - 1.0).abs() < 0.04);
    }

    #[test]
    fn oracle_intercept_only() {
        let x = DMatrix::from_element(3, 1, 1.0);
        let f = oracle_fit_dense(&[1.0, 2.0, 3.0], &x, &[0.0; 3], None).unwrap();
        assert!((f.coef[0] - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn oracle_rejects_collinear_dummies() {
        let x = DMatrix::from_row_slice(4, 3, &[1.0, 1.0, 0.0, 1.0, 1.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0, 1.0]);
        assert!(matches!(
            oracle_fit_dense(&[1.0, 2.0, 3.0, 4.0], &x, &[0.0; 4], None),
            Err(Error::Singular(_))
        ));
    }
}
