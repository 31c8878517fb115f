//! Raw input parsing, non-detect imputation and aggregation of PWS samples
//! to zip-code × year concentrations.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panel::{AnalyteColumn, PanelRow, ZipYearPanel, UNCLASSIFIED};
use crate::table;

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub pws_id: String,
    pub analyte: String,
    pub year: i32,
    pub value: f64,
}

/// Limit of detection per analyte.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LodTable(pub HashMap<String, f64>);

impl LodTable {
    pub fn get(&self, analyte: &str) -> Option<f64> {
        self.0.get(analyte).copied()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrosswalkEntry {
    pub pws_id: String,
    pub zip: String,
    /// Fraction of the PWS service area falling in the zip code.
    pub weight: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Crosswalk {
    entries: Vec<CrosswalkEntry>,
}

impl Crosswalk {
    pub fn new(entries: Vec<CrosswalkEntry>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        let mut totals: BTreeMap<&str, f64> = BTreeMap::new();
        for e in &entries {
            if !(0.0..=1.0).contains(&e.weight) {
                return Err(Error::InvalidInput(format!(
                    "crosswalk weight {} for ({}, {}) outside [0, 1]",
                    e.weight, e.pws_id, e.zip
                )));
            }
            if !seen.insert((e.pws_id.as_str(), e.zip.as_str())) {
                return Err(Error::InvalidInput(format!(
                    "duplicate crosswalk pair ({}, {})",
                    e.pws_id, e.zip
                )));
            }
            *totals.entry(&e.pws_id).or_default() += e.weight;
        }
        if let Some((pws, total)) = totals.iter().find(|(_, &t)| t > 1.0 + 1e-9) {
            return Err(Error::InvalidInput(format!(
                "crosswalk weights for PWS {pws} sum to {total} > 1"
            )));
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[CrosswalkEntry] {
        &self.entries
    }

    fn by_pws(&self) -> HashMap<&str, Vec<(&str, f64)>> {
        let mut map: HashMap<&str, Vec<(&str, f64)>> = HashMap::new();
        for e in &self.entries {
            map.entry(&e.pws_id).or_default().push((&e.zip, e.weight));
        }
        map
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DemographicsRow {
    pub zip: String,
    pub year: i32,
    pub population: f64,
    pub median_income: f64,
    /// Counts for <5, 5–14, 15–24, 25–64 and ≥65.
    pub age_counts: [f64; 5],
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeathsRow {
    pub zip: String,
    pub year: i32,
    pub deaths: u64,
    pub censored: bool,
    pub age_adjusted_rate: Option<f64>,
}

/// Primary water source category of a public water system.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SourceCode {
    /// Ground water.
    Gw,
    /// Purchased ground water.
    Gwp,
    /// Ground water under the influence of surface water.
    Gu,
    Sw,
    Swp,
    /// Private / not classified.
    Na,
}

impl SourceCode {
    pub fn is_groundwater(self) -> bool {
        matches!(self, SourceCode::Gw | SourceCode::Gwp)
    }
}

impl FromStr for SourceCode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "GW" => Ok(SourceCode::Gw),
            "GWP" => Ok(SourceCode::Gwp),
            "GU" => Ok(SourceCode::Gu),
            "SW" => Ok(SourceCode::Sw),
            "SWP" => Ok(SourceCode::Swp),
            "NA" => Ok(SourceCode::Na),
            _ => Err(Error::UnknownSourceCode(s.to_string())),
        }
    }
}

impl fmt::Display for SourceCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SourceCode::Gw => "GW",
            SourceCode::Gwp => "GWP",
            SourceCode::Gu => "GU",
            SourceCode::Sw => "SW",
            SourceCode::Swp => "SWP",
            SourceCode::Na => "NA",
        })
    }
}

pub type SourceTable = HashMap<String, SourceCode>;

/// Replaces a non-detect (recorded as exactly zero) with `lod / √2`.
pub fn impute_lod(value: f64, lod: f64) -> f64 {
    if value == 0.0 {
        lod / std::f64::consts::SQRT_2
    } else {
        value
    }
}

/// [`impute_lod`] with the LOD looked up by analyte.
pub fn impute_sample(value: f64, analyte: &str, lods: &LodTable) -> Result<f64> {
    if value != 0.0 {
        return Ok(value);
    }
    lods.get(analyte)
        .map(|lod| impute_lod(value, lod))
        .ok_or_else(|| Error::MissingLod {
            analyte: analyte.to_string(),
        })
}

/// Lower weighted median: the smallest value whose cumulative normalized
/// weight reaches one half.
pub fn weighted_median(values: &[f64], weights: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::InvalidInput("weighted median of an empty list".into()));
    }
    if values.len() != weights.len() {
        return Err(Error::InvalidInput(format!(
            "weighted median: {} values but {} weights",
            values.len(),
            weights.len()
        )));
    }
    if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
        return Err(Error::InvalidInput("weighted median: negative or non-finite weight".into()));
    }
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(Error::InvalidInput("weighted median: weights sum to zero".into()));
    }
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut cum = 0.0;
    for &i in &order {
        cum += weights[i];
        // 0.5 * total rather than normalizing each weight keeps exact ties exact.
        if cum >= 0.5 * total {
            return Ok(values[i]);
        }
    }
    Ok(values[*order.last().unwrap()])
}

/// True iff any of the systems serving a zip draws ground water.
pub fn classify_groundwater(sources: &[SourceCode]) -> Result<bool> {
    if sources.is_empty() {
        return Err(Error::InvalidInput("no water source codes to classify".into()));
    }
    Ok(sources.iter().any(|s| s.is_groundwater()))
}

/// Parses codes and classifies them; unknown codes are an error.
pub fn classify_groundwater_codes<S: AsRef<str>>(codes: &[S]) -> Result<bool> {
    let parsed = codes
        .iter()
        .map(|c| c.as_ref().parse())
        .collect::<Result<Vec<SourceCode>>>()?;
    classify_groundwater(&parsed)
}

/// Percent of the population in each age band; `None` when the population is zero.
pub fn age_shares(age_counts: &[f64; 5], population: f64) -> Option<[f64; 5]> {
    if !(population > 0.0) {
        return None;
    }
    Some(age_counts.map(|c| c / population * 100.0))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BuildConfig {
    pub first_year: i32,
    pub last_year: i32,
    /// Drop censored death rows instead of keeping them as zeros.
    pub drop_censored: bool,
}

impl Default for BuildConfig {
    fn default() -> Self {
        Self {
            first_year: 2012,
            last_year: 2022,
            drop_censored: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExcludedRow {
    pub zip: String,
    pub year: i32,
    pub reason: String,
}

/// Diagnostics collected while aggregating the panel.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct BuildReport {
    pub n_rows: usize,
    pub n_analytes: usize,
    pub samples_used: usize,
    pub samples_outside_window: usize,
    pub excluded_rows: Vec<ExcludedRow>,
    /// Rows whose age counts exceed the population by at most 2%.
    pub age_count_excess_flagged: Vec<ExcludedRow>,
    /// PWS ids that have samples but no crosswalk entry.
    pub unmapped_pws: Vec<String>,
    /// Zips with no source code for any mapped PWS (classified as non-groundwater).
    pub zips_without_source: Vec<String>,
    pub censored_rows_kept: usize,
}

/// Raw inputs, parsed.
#[derive(Debug, Clone, Default)]
pub struct RawInputs {
    pub samples: Vec<SampleRecord>,
    pub lods: LodTable,
    pub crosswalk: Crosswalk,
    pub sources: SourceTable,
    pub demographics: Vec<DemographicsRow>,
    pub deaths: Vec<DeathsRow>,
    pub classes: BTreeMap<String, String>,
}

/// Paths of the input files; `classes` is optional.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InputPaths {
    pub samples: PathBuf,
    pub lods: PathBuf,
    pub crosswalk: PathBuf,
    pub sources: PathBuf,
    pub demographics: PathBuf,
    pub deaths: PathBuf,
    pub classes: Option<PathBuf>,
}

impl InputPaths {
    /// Conventional file names inside one directory.
    pub fn in_dir(dir: &Path) -> Self {
        let classes = dir.join("analyte_classes.csv");
        Self {
            samples: dir.join("samples.csv"),
            lods: dir.join("lods.csv"),
            crosswalk: dir.join("crosswalk.csv"),
            sources: dir.join("sources.csv"),
            demographics: dir.join("demographics.csv"),
            deaths: dir.join("deaths.csv"),
            classes: classes.exists().then_some(classes),
        }
    }
}

impl RawInputs {
    pub fn read(paths: &InputPaths) -> Result<Self> {
        Ok(Self {
            samples: read_samples(&paths.samples)?,
            lods: read_lods(&paths.lods)?,
            crosswalk: read_crosswalk(&paths.crosswalk)?,
            sources: read_sources(&paths.sources)?,
            demographics: read_demographics(&paths.demographics)?,
            deaths: read_deaths(&paths.deaths)?,
            classes: match &paths.classes {
                Some(p) => read_analyte_classes(p)?,
                None => BTreeMap::new(),
            },
        })
    }
}

struct Records {
    path: PathBuf,
    rdr: csv::Reader<std::fs::File>,
    req: Vec<usize>,
    opt: Vec<Option<usize>>,
}

impl Records {
    fn open(path: &Path, required: &[&str], optional: &[&str]) -> Result<Self> {
        let mut rdr = table::open_csv(path)?;
        let headers = rdr
            .headers()
            .map_err(|source| Error::Csv {
                path: path.to_path_buf(),
                source,
            })?
            .clone();
        let (req, opt) = table::column_index(path, &headers, required, optional)?;
        Ok(Self {
            path: path.to_path_buf(),
            rdr,
            req,
            opt,
        })
    }

    fn for_each(mut self, mut f: impl FnMut(&Row<'_>) -> Result<()>) -> Result<()> {
        for (i, rec) in self.rdr.records().enumerate() {
            let rec = rec.map_err(|source| Error::Csv {
                path: self.path.clone(),
                source,
            })?;
            f(&Row {
                rec: &rec,
                path: &self.path,
                line: i + 1,
                req: &self.req,
                opt: &self.opt,
            })?;
        }
        Ok(())
    }
}

struct Row<'a> {
    rec: &'a csv::StringRecord,
    path: &'a Path,
    line: usize,
    req: &'a [usize],
    opt: &'a [Option<usize>],
}

impl Row<'_> {
    fn str(&self, j: usize) -> &str {
        &self.rec[self.req[j]]
    }

    fn parse<T: FromStr>(&self, j: usize, what: &str) -> Result<T>
    where
        T::Err: fmt::Display,
    {
        self.str(j)
            .parse()
            .map_err(|e| self.err(format!("{what}: `{}`: {e}", self.str(j))))
    }

    fn non_negative(&self, j: usize, what: &str) -> Result<f64> {
        let v: f64 = self.parse(j, what)?;
        if !(v >= 0.0) || !v.is_finite() {
            return Err(self.err(format!("{what} must be a non-negative number, got {v}")));
        }
        Ok(v)
    }

    fn optional_f64(&self, k: usize) -> Result<Option<f64>> {
        match self.opt[k] {
            Some(j) => table::parse_opt_f64(&self.rec[j]).map_err(|m| self.err(m)),
            None => Ok(None),
        }
    }

    fn err(&self, message: String) -> Error {
        Error::parse(self.path, self.line, message)
    }
}

pub fn read_samples(path: &Path) -> Result<Vec<SampleRecord>> {
    let mut out = Vec::new();
    Records::open(path, &["pws_id", "analyte", "year", "value"], &[])?.for_each(|r| {
        out.push(SampleRecord {
            pws_id: r.str(0).to_string(),
            analyte: r.str(1).to_string(),
            year: r.parse(2, "year")?,
            value: r.non_negative(3, "value")?,
        });
        Ok(())
    })?;
    Ok(out)
}

pub fn read_lods(path: &Path) -> Result<LodTable> {
    let mut map = HashMap::new();
    Records::open(path, &["analyte", "lod"], &[])?.for_each(|r| {
        let lod: f64 = r.parse(1, "lod")?;
        if !(lod > 0.0) || !lod.is_finite() {
            return Err(r.err(format!("lod must be strictly positive, got {lod}")));
        }
        if map.insert(r.str(0).to_string(), lod).is_some() {
            return Err(r.err(format!("duplicate LOD for `{}`", r.str(0))));
        }
        Ok(())
    })?;
    Ok(LodTable(map))
}

pub fn read_crosswalk(path: &Path) -> Result<Crosswalk> {
    let mut entries = Vec::new();
    Records::open(path, &["pws_id", "zip", "weight"], &[])?.for_each(|r| {
        entries.push(CrosswalkEntry {
            pws_id: r.str(0).to_string(),
            zip: r.str(1).to_string(),
            weight: r.parse(2, "weight")?,
        });
        Ok(())
    })?;
    Crosswalk::new(entries)
}

pub fn read_sources(path: &Path) -> Result<SourceTable> {
    let mut map = HashMap::new();
    Records::open(path, &["pws_id", "source_code"], &[])?.for_each(|r| {
        let code: SourceCode = r.str(1).parse().map_err(|e: Error| r.err(e.to_string()))?;
        map.insert(r.str(0).to_string(), code);
        Ok(())
    })?;
    Ok(map)
}

pub fn read_demographics(path: &Path) -> Result<Vec<DemographicsRow>> {
    let mut out = Vec::new();
    let cols = [
        "zip",
        "year",
        "population",
        "median_income",
        "age_u5",
        "age_5_14",
        "age_15_24",
        "age_25_64",
        "age_65p",
    ];
    Records::open(path, &cols, &[])?.for_each(|r| {
        let mut age_counts = [0.0; 5];
        for (k, c) in age_counts.iter_mut().enumerate() {
            *c = r.non_negative(4 + k, cols[4 + k])?;
        }
        out.push(DemographicsRow {
            zip: r.str(0).to_string(),
            year: r.parse(1, "year")?,
            population: r.non_negative(2, "population")?,
            median_income: r.parse(3, "median_income")?,
            age_counts,
        });
        Ok(())
    })?;
    Ok(out)
}

pub fn read_deaths(path: &Path) -> Result<Vec<DeathsRow>> {
    let mut out = Vec::new();
    Records::open(path, &["zip", "year", "deaths", "censored"], &["age_adjusted_rate"])?.for_each(|r| {
        let deaths: u64 = r.parse(2, "deaths")?;
        let censored = match r.str(3) {
            "0" => false,
            "1" => true,
            other => return Err(r.err(format!("censored must be 0 or 1, got `{other}`"))),
        };
        if censored && deaths != 0 {
            return Err(r.err(format!("censored row carries {deaths} deaths")));
        }
        out.push(DeathsRow {
            zip: r.str(0).to_string(),
            year: r.parse(1, "year")?,
            deaths,
            censored,
            age_adjusted_rate: r.optional_f64(0)?,
        });
        Ok(())
    })?;
    Ok(out)
}

pub fn read_analyte_classes(path: &Path) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    Records::open(path, &["analyte", "class"], &[])?.for_each(|r| {
        map.insert(r.str(0).to_string(), r.str(1).to_string());
        Ok(())
    })?;
    Ok(map)
}

/// Admissible excess of summed age counts over the population before a row is rejected.
const AGE_EXCESS_TOLERANCE: f64 = 0.02;

/// Aggregates raw inputs into the zip-year panel.
///
/// Each (PWS, analyte, year) group of `k` samples contributes every sample to
/// each zip the PWS overlaps with weight `area_fraction / k`; the zip-year
/// concentration is the lower weighted median of those contributions.
pub fn build_panel(inputs: &RawInputs, config: &BuildConfig) -> Result<(ZipYearPanel, BuildReport)> {
    let mut report = BuildReport::default();
    let in_window = |y: i32| (config.first_year..=config.last_year).contains(&y);

    let deaths: BTreeMap<(&str, i32), &DeathsRow> = inputs
        .deaths
        .iter()
        .filter(|d| in_window(d.year))
        .map(|d| ((d.zip.as_str(), d.year), d))
        .collect();

    let mut keys: Vec<(String, i32)> = Vec::new();
    let mut rows = Vec::new();
    let mut demo_sorted: Vec<&DemographicsRow> = inputs.demographics.iter().filter(|d| in_window(d.year)).collect();
    demo_sorted.sort_by(|a, b| (&a.zip, a.year).cmp(&(&b.zip, b.year)));
    demo_sorted.dedup_by(|a, b| a.zip == b.zip && a.year == b.year);

    let crosswalk = inputs.crosswalk.by_pws();
    let mut zip_sources: BTreeMap<&str, Vec<SourceCode>> = BTreeMap::new();
    for e in inputs.crosswalk.entries() {
        let list = zip_sources.entry(&e.zip).or_default();
        if let Some(&code) = inputs.sources.get(&e.pws_id) {
            list.push(code);
        }
    }

    for d in demo_sorted {
        let Some(death) = deaths.get(&(d.zip.as_str(), d.year)) else {
            continue;
        };
        let exclude = |reason: &str| ExcludedRow {
            zip: d.zip.clone(),
            year: d.year,
            reason: reason.to_string(),
        };
        let Some(shares) = age_shares(&d.age_counts, d.population) else {
            report.excluded_rows.push(exclude("population is zero"));
            continue;
        };
        let age_total: f64 = d.age_counts.iter().sum();
        if age_total > d.population * (1.0 + AGE_EXCESS_TOLERANCE) {
            report.excluded_rows.push(exclude("age counts exceed population by more than 2%"));
            continue;
        }
        if age_total > d.population {
            report.age_count_excess_flagged.push(exclude("age counts exceed population"));
        }
        if death.censored {
            if config.drop_censored {
                report.excluded_rows.push(exclude("censored deaths"));
                continue;
            }
            report.censored_rows_kept += 1;
        }
        let groundwater = match zip_sources.get(d.zip.as_str()) {
            Some(codes) if !codes.is_empty() => classify_groundwater(codes)?,
            _ => {
                if report.zips_without_source.last() != Some(&d.zip) {
                    report.zips_without_source.push(d.zip.clone());
                }
                false
            }
        };
        keys.push((d.zip.clone(), d.year));
        rows.push(PanelRow {
            zip: d.zip.clone(),
            year: d.year,
            deaths: death.deaths,
            censored: death.censored,
            population: d.population,
            median_income: d.median_income,
            age_shares: shares,
            groundwater,
            age_adjusted_rate: death.age_adjusted_rate,
        });
    }
    report.zips_without_source.dedup();

    // (pws, analyte, year) -> imputed sample values
    let mut groups: BTreeMap<(&str, &str, i32), Vec<f64>> = BTreeMap::new();
    let mut unmapped = BTreeSet::new();
    let mut analytes = BTreeSet::new();
    for s in &inputs.samples {
        if !in_window(s.year) {
            report.samples_outside_window += 1;
            continue;
        }
        analytes.insert(s.analyte.as_str());
        if !crosswalk.contains_key(s.pws_id.as_str()) {
            unmapped.insert(s.pws_id.clone());
            continue;
        }
        let v = impute_sample(s.value, &s.analyte, &inputs.lods)?;
        groups.entry((&s.pws_id, &s.analyte, s.year)).or_default().push(v);
        report.samples_used += 1;
    }
    report.unmapped_pws = unmapped.into_iter().collect();

    // (zip, year, analyte) -> (values, weights)
    let mut buckets: BTreeMap<(&str, i32, &str), (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for ((pws, analyte, year), values) in &groups {
        let share = 1.0 / values.len() as f64;
        for &(zip, w) in &crosswalk[pws] {
            if w <= 0.0 {
                continue;
            }
            let b = buckets.entry((zip, *year, analyte)).or_default();
            b.0.extend_from_slice(values);
            b.1.extend(std::iter::repeat_n(w * share, values.len()));
        }
    }
    let medians: HashMap<(&str, i32, &str), f64> = buckets
        .par_iter()
        .map(|(k, (v, w))| weighted_median(v, w).map(|m| (*k, m)))
        .collect::<Result<_>>()?;

    let columns: Vec<AnalyteColumn> = analytes
        .iter()
        .map(|&name| {
            let values = keys
                .iter()
                .map(|(zip, year)| medians.get(&(zip.as_str(), *year, name)).copied())
                .collect();
            let class = inputs
                .classes
                .get(name)
                .cloned()
                .unwrap_or_else(|| UNCLASSIFIED.to_string());
            AnalyteColumn::new(name, class, values)
        })
        .collect();

    for pws in &report.unmapped_pws {
        log::warn!("PWS {pws} has samples but no crosswalk entry; excluded");
    }
    report.n_rows = rows.len();
    report.n_analytes = columns.len();
    let panel = ZipYearPanel::new(rows, columns)?;
    Ok((panel, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn impute_lod_examples() {
        assert!((impute_lod(0.0, 0.5) - 0.353_553_390_593_273_8).abs() < 1e-15);
        assert_eq!(impute_lod(2.0, 0.5), 2.0);
        assert!((impute_lod(0.0, 1.0) - 0.707_106_781_186_547_5).abs() < 1e-15);
    }

    #[test]
    fn impute_lod_idempotent() {
        for lod in [1e-6, 0.3, 7.0] {
            let once = impute_lod(0.0, lod);
            assert_eq!(impute_lod(once, lod), once);
        }
    }

    #[test]
    fn missing_lod_names_analyte() {
        let err = impute_sample(0.0, "Arsenic", &LodTable::default()).unwrap_err();
        assert!(err.to_string().contains("Arsenic"));
        assert_eq!(impute_sample(1.5, "Arsenic", &LodTable::default()).unwrap(), 1.5);
    }

    #[test]
    fn weighted_median_examples() {
        assert_eq!(weighted_median(&[5.0], &[1.0]).unwrap(), 5.0);
        assert_eq!(weighted_median(&[1.0, 2.0, 3.0], &[0.2, 0.3, 0.5]).unwrap(), 2.0);
        assert_eq!(weighted_median(&[1.0, 2.0, 3.0, 4.0], &[0.25; 4]).unwrap(), 2.0);
        assert_eq!(weighted_median(&[3.0, 1.0, 2.0], &[0.5, 0.2, 0.3]).unwrap(), 2.0);
    }

    #[test]
    fn weighted_median_errors() {
        assert!(weighted_median(&[], &[]).is_err());
        assert!(weighted_median(&[1.0, 2.0], &[0.0, 0.0]).is_err());
        assert!(weighted_median(&[1.0], &[1.0, 2.0]).is_err());
        assert!(weighted_median(&[1.0], &[-1.0]).is_err());
    }

    #[test]
    fn groundwater_examples() {
        assert!(classify_groundwater_codes(&["GW", "SW"]).unwrap());
        assert!(!classify_groundwater_codes(&["SW", "SWP"]).unwrap());
        assert!(classify_groundwater_codes(&["GWP"]).unwrap());
        assert!(!classify_groundwater_codes(&["GU", "NA"]).unwrap());
        assert!(matches!(
            classify_groundwater_codes(&["XX"]),
            Err(Error::UnknownSourceCode(_))
        ));
        assert!(classify_groundwater(&[]).is_err());
    }

    #[test]
    fn age_share_examples() {
        assert_eq!(age_shares(&[10.0, 10.0, 10.0, 10.0, 60.0], 100.0).unwrap(), [10.0, 10.0, 10.0, 10.0, 60.0]);
        assert_eq!(age_shares(&[0.0, 0.0, 0.0, 0.0, 100.0], 100.0).unwrap(), [0.0, 0.0, 0.0, 0.0, 100.0]);
        assert_eq!(age_shares(&[25.0, 25.0, 25.0, 25.0, 100.0], 200.0).unwrap(), [12.5, 12.5, 12.5, 12.5, 50.0]);
        assert!(age_shares(&[1.0; 5], 0.0).is_none());
    }

    #[test]
    fn crosswalk_validation() {
        let e = |p: &str, z: &str, w: f64| CrosswalkEntry {
            pws_id: p.into(),
            zip: z.into(),
            weight: w,
        };
        assert!(Crosswalk::new(vec![e("p", "a", 0.6), e("p", "b", 0.4)]).is_ok());
        assert!(Crosswalk::new(vec![e("p", "a", 0.6), e("p", "b", 0.5)]).is_err());
        assert!(Crosswalk::new(vec![e("p", "a", 0.5), e("p", "a", 0.1)]).is_err());
        assert!(Crosswalk::new(vec![e("p", "a", 1.5)]).is_err());
    }

    fn tiny_inputs() -> RawInputs {
        let s = |pws: &str, a: &str, year, value| SampleRecord {
            pws_id: pws.into(),
            analyte: a.into(),
            year,
            value,
        };
        RawInputs {
            samples: vec![
                s("P1", "A", 2013, 2.0),
                s("P1", "A", 2013, 4.0),
                s("P1", "B", 2013, 0.0),
                s("P1", "A", 2014, 3.0),
                s("P9", "A", 2013, 1.0),
                s("P1", "A", 2030, 1.0),
            ],
            lods: LodTable([("B".to_string(), 1.0)].into_iter().collect()),
            crosswalk: Crosswalk::new(vec![CrosswalkEntry {
                pws_id: "P1".into(),
                zip: "Z1".into(),
                weight: 1.0,
            }])
            .unwrap(),
            sources: [("P1".to_string(), SourceCode::Gw)].into_iter().collect(),
            demographics: [2013, 2014]
                .into_iter()
                .map(|year| DemographicsRow {
                    zip: "Z1".into(),
                    year,
                    population: 100.0,
                    median_income: 40_000.0,
                    age_counts: [10.0, 10.0, 10.0, 10.0, 60.0],
                })
                .collect(),
            deaths: vec![
                DeathsRow {
                    zip: "Z1".into(),
                    year: 2013,
                    deaths: 0,
                    censored: true,
                    age_adjusted_rate: None,
                },
                DeathsRow {
                    zip: "Z1".into(),
                    year: 2014,
                    deaths: 12,
                    censored: false,
                    age_adjusted_rate: None,
                },
            ],
            classes: BTreeMap::new(),
        }
    }

    #[test]
    fn build_panel_small() {
        let (panel, report) = build_panel(&tiny_inputs(), &BuildConfig::default()).unwrap();
        assert_eq!(panel.n_rows(), 2);
        let a = panel.analyte("A").unwrap();
        // lower weighted median of {2, 4} with equal weights
        assert_eq!(a.values, vec![Some(2.0), Some(3.0)]);
        let b = panel.analyte("B").unwrap();
        assert_eq!(b.values[0], Some(1.0 / 2f64.sqrt()));
        assert_eq!(b.values[1], None);
        assert!(panel.rows().iter().all(|r| r.groundwater));
        assert!(panel.rows()[0].censored && panel.rows()[0].deaths == 0);
        assert_eq!(report.unmapped_pws, vec!["P9".to_string()]);
        assert_eq!(report.samples_outside_window, 1);
        assert_eq!(report.censored_rows_kept, 1);
    }

    #[test]
    fn build_panel_drop_censored() {
        let config = BuildConfig {
            drop_censored: true,
            ..Default::default()
        };
        let (panel, report) = build_panel(&tiny_inputs(), &config).unwrap();
        assert_eq!(panel.n_rows(), 1);
        assert_eq!(report.excluded_rows.len(), 1);
    }

    #[test]
    fn build_panel_missing_lod_is_error() {
        let mut inputs = tiny_inputs();
        inputs.lods = LodTable::default();
        assert!(matches!(
            build_panel(&inputs, &BuildConfig::default()),
            Err(Error::MissingLod { .. })
        ));
    }

    #[test]
    fn build_panel_is_deterministic() {
        let a = build_panel(&tiny_inputs(), &BuildConfig::default()).unwrap().0;
        let b = build_panel(&tiny_inputs(), &BuildConfig::default()).unwrap().0;
        assert_eq!(a, b);
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn weighted_median_scale_equivariant(
                pairs in prop::collection::vec((0.0f64..100.0, 0.01f64..5.0), 1..40),
                c in 0.01f64..100.0,
            ) {
                let (v, w): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
                let m = weighted_median(&v, &w).unwrap();
                let scaled: Vec<f64> = v.iter().map(|x| c * x).collect();
                prop_assert_eq!(weighted_median(&scaled, &w).unwrap(), c * m);
            }

            #[test]
            fn weighted_median_weight_rescaling(
                pairs in prop::collection::vec((0.0f64..100.0, 1u32..20), 1..40),
                k in 1u32..50,
            ) {
                // integer-valued weights keep the rescaled cumulative sums exact
                let (v, w): (Vec<f64>, Vec<f64>) = pairs.into_iter().map(|(x, w)| (x, w as f64)).unzip();
                let scaled: Vec<f64> = w.iter().map(|x| x * k as f64).collect();
                prop_assert_eq!(weighted_median(&v, &w).unwrap(), weighted_median(&v, &scaled).unwrap());
            }
        }
    }
}
