//! The zip-code × year analysis panel shared by every downstream stage.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::table::{self, fmt_f64, fmt_flag, fmt_opt, TableWriter};

/// Column names of the five age bands, youngest first.
pub const AGE_BANDS: [&str; 5] = ["age_u5", "age_5_14", "age_15_24", "age_25_64", "age_65p"];

/// Class assigned to analytes with no entry in the class table.
pub const UNCLASSIFIED: &str = "unclassified";

/// One (zip, year) observation: outcome, offset and adjustment covariates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelRow {
    pub zip: String,
    pub year: i32,
    pub deaths: u64,
    pub censored: bool,
    pub population: f64,
    pub median_income: f64,
    /// Percent of the population in each of [`AGE_BANDS`].
    pub age_shares: [f64; 5],
    pub groundwater: bool,
    /// Age-adjusted mortality per 100,000, when supplied.
    pub age_adjusted_rate: Option<f64>,
}

/// Mean and sample standard deviation used to z-score a column.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: f64,
    pub sd: f64,
}

impl Standardization {
    pub fn apply(&self, raw: f64) -> f64 {
        (raw - self.mean) / self.sd
    }

    pub fn invert(&self, z: f64) -> f64 {
        z * self.sd + self.mean
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnalyteColumn {
    pub name: String,
    pub class: String,
    /// One entry per panel row; `None` marks an unsampled analyte-year.
    pub values: Vec<Option<f64>>,
    /// Set once the column has been z-scored.
    pub standardization: Option<Standardization>,
}

impl AnalyteColumn {
    pub fn new(name: impl Into<String>, class: impl Into<String>, values: Vec<Option<f64>>) -> Self {
        Self {
            name: name.into(),
            class: class.into(),
            values,
            standardization: None,
        }
    }

    pub fn n_missing(&self) -> usize {
        self.values.iter().filter(|v| v.is_none()).count()
    }

    pub fn observed(&self) -> impl Iterator<Item = f64> + '_ {
        self.values.iter().filter_map(|v| *v)
    }
}

/// Rectangular panel with unique (zip, year) keys sorted by zip then year.
#[derive(Debug, Clone, PartialEq)]
pub struct ZipYearPanel {
    rows: Vec<PanelRow>,
    analytes: Vec<AnalyteColumn>,
}

impl ZipYearPanel {
    /// Builds a panel, sorting rows by (zip, year) and permuting analyte
    /// values to match.
    pub fn new(rows: Vec<PanelRow>, analytes: Vec<AnalyteColumn>) -> Result<Self> {
        let n = rows.len();
        for a in &analytes {
            if a.values.len() != n {
                return Err(Error::InvalidInput(format!(
                    "analyte `{}` has {} values for {n} panel rows",
                    a.name,
                    a.values.len()
                )));
            }
        }
        let mut names = HashSet::new();
        for a in &analytes {
            if !names.insert(a.name.as_str()) {
                return Err(Error::InvalidInput(format!("duplicate analyte `{}`", a.name)));
            }
        }
        for r in &rows {
            if !(r.population > 0.0) || !r.population.is_finite() {
                return Err(Error::InvalidInput(format!(
                    "zip {} year {} has non-positive population",
                    r.zip, r.year
                )));
            }
        }

        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| (&rows[a].zip, rows[a].year).cmp(&(&rows[b].zip, rows[b].year)));
        for w in order.windows(2) {
            let (a, b) = (&rows[w[0]], &rows[w[1]]);
            if a.zip == b.zip && a.year == b.year {
                return Err(Error::InvalidInput(format!(
                    "duplicate panel key zip {} year {}",
                    a.zip, a.year
                )));
            }
        }
        let sorted_rows = order.iter().map(|&i| rows[i].clone()).collect();
        let analytes = analytes
            .into_iter()
            .map(|mut a| {
                a.values = order.iter().map(|&i| a.values[i]).collect();
                a
            })
            .collect();
        Ok(Self {
            rows: sorted_rows,
            analytes,
        })
    }

    pub fn rows(&self) -> &[PanelRow] {
        &self.rows
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn analytes(&self) -> &[AnalyteColumn] {
        &self.analytes
    }

    pub fn analyte(&self, name: &str) -> Option<&AnalyteColumn> {
        self.analytes.iter().find(|a| a.name == name)
    }

    pub fn analyte_names(&self) -> Vec<&str> {
        self.analytes.iter().map(|a| a.name.as_str()).collect()
    }

    /// Same rows with a replacement set of analyte columns.
    pub fn with_analytes(&self, analytes: Vec<AnalyteColumn>) -> Result<Self> {
        Self::new(self.rows.clone(), analytes)
    }

    /// Same analytes with the rows passed through `f` (used for alternative outcomes).
    pub fn map_rows(&self, f: impl Fn(&PanelRow) -> PanelRow) -> Self {
        Self {
            rows: self.rows.iter().map(f).collect(),
            analytes: self.analytes.clone(),
        }
    }

    pub fn years(&self) -> Vec<i32> {
        let mut y: Vec<i32> = self.rows.iter().map(|r| r.year).collect();
        y.sort_unstable();
        y.dedup();
        y
    }

    pub fn zips(&self) -> Vec<&str> {
        let mut z: Vec<&str> = self.rows.iter().map(|r| r.zip.as_str()).collect();
        z.dedup();
        z
    }

    /// Writes `panel.csv` (rows plus one column per analyte) and the analyte
    /// class table next to it.
    pub fn write_csv(&self, panel_path: &Path, classes_path: &Path) -> Result<()> {
        let mut header: Vec<&str> = vec![
            "zip",
            "year",
            "deaths",
            "censored",
            "population",
            "median_income",
        ];
        header.extend(AGE_BANDS);
        header.extend(["groundwater", "age_adjusted_rate"]);
        header.extend(self.analytes.iter().map(|a| a.name.as_str()));
        let mut w = TableWriter::create(panel_path, &header)?;
        for (i, r) in self.rows.iter().enumerate() {
            let mut cells = vec![
                r.zip.clone(),
                r.year.to_string(),
                r.deaths.to_string(),
                fmt_flag(r.censored).to_string(),
                fmt_f64(r.population),
                fmt_f64(r.median_income),
            ];
            cells.extend(r.age_shares.iter().map(|&s| fmt_f64(s)));
            cells.push(fmt_flag(r.groundwater).to_string());
            cells.push(fmt_opt(r.age_adjusted_rate));
            cells.extend(self.analytes.iter().map(|a| fmt_opt(a.values[i])));
            w.row(cells)?;
        }
        w.finish()?;

        let mut w = TableWriter::create(classes_path, &["analyte", "class"])?;
        for a in &self.analytes {
            w.row([a.name.as_str(), a.class.as_str()])?;
        }
        w.finish()
    }

    /// Reads a panel written by [`ZipYearPanel::write_csv`]. Every column not
    /// part of the fixed row schema is taken to be an analyte.
    pub fn read_csv(panel_path: &Path, classes_path: Option<&Path>) -> Result<Self> {
        let classes = match classes_path {
            Some(p) if p.exists() => crate::ingest::read_analyte_classes(p)?,
            _ => Default::default(),
        };
        let mut rdr = table::open_csv(panel_path)?;
        let headers = rdr
            .headers()
            .map_err(|source| Error::Csv {
                path: panel_path.to_path_buf(),
                source,
            })?
            .clone();
        let mut fixed = vec![
            "zip",
            "year",
            "deaths",
            "censored",
            "population",
            "median_income",
        ];
        fixed.extend(AGE_BANDS);
        fixed.push("groundwater");
        let (idx, opt) = table::column_index(panel_path, &headers, &fixed, &["age_adjusted_rate"])?;
        let mut known: HashSet<usize> = idx.iter().copied().collect();
        known.extend(opt.iter().flatten());
        let analyte_cols: Vec<(usize, String)> = headers
            .iter()
            .enumerate()
            .filter(|(i, _)| !known.contains(i))
            .map(|(i, h)| (i, h.to_string()))
            .collect();

        let mut rows = Vec::new();
        let mut values: Vec<Vec<Option<f64>>> = vec![Vec::new(); analyte_cols.len()];
        for (rec_no, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|source| Error::Csv {
                path: panel_path.to_path_buf(),
                source,
            })?;
            let line = rec_no + 1;
            let num = |j: usize| -> Result<f64> {
                rec[idx[j]]
                    .parse::<f64>()
                    .map_err(|e| Error::parse(panel_path, line, format!("{}: {e}", fixed[j])))
            };
            let flag = |j: usize| -> Result<bool> {
                match &rec[idx[j]] {
                    "0" => Ok(false),
                    "1" => Ok(true),
                    other => Err(Error::parse(panel_path, line, format!("{}: expected 0/1, got `{other}`", fixed[j]))),
                }
            };
            let mut age_shares = [0.0; 5];
            for (k, s) in age_shares.iter_mut().enumerate() {
                *s = num(6 + k)?;
            }
            let age_adjusted_rate = match opt[0] {
                Some(j) => table::parse_opt_f64(&rec[j]).map_err(|m| Error::parse(panel_path, line, m))?,
                None => None,
            };
            rows.push(PanelRow {
                zip: rec[idx[0]].to_string(),
                year: rec[idx[1]]
                    .parse()
                    .map_err(|e| Error::parse(panel_path, line, format!("year: {e}")))?,
                deaths: rec[idx[2]]
                    .parse()
                    .map_err(|e| Error::parse(panel_path, line, format!("deaths: {e}")))?,
                censored: flag(3)?,
                population: num(4)?,
                median_income: num(5)?,
                age_shares,
                groundwater: flag(11)?,
                age_adjusted_rate,
            });
            for (k, (j, _)) in analyte_cols.iter().enumerate() {
                values[k].push(table::parse_opt_f64(&rec[*j]).map_err(|m| Error::parse(panel_path, line, m))?);
            }
        }
        let analytes = analyte_cols
            .into_iter()
            .zip(values)
            .map(|((_, name), v)| {
                let class = classes.get(&name).cloned().unwrap_or_else(|| UNCLASSIFIED.to_string());
                AnalyteColumn::new(name, class, v)
            })
            .collect();
        Self::new(rows, analytes)
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub fn row(zip: &str, year: i32, deaths: u64) -> PanelRow {
        PanelRow {
            zip: zip.into(),
            year,
            deaths,
            censored: false,
            population: 1000.0,
            median_income: 50_000.0,
            age_shares: [5.0, 10.0, 15.0, 50.0, 20.0],
            groundwater: false,
            age_adjusted_rate: None,
        }
    }

    #[test]
    fn rows_sorted_and_analytes_permuted() {
        let rows = vec![row("b", 2013, 1), row("a", 2014, 2), row("a", 2013, 3)];
        let a = AnalyteColumn::new("x", "c", vec![Some(1.0), Some(2.0), None]);
        let p = ZipYearPanel::new(rows, vec![a]).unwrap();
        let keys: Vec<_> = p.rows().iter().map(|r| (r.zip.as_str(), r.year)).collect();
        assert_eq!(keys, vec![("a", 2013), ("a", 2014), ("b", 2013)]);
        assert_eq!(p.analytes()[0].values, vec![None, Some(2.0), Some(1.0)]);
    }

    #[test]
    fn duplicate_keys_rejected() {
        let rows = vec![row("a", 2013, 1), row("a", 2013, 2)];
        assert!(ZipYearPanel::new(rows, vec![]).is_err());
    }

    #[test]
    fn csv_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mut r = row("90001", 2015, 17);
        r.age_adjusted_rate = Some(712.5);
        let p = ZipYearPanel::new(
            vec![r, row("90002", 2015, 0)],
            vec![AnalyteColumn::new("Lead", "metals", vec![Some(0.25), None])],
        )
        .unwrap();
        let (pp, cp) = (dir.path().join("panel.csv"), dir.path().join("classes.csv"));
        p.write_csv(&pp, &cp).unwrap();
        let back = ZipYearPanel::read_csv(&pp, Some(&cp)).unwrap();
        assert_eq!(back, p);
    }
}
