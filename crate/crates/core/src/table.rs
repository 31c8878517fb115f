//! Small helpers shared by every CSV writer and reader in the crate.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Missing-value marker used in every emitted table.
pub const NA: &str = "NA";

/// Formats a float with 10 significant digits, printed in the shortest form
/// that round-trips the rounded value. Non-finite values print as `NA`,
/// `inf` or `-inf`.
pub fn fmt_f64(x: f64) -> String {
    if x.is_nan() {
        return NA.to_string();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return "0".to_string();
    }
    let rounded: f64 = format!("{x:.9e}").parse().expect("formatted float parses");
    let mag = rounded.abs();
    if (1e-5..1e15).contains(&mag) {
        format!("{rounded}")
    } else {
        format!("{rounded:e}")
    }
}

pub fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(|| NA.to_string(), fmt_f64)
}

pub fn fmt_flag(b: bool) -> &'static str {
    if b {
        "1"
    } else {
        "0"
    }
}

/// Parses a numeric cell, treating empty cells and `NA` as missing.
pub fn parse_opt_f64(cell: &str) -> std::result::Result<Option<f64>, String> {
    let cell = cell.trim();
    if cell.is_empty() || cell.eq_ignore_ascii_case(NA) || cell.eq_ignore_ascii_case("nan") {
        return Ok(None);
    }
    cell.parse::<f64>()
        .map(Some)
        .map_err(|e| format!("`{cell}` is not a number: {e}"))
}

/// Row-oriented CSV writer with a fixed header.
pub struct TableWriter {
    inner: csv::Writer<BufWriter<File>>,
    path: std::path::PathBuf,
    width: usize,
}

impl TableWriter {
    pub fn create(path: &Path, header: &[&str]) -> Result<Self> {
        let file = File::create(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut inner = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(BufWriter::new(file));
        inner.write_record(header).map_err(|source| Error::Csv {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(Self {
            inner,
            path: path.to_path_buf(),
            width: header.len(),
        })
    }

    pub fn row<I, S>(&mut self, cells: I) -> Result<()>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<[u8]>,
    {
        let record: Vec<S> = cells.into_iter().collect();
        debug_assert_eq!(record.len(), self.width, "row width mismatch in {:?}", self.path);
        self.inner.write_record(record).map_err(|source| Error::Csv {
            path: self.path.clone(),
            source,
        })
    }

    pub fn finish(self) -> Result<()> {
        let path = self.path;
        let mut buf = self.inner.into_inner().map_err(|e| Error::Io {
            path: path.clone(),
            source: e.into_error(),
        })?;
        buf.flush().map_err(|source| Error::Io { path, source })
    }
}

/// Opens a headed CSV file for reading.
pub fn open_csv(path: &Path) -> Result<csv::Reader<File>> {
    csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|source| Error::Csv {
            path: path.to_path_buf(),
            source,
        })
}

/// Resolves the positions of `required` columns in a header, plus any
/// `optional` ones that happen to be present.
pub fn column_index(
    path: &Path,
    headers: &csv::StringRecord,
    required: &[&str],
    optional: &[&str],
) -> Result<(Vec<usize>, Vec<Option<usize>>)> {
    let find = |name: &str| headers.iter().position(|h| h.eq_ignore_ascii_case(name));
    let mut req = Vec::with_capacity(required.len());
    for name in required {
        match find(name) {
            Some(i) => req.push(i),
            None => return Err(Error::parse(path, 0, format!("missing column `{name}`"))),
        }
    }
    let opt = optional.iter().map(|name| find(name)).collect();
    Ok((req, opt))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ten_significant_digits() {
        assert_eq!(fmt_f64(0.1 + 0.2), "0.3");
        assert_eq!(fmt_f64(1.0 / 3.0), "0.3333333333");
        assert_eq!(fmt_f64(-2.5e-12), "-2.5e-12");
        assert_eq!(fmt_f64(123456789012.0), "123456789000");
        assert_eq!(fmt_f64(f64::NAN), "NA");
    }

    #[test]
    fn parses_missing_markers() {
        assert_eq!(parse_opt_f64("NA").unwrap(), None);
        assert_eq!(parse_opt_f64("").unwrap(), None);
        assert_eq!(parse_opt_f64(" 2.5 ").unwrap(), Some(2.5));
        assert!(parse_opt_f64("abc").is_err());
    }
}
