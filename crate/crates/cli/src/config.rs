//! Flat `key = value` run configuration.
//!
//! Every key has a default, can be set from a config file and can be
//! overridden on the command line. The canonical rendering produced by
//! [`RunConfig::to_text`] parses back to an identical configuration.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub input_dir: PathBuf,
    pub out_dir: PathBuf,
    pub first_year: i32,
    pub last_year: i32,
    pub drop_censored: bool,
    pub missing_threshold: f64,
    pub nzv_freq_ratio: f64,
    pub nzv_unique_pct: f64,
    pub bh_alpha: f64,
    pub network_threshold: f64,
    pub n_quantiles: usize,
    pub year_spline_df: usize,
    pub qgcomp_clustered: bool,
    /// Lags beyond the contemporaneous term, which is always included.
    pub lags: Vec<usize>,
    /// Lead used as negative control; 0 disables it.
    pub lead: usize,
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub lambda_points: usize,
    pub knots: usize,
    pub spline_degree: usize,
    pub penalty_order: usize,
    pub curve_points: usize,
    pub clip_attribution: bool,
    pub small_sample_correction: bool,
    pub mixtures: Option<PathBuf>,
    pub mcl: Option<PathBuf>,
    /// Explicit dose-response analytes; empty means every BH-significant one.
    pub dr_analytes: Vec<String>,
    pub seed: u64,
    /// Worker threads; 0 defers to `WWAS_THREADS` and then to the core count.
    pub threads: usize,
    pub synth_zips: usize,
    pub synth_years: usize,
    pub synth_first_year: i32,
    pub synth_analytes: usize,
    /// Planted log-rate effects per SD, applied to analytes in order.
    pub synth_beta: Vec<f64>,
    pub synth_missing: f64,
    pub synth_censor: Option<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            input_dir: PathBuf::from("input"),
            out_dir: PathBuf::from("output"),
            first_year: 2012,
            last_year: 2022,
            drop_censored: false,
            missing_threshold: 0.5,
            nzv_freq_ratio: 19.0,
            nzv_unique_pct: 0.1024,
            bh_alpha: 0.05,
            network_threshold: 0.3,
            n_quantiles: 4,
            year_spline_df: 4,
            qgcomp_clustered: true,
            lags: vec![1, 2],
            lead: 1,
            lambda_min: 1e-4,
            lambda_max: 1e8,
            lambda_points: 40,
            knots: 20,
            spline_degree: 3,
            penalty_order: 2,
            curve_points: 200,
            clip_attribution: true,
            small_sample_correction: false,
            mixtures: None,
            mcl: None,
            dr_analytes: Vec::new(),
            seed: 0,
            threads: 0,
            synth_zips: 150,
            synth_years: 11,
            synth_first_year: 2012,
            synth_analytes: 20,
            synth_beta: vec![0.05],
            synth_missing: 0.05,
            synth_censor: None,
        }
    }
}

fn list<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn opt_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, CliError>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| CliError::config(format!("{key}: cannot parse `{value}`: {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool, CliError> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(CliError::config(format!("{key}: expected true/false, got `{value}`"))),
    }
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>, CliError>
where
    T::Err: std::fmt::Display,
{
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_num(key, s))
        .collect()
}

fn parse_opt_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

impl RunConfig {
    /// Ordered `(key, value)` pairs; the order is the canonical one.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("input_dir", self.input_dir.display().to_string()),
            ("out_dir", self.out_dir.display().to_string()),
            ("first_year", self.first_year.to_string()),
            ("last_year", self.last_year.to_string()),
            ("drop_censored", self.drop_censored.to_string()),
            ("missing_threshold", self.missing_threshold.to_string()),
            ("nzv_freq_ratio", self.nzv_freq_ratio.to_string()),
            ("nzv_unique_pct", self.nzv_unique_pct.to_string()),
            ("bh_alpha", self.bh_alpha.to_string()),
            ("network_threshold", self.network_threshold.to_string()),
            ("n_quantiles", self.n_quantiles.to_string()),
            ("year_spline_df", self.year_spline_df.to_string()),
            ("qgcomp_clustered", self.qgcomp_clustered.to_string()),
            ("lags", list(&self.lags)),
            ("lead", self.lead.to_string()),
            ("lambda_min", self.lambda_min.to_string()),
            ("lambda_max", self.lambda_max.to_string()),
            ("lambda_points", self.lambda_points.to_string()),
            ("knots", self.knots.to_string()),
            ("spline_degree", self.spline_degree.to_string()),
            ("penalty_order", self.penalty_order.to_string()),
            ("curve_points", self.curve_points.to_string()),
            ("clip_attribution", self.clip_attribution.to_string()),
            ("small_sample_correction", self.small_sample_correction.to_string()),
            ("mixtures", opt_path(&self.mixtures)),
            ("mcl", opt_path(&self.mcl)),
            ("dr_analytes", self.dr_analytes.join(",")),
            ("seed", self.seed.to_string()),
            ("threads", self.threads.to_string()),
            ("synth_zips", self.synth_zips.to_string()),
            ("synth_years", self.synth_years.to_string()),
            ("synth_first_year", self.synth_first_year.to_string()),
            ("synth_analytes", self.synth_analytes.to_string()),
            ("synth_beta", list(&self.synth_beta)),
            ("synth_missing", self.synth_missing.to_string()),
            ("synth_censor", self.synth_censor.map(|c| c.to_string()).unwrap_or_default()),
        ]
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let v = value.trim();
        match key.trim() {
            "input_dir" => self.input_dir = PathBuf::from(v),
            "out_dir" => self.out_dir = PathBuf::from(v),
            "first_year" => self.first_year = parse_num(key, v)?,
            "last_year" => self.last_year = parse_num(key, v)?,
            "drop_censored" => self.drop_censored = parse_bool(key, v)?,
            "missing_threshold" => self.missing_threshold = parse_num(key, v)?,
            "nzv_freq_ratio" => self.nzv_freq_ratio = parse_num(key, v)?,
            "nzv_unique_pct" => self.nzv_unique_pct = parse_num(key, v)?,
            "bh_alpha" => self.bh_alpha = parse_num(key, v)?,
            "network_threshold" => self.network_threshold = parse_num(key, v)?,
            "n_quantiles" => self.n_quantiles = parse_num(key, v)?,
            "year_spline_df" => self.year_spline_df = parse_num(key, v)?,
            "qgcomp_clustered" => self.qgcomp_clustered = parse_bool(key, v)?,
            "lags" => self.lags = parse_list(key, v)?,
            "lead" => self.lead = parse_num(key, v)?,
            "lambda_min" => self.lambda_min = parse_num(key, v)?,
            "lambda_max" => self.lambda_max = parse_num(key, v)?,
            "lambda_points" => self.lambda_points = parse_num(key, v)?,
            "knots" => self.knots = parse_num(key, v)?,
            "spline_degree" => self.spline_degree = parse_num(key, v)?,
            "penalty_order" => self.penalty_order = parse_num(key, v)?,
            "curve_points" => self.curve_points = parse_num(key, v)?,
            "clip_attribution" => self.clip_attribution = parse_bool(key, v)?,
            "small_sample_correction" => self.small_sample_correction = parse_bool(key, v)?,
            "mixtures" => self.mixtures = parse_opt_path(v),
            "mcl" => self.mcl = parse_opt_path(v),
            "dr_analytes" => {
                self.dr_analytes = v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect()
            }
            "seed" => self.seed = parse_num(key, v)?,
            "threads" => self.threads = parse_num(key, v)?,
            "synth_zips" => self.synth_zips = parse_num(key, v)?,
            "synth_years" => self.synth_years = parse_num(key, v)?,
            "synth_first_year" => self.synth_first_year = parse_num(key, v)?,
            "synth_analytes" => self.synth_analytes = parse_num(key, v)?,
            "synth_beta" => self.synth_beta = parse_list(key, v)?,
            "synth_missing" => self.synth_missing = parse_num(key, v)?,
            "synth_censor" => self.synth_censor = if v.is_empty() { None } else { Some(parse_num(key, v)?) },
            other => return Err(CliError::config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<(), CliError> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::config(format!("line {}: expected `key = value`", n + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    /// Reads a config file. A `.json` file is taken to be a run report and
    /// its `config` object is applied.
    pub fn apply_file(&mut self, path: &Path) -> Result<(), CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json")) {
            let value: serde_json::Value =
                serde_json::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
            let cfg = value
                .get("config")
                .and_then(|c| c.as_object())
                .ok_or_else(|| CliError::config(format!("{}: no `config` object", path.display())))?;
            for (k, v) in cfg {
                let v = v
                    .as_str()
                    .ok_or_else(|| CliError::config(format!("{}: `{k}` is not a string", path.display())))?;
                self.set(k, v)?;
            }
            Ok(())
        } else {
            self.apply_text(&text)
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn to_map(&self) -> BTreeMap<String, String> {
        self.entries().into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: &str| Err(CliError::config(m.to_string()));
        if self.first_year > self.last_year {
            return bad("first_year is after last_year");
        }
        if !(self.missing_threshold > 0.0 && self.missing_threshold <= 1.0) {
            return bad("missing_threshold must lie in (0, 1]");
        }
        if !(self.nzv_freq_ratio >= 1.0) || !(self.nzv_unique_pct >= 0.0 && self.nzv_unique_pct <= 100.0) {
            return bad("nzv_freq_ratio must be >= 1 and nzv_unique_pct in [0, 100]");
        }
        if !(self.bh_alpha > 0.0 && self.bh_alpha < 1.0) {
            return bad("bh_alpha must lie in (0, 1)");
        }
        if !(0.0..=1.0).contains(&self.network_threshold) {
            return bad("network_threshold must lie in [0, 1]");
        }
        if self.n_quantiles < 2 {
            return bad("n_quantiles must be at least 2");
        }
        if self.year_spline_df == 0 {
            return bad("year_spline_df must be positive");
        }
        if self.lags.contains(&0) {
            return bad("lags lists lags beyond the current year; 0 is implied");
        }
        if !(self.lambda_min > 0.0 && self.lambda_max >= self.lambda_min) || self.lambda_points == 0 {
            return bad("lambda grid needs 0 < lambda_min <= lambda_max and lambda_points >= 1");
        }
        if self.knots == 0 || self.spline_degree == 0 || self.penalty_order == 0 || self.curve_points < 2 {
            return bad("knots, spline_degree and penalty_order must be positive and curve_points >= 2");
        }
        if !(0.0..1.0).contains(&self.synth_missing) {
            return bad("synth_missing must lie in [0, 1)");
        }
        Ok(())
    }

    /// Thread count to use: the config value, else `WWAS_THREADS`, else 0
    /// (rayon's default).
    pub fn resolved_threads(&self) -> Result<usize, CliError> {
        if self.threads > 0 {
            return Ok(self.threads);
        }
        match std::env::var(crate::THREADS_ENV) {
            Ok(v) if !v.trim().is_empty() => parse_num(crate::THREADS_ENV, v.trim()),
            _ => Ok(0),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig::default();
        c.set("lags", "1, 2, 3").unwrap();
        c.set("mcl", "mcl.csv").unwrap();
        c.set("synth_censor", "11").unwrap();
        let mut d = RunConfig::default();
        d.apply_text(&c.to_text()).unwrap();
        assert_eq!(c, d);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        let mut c = RunConfig::default();
        assert!(c.set("alpha", "0.1").is_err());
        assert!(c.set("bh_alpha", "abc").is_err());
        c.set("bh_alpha", "1.5").unwrap();
        assert!(c.validate().is_err());
    }

    #[test]
    fn comments_and_blank_lines() {
        let mut c = RunConfig::default();
        c.apply_text("# comment\n\nseed = 9  # trailing\n").unwrap();
        assert_eq!(c.seed, 9);
        assert!(c.apply_text("seed 9").is_err());
    }
}
