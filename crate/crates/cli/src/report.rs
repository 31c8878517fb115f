//! Per-stage run records and the aggregated `report.json`.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::CliError;
use crate::pipeline::Stage;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Ok,
    Failed,
    Skipped,
}

/// What one stage did, written to `stages/<stage>.json` when it finishes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub status: StageStatus,
    pub wall_seconds: f64,
    /// Input artifacts and their hashes at the time the stage ran.
    pub inputs: BTreeMap<String, String>,
    /// Output artifacts and their hashes as written.
    pub outputs: BTreeMap<String, String>,
    pub diagnostics: BTreeMap<String, Value>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OutputEntry {
    pub file: String,
    pub rows: Option<usize>,
    pub sha256: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: String,
    pub status: StageStatus,
    /// Outputs no longer reflect the current inputs, or the stage failed.
    pub stale: bool,
    pub stale_reasons: Vec<String>,
    pub wall_seconds: f64,
    pub outputs: Vec<OutputEntry>,
    pub diagnostics: BTreeMap<String, Value>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub tool_version: String,
    pub config: BTreeMap<String, String>,
    pub stages: Vec<StageReport>,
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let mut f = std::fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut h = Sha256::new();
    let mut buf = [0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf).map_err(|e| CliError::io(path, e))?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

/// Data rows of a CSV file (lines minus the header); `None` for other files.
pub fn csv_rows(path: &Path) -> Option<usize> {
    if !path.extension().is_some_and(|e| e == "csv") {
        return None;
    }
    let text = std::fs::read(path).ok()?;
    Some(text.iter().filter(|&&b| b == b'\n').count().saturating_sub(1))
}

pub fn hash_map(paths: &[PathBuf]) -> Result<BTreeMap<String, String>, CliError> {
    paths
        .iter()
        .map(|p| Ok((p.display().to_string(), sha256_file(p)?)))
        .collect()
}

fn records_dir(out_dir: &Path) -> PathBuf {
    out_dir.join("stages")
}

pub fn write_record(out_dir: &Path, record: &StageRecord) -> Result<(), CliError> {
    let dir = records_dir(out_dir);
    std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    let path = dir.join(format!("{}.json", record.stage));
    let text = serde_json::to_string_pretty(record).expect("stage record serializes");
    std::fs::write(&path, text + "\n").map_err(|e| CliError::io(&path, e))
}

pub fn read_record(out_dir: &Path, stage: Stage) -> Option<StageRecord> {
    let path = records_dir(out_dir).join(format!("{}.json", stage.name()));
    let text = std::fs::read_to_string(path).ok()?;
    serde_json::from_str(&text).ok()
}

fn stage_report(rec: &StageRecord, upstream_stale: &[&str]) -> StageReport {
    let mut reasons = Vec::new();
    match rec.status {
        StageStatus::Ok => {}
        StageStatus::Failed => reasons.push("stage failed".to_string()),
        StageStatus::Skipped => reasons.push("stage skipped".to_string()),
    }
    for (path, hash) in &rec.inputs {
        match sha256_file(Path::new(path)) {
            Ok(h) if &h == hash => {}
            Ok(_) => reasons.push(format!("input {path} changed")),
            Err(_) => reasons.push(format!("input {path} missing")),
        }
    }
    for up in upstream_stale {
        reasons.push(format!("upstream stage `{up}` is stale"));
    }
    let outputs = rec
        .outputs
        .iter()
        .map(|(path, recorded)| {
            let p = Path::new(path);
            let sha = sha256_file(p).ok();
            match &sha {
                Some(h) if h != recorded => reasons.push(format!("output {path} modified")),
                None => reasons.push(format!("output {path} missing")),
                _ => {}
            }
            OutputEntry {
                file: path.clone(),
                rows: csv_rows(p),
                sha256: sha,
            }
        })
        .collect();
    StageReport {
        stage: rec.stage.clone(),
        status: rec.status,
        stale: !reasons.is_empty(),
        stale_reasons: reasons,
        wall_seconds: rec.wall_seconds,
        outputs,
        diagnostics: rec.diagnostics.clone(),
        error: rec.error.clone(),
    }
}

/// Collects every stage record under the output directory into a report.
pub fn build_report(config: &RunConfig) -> RunReport {
    let mut stages: Vec<StageReport> = Vec::new();
    for stage in Stage::ALL {
        let Some(rec) = read_record(&config.out_dir, stage) else {
            continue;
        };
        let upstream: Vec<&str> = stage
            .upstream()
            .iter()
            .filter(|u| stages.iter().any(|s| s.stage == u.name() && s.stale))
            .map(|u| u.name())
            .collect();
        stages.push(stage_report(&rec, &upstream));
    }
    RunReport {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        config: config.to_map(),
        stages,
    }
}

pub fn write_report(config: &RunConfig) -> Result<RunReport, CliError> {
    let report = build_report(config);
    let path = config.out_dir.join("report.json");
    std::fs::create_dir_all(&config.out_dir).map_err(|e| CliError::io(&config.out_dir, e))?;
    let text = serde_json::to_string_pretty(&report).expect("report serializes");
    std::fs::write(&path, text + "\n").map_err(|e| CliError::io(&path, e))?;
    Ok(report)
}
