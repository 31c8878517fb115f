use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error("{path}, record {record}: {message}")]
    Parse {
        path: PathBuf,
        record: usize,
        message: String,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("analyte `{analyte}` has a non-detect sample but no LOD entry")]
    MissingLod { analyte: String },

    #[error("unknown water source code `{0}`")]
    UnknownSourceCode(String),

    #[error("demeaning did not converge after {sweeps} sweeps (last delta {last_delta:e})")]
    DemeanNotConverged { sweeps: usize, last_delta: f64 },

    #[error("IRLS did not converge after {iterations} iterations (relative deviance change {last_change:e})")]
    NotConverged { iterations: usize, last_change: f64 },

    #[error("exposure `{0}` has no variation left after absorbing fixed effects or is collinear with other exposures")]
    DegenerateExposure(String),

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("no usable rows: {0}")]
    NoData(String),
}

impl Error {
    pub(crate) fn parse(path: impl Into<PathBuf>, record: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            record,
            message: message.into(),
        }
    }

    /// Coarse category used by the command-line front end for exit codes.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Csv { .. } | Error::Parse { .. } | Error::MissingLod { .. } | Error::UnknownSourceCode(_) => "input",
            Error::InvalidInput(_) | Error::NoData(_) => "input",
            Error::DemeanNotConverged { .. }
            | Error::NotConverged { .. }
            | Error::DegenerateExposure(_)
            | Error::Singular(_) => "numerical",
        }
    }
}
