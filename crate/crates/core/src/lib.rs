//! Water-wide association screening of drinking-water analytes against
//! all-cause mortality on a zip-code × year panel.
//!
//! The pipeline runs bottom-up: [`ingest`] aggregates raw samples into a
//! [`ZipYearPanel`], [`panelprep`] filters and standardizes analytes, and the
//! analysis modules ([`screening`], [`laglead`], [`mixtures`],
//! [`doseresponse`]) fit fixed-effects Poisson models from [`feglm`].
//! [`synth`] generates panels with known parameters for testing.

pub mod doseresponse;
pub mod error;
pub mod feglm;
pub mod ingest;
pub mod laglead;
pub mod mixtures;
pub mod panel;
pub mod panelprep;
pub mod screening;
pub mod stats;
pub mod synth;
pub mod table;

pub use error::{Error, Result};
pub use feglm::{fit_poisson_fe, Covariate, FeProblem, Factor, FitOptions, FitResult, Outcome, RegressionSpec, YearEffect};
pub use panel::{AnalyteColumn, PanelRow, Standardization, ZipYearPanel};
pub use stats::{rate_increase, RateIncrease};
