//! Config-driven experiments tying samplers, exact covariances, distances
//! and bounds together, with CSV output.

pub mod config;
pub mod csv;
pub mod experiment;

pub use config::{ConfigError, ExperimentConfig, FieldParams, Mode};
pub use csv::{emit_csv, format_g12, render_csv, CSV_HEADER};
pub use experiment::{
    fit_rate, run_experiment, run_multivariate_experiment, run_univariate_experiment, run_verify_na, univariate_row_bound,
    ExperimentRow, FieldConstants, HarnessError, MultivariateCheck, MultivariateRun, RateColumn, RateFit,
};
