//! Experiment configuration, orchestration and persistence.
//!
//! Configurations are JSON; the `fig2` preset names the two-agent
//! quantization benchmark (Metropolis pair network, costs `(theta-1)^2` and
//! `(theta-4)^2`, floor quantization of the auxiliary state at resolution
//! 1e-5, zero initial conditions). Trajectories are exported as tidy CSV,
//! reports as JSON; plotting is deliberately left to external tools.

mod config;
mod csvio;
mod fig2;
mod run;

pub use config::{
    fig2_preset, parse_config, CostConfig, ExperimentConfig, GammaConfig, GraphConfig,
    InitialConfig, ProblemConfig, OUTPUT_DIR_ENV,
};
pub use csvio::{read_trajectory_csv, trajectory_header, write_trajectory_csv, CsvRow};
pub use fig2::{fig2_gammas, fig2_horizon, reproduce_fig2, Assertion, Fig2Report, Fig2Run};
pub use run::{
    build_experiment, derive_seed, run_experiment, summarize_csv, sweep, BuiltExperiment,
    CsvSummary, DerivedSeries, ExperimentReport, RunArtifacts, SweepCell, SweepReport, Weights,
};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config syntax error: {0}")]
    Syntax(#[from] serde_json::Error),
    #[error("config field `{field}`: {reason}")]
    Semantic { field: String, reason: String },
    #[error("unknown preset `{0}`")]
    UnknownPreset(String),
    #[error("csv line {line}: {reason}")]
    CsvParse { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Network(#[from] crate::network::NetworkError),
    #[error(transparent)]
    Problem(#[from] crate::problem::ProblemError),
    #[error(transparent)]
    Dynamics(#[from] crate::dynamics::DynamicsError),
    #[error(transparent)]
    Certify(#[from] crate::certify::CertifyError),
    #[error(transparent)]
    Linalg(#[from] crate::linalg::LinalgError),
}

impl HarnessError {
    fn semantic(field: &str, reason: impl Into<String>) -> Self {
        HarnessError::Semantic {
            field: field.to_string(),
            reason: reason.into(),
        }
    }

    /// Whether this error is a configuration problem (as opposed to a
    /// failure at run time). CLI front ends map these to distinct exit codes.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            HarnessError::Syntax(_)
                | HarnessError::Semantic { .. }
                | HarnessError::UnknownPreset(_)
        )
    }
}
