//! Experiment harness for generalized multiscale inversion.
//!
//! A run builds the truth model from the exact fracture network, samples
//! cell-average observations from its fine-scale solution, builds the prior
//! coarse model from the perturbed network and inverts for the coarse blocks.

pub mod cells;
pub mod config;
pub mod run;

pub use cells::CellSpec;
pub use config::{ExperimentConfig, RawConfig};
pub use run::{run_case, sweep, validate, Diagnostics, RunSummary};

/// Environment variable that replaces `output.dir`.
pub const OUTPUT_ENV: &str = "MSINVERT_OUT";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config line {line}{}: {message}", key.as_ref().map(|k| format!(", key `{k}`")).unwrap_or_default())]
    Parse {
        line: usize,
        key: Option<String>,
        message: String,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: msinv_core::Error,
    },

    #[error("cannot write `{path}`: {source}")]
    Output {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    /// 1 for configuration problems, 2 for failures while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Parse { .. } | Self::Config(_) => 1,
            Self::Stage { .. } | Self::Output { .. } => 2,
        }
    }
}
