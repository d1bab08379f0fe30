//! Experiment driver for camcon: configuration files, run directories,
//! the ratio × layer matrix, ablations, result tables and Grad-CAM panels.

pub mod config;
pub mod experiment;
pub mod panel;
pub mod report;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("run failed: {0}")]
    Run(String),
}

impl CliError {
    /// 2 for configuration problems, 3 for failures during a run.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Run(_) => 3,
        }
    }
}

impl From<camcon::Error> for CliError {
    fn from(e: camcon::Error) -> Self {
        match e {
            camcon::Error::Config(m) => CliError::Config(m),
            other => CliError::Run(other.to_string()),
        }
    }
}
