use std::path::PathBuf;

use thiserror::Error;

use oxipipe_core::{
    cnn::CnnError, dsp::DspError, explain::ExplainError, frameio::CsvError, frameio::FrameError,
    harness::HarnessError, plot::PlotError, roi::RoiError, ror::RorError, synth::SynthError,
};

/// Every failure the CLI can report. Each family exits with its own code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    ConfigInvalid(String),
    #[error("io {path}: {source}")]
    IoFailure {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("frames: {0}")]
    Frame(#[from] FrameError),
    #[error("csv: {0}")]
    Csv(#[from] CsvError),
    #[error("roi: {0}")]
    Roi(#[from] RoiError),
    #[error("synth: {0}")]
    Synth(#[from] SynthError),
    #[error("dsp: {0}")]
    Dsp(#[from] DspError),
    #[error("cnn: {0}")]
    Cnn(#[from] CnnError),
    #[error("ror: {0}")]
    Ror(#[from] RorError),
    #[error("explain: {0}")]
    Explain(#[from] ExplainError),
    #[error("harness: {0}")]
    Harness(#[from] HarnessError),
    #[error("plot: {0}")]
    Plot(#[from] PlotError),
}

impl CliError {
    /// Exit codes; 2 is left to argument parsing.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::ConfigInvalid(_) => 3,
            CliError::IoFailure { .. } => 4,
            CliError::Frame(_) => 5,
            CliError::Csv(_) => 6,
            CliError::Roi(_) => 7,
            CliError::Synth(_) => 8,
            CliError::Dsp(_) => 9,
            CliError::Cnn(_) => 10,
            CliError::Ror(_) => 11,
            CliError::Explain(_) => 12,
            CliError::Harness(_) => 13,
            CliError::Plot(_) => 14,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::IoFailure {
            path: path.into(),
            source,
        }
    }
}
