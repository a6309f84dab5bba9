use thiserror::Error;

use crate::baseline::BaselineError;
use crate::design::DesignError;
use crate::dispatch::DispatchError;
use crate::extraction::ExtractionError;
use crate::jsonl::JsonlError;
use crate::population::PopulationError;
use crate::report::ReportError;
use crate::stats::StatsError;

/// Pipeline-level error. Each stage keeps its own error type; this wraps them.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Population(#[from] PopulationError),
    #[error(transparent)]
    Design(#[from] DesignError),
    #[error(transparent)]
    Dispatch(#[from] DispatchError),
    #[error(transparent)]
    Extraction(#[from] ExtractionError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error(transparent)]
    Report(#[from] ReportError),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("run directory {0} has no transcripts")]
    MissingTranscripts(String),
    #[error("spec hash mismatch: manifest has {expected}, spec file hashes to {actual}")]
    SpecHashMismatch { expected: String, actual: String },
    #[error("{0}")]
    Config(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
