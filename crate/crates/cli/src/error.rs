use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] epabc::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: malformed data: {msg}")]
    Data { path: PathBuf, msg: String },
    #[error("incompatible runs: {0}")]
    IncompatibleRuns(String),
}

pub type CliResult<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// 2 for anything the user can fix in the config, 3 for numerical
    /// failures during inference, 4 for file system and data-file problems.
    pub fn exit_code(&self) -> i32 {
        use epabc::Error as E;
        match self {
            CliError::Config(_) | CliError::IncompatibleRuns(_) => 2,
            CliError::Io { .. } | CliError::Data { .. } => 4,
            CliError::Core(e) => match e {
                E::DimensionMismatch { .. }
                | E::InvalidAlpha(_)
                | E::DomainError(_)
                | E::DimensionTooLarge(_)
                | E::InvalidBlockLength { .. }
                | E::NonStationary(_)
                | E::SingularProjection
                | E::InvalidConfig(_) => 2,
                E::NotPositiveDefinite
                | E::TableExhausted { .. }
                | E::ZeroAcceptance { .. }
                | E::AbortedOnFailure { .. }
                | E::TooManySkips { .. }
                | E::EmptyHybridSample(_)
                | E::StuckChain(_)
                | E::NonFinite(_) => 3,
            },
        }
    }
}
