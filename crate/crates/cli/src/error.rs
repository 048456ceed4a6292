use std::io;
use std::path::PathBuf;

use speedlab_core::coordinator::CoordinatorError;
use speedlab_core::engine::EngineError;
use speedlab_core::flowmodel::ModelError;
use speedlab_core::metrics::MetricsError;
use thiserror::Error;

use crate::record::RecordError;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error(transparent)]
    Record(#[from] RecordError),
    #[error(transparent)]
    Coordinator(#[from] CoordinatorError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, CliError>;

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const FAILURE: i32 = 1;
    pub const CONFIG: i32 = 2;
    pub const NO_SERVERS: i32 = 3;
    pub const REFUSED: i32 = 4;
    pub const UNREACHABLE: i32 = 5;
}

fn engine_code(e: &EngineError) -> i32 {
    match e {
        EngineError::InvalidSpec(_) => exit::CONFIG,
        EngineError::Refused { .. } => exit::REFUSED,
        EngineError::Unreachable { .. } => exit::UNREACHABLE,
        _ => exit::FAILURE,
    }
}

impl CliError {
    pub fn file(path: impl Into<PathBuf>, source: io::Error) -> Self {
        CliError::File {
            path: path.into(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Model(_) => exit::CONFIG,
            CliError::Engine(e) => engine_code(e),
            CliError::Coordinator(e) => match e {
                CoordinatorError::NoServers(_) => exit::NO_SERVERS,
                CoordinatorError::InfeasibleSchedule(_)
                | CoordinatorError::InvalidArgument(_)
                | CoordinatorError::DuplicateServer(_)
                | CoordinatorError::UnknownServer(_)
                | CoordinatorError::Model(_) => exit::CONFIG,
                CoordinatorError::Engine(e) => engine_code(e),
                _ => exit::FAILURE,
            },
            _ => exit::FAILURE,
        }
    }
}
