use std::path::PathBuf;

use gripforce_core::analysis::AnalysisError;
use gripforce_core::calibration::CalibrationError;
use gripforce_core::engine::EngineError;
use gripforce_core::simulator::SimulationError;
use thiserror::Error;

use crate::persist::PersistError;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Persist(#[from] PersistError),
    #[error(transparent)]
    Calibration(#[from] CalibrationError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Simulation(#[from] SimulationError),
    #[error("no sessions found in {0}")]
    NoSessions(String),
    #[error("session aborted: {0}")]
    Aborted(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("telemetry server: {0}")]
    Server(String),
}

impl ServiceError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        ServiceError::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable, machine-readable error class.
    pub fn category(&self) -> &'static str {
        match self {
            ServiceError::Usage(_) => "usage",
            ServiceError::Persist(PersistError::Io { .. }) | ServiceError::Io { .. } => "io",
            ServiceError::Persist(_) => "parse",
            ServiceError::Calibration(CalibrationError::Parse { .. }) => "parse",
            ServiceError::Calibration(CalibrationError::Io(_)) => "io",
            ServiceError::Calibration(_) => "calibration",
            ServiceError::Analysis(_) => "analysis",
            ServiceError::Engine(_) | ServiceError::Simulation(_) => "device",
            ServiceError::NoSessions(_) => "no_data",
            ServiceError::Aborted(_) => "aborted",
            ServiceError::Server(_) => "server",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.category() {
            "usage" => 2,
            "parse" => 3,
            "io" => 4,
            "calibration" => 5,
            "analysis" => 6,
            "no_data" => 7,
            "device" => 8,
            "aborted" => 9,
            "server" => 10,
            _ => 1,
        }
    }
}
