use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("frequency order: lidar {lidar} Hz must be >= radar {radar} Hz > 0")]
    FrequencyOrder { lidar: f64, radar: f64 },

    #[error("invalid fusion policy: {0}")]
    Policy(String),

    #[error("stream not warm: {0}")]
    StreamNotWarm(String),

    #[error("out of range: {0}")]
    Range(String),

    #[error("structural error: {0}")]
    Structural(String),

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("average precision undefined: {0}")]
    UndefinedAp(String),

    #[error("calibration failed: {0}")]
    Calibration(String),

    #[error("scenario generation failed: {0}")]
    Generation(String),

    #[error("malformed frame container: {0}")]
    Format(String),

    #[error("config error in {path}: {message}")]
    Config { path: PathBuf, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization: {0}")]
    Serde(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input rather than runtime failures.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::FrequencyOrder { .. }
                | Error::Policy(_)
                | Error::StreamNotWarm(_)
                | Error::Parameter(_)
                | Error::Config { .. }
        )
    }
}
