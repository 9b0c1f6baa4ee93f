use std::path::{Path, PathBuf};

use nle_core::evalstat::EvalError;
use nle_core::nlenet::NetError;
use nle_core::noisequant::NoiseError;
use nle_core::phantom::PhantomError;
use nle_core::train::TrainError;
use nle_core::volgrid::VolumeError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {reason}")]
    BadFile { path: PathBuf, reason: String },
    #[error("numerical failure: {0}")]
    Numerical(String),
}

pub type Result<T> = std::result::Result<T, CliError>;

impl CliError {
    /// 2 for configuration and validation problems, 3 for I/O, 4 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io { .. } | CliError::BadFile { .. } => 3,
            CliError::Numerical(_) => 4,
        }
    }

    pub fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.as_ref().to_path_buf(),
            source,
        }
    }

    pub fn bad_file(path: impl AsRef<Path>, reason: impl ToString) -> Self {
        CliError::BadFile {
            path: path.as_ref().to_path_buf(),
            reason: reason.to_string(),
        }
    }

    /// Volume errors raised while reading or writing `path`.
    pub fn volume(path: impl AsRef<Path>, e: VolumeError) -> Self {
        match e {
            VolumeError::Io(source) => CliError::io(path, source),
            VolumeError::Format { .. }
            | VolumeError::Truncated { .. }
            | VolumeError::Invalid(_) => CliError::bad_file(path, e),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<VolumeError> for CliError {
    fn from(e: VolumeError) -> Self {
        match e {
            VolumeError::Io(source) => CliError::Io {
                path: PathBuf::new(),
                source,
            },
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<PhantomError> for CliError {
    fn from(e: PhantomError) -> Self {
        match e {
            PhantomError::Volume(v) => v.into(),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<NoiseError> for CliError {
    fn from(e: NoiseError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<NetError> for CliError {
    fn from(e: NetError) -> Self {
        match e {
            NetError::Volume(v) => v.into(),
            NetError::Domain(m) => CliError::Numerical(m),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFinite { .. } => CliError::Numerical(e.to_string()),
            TrainError::Io(source) => CliError::Io {
                path: PathBuf::new(),
                source,
            },
            TrainError::Net(n) => n.into(),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Metric(_) | EvalError::DegenerateDifferences => {
                CliError::Numerical(e.to_string())
            }
            other => CliError::Config(other.to_string()),
        }
    }
}
