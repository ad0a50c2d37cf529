use std::path::PathBuf;

use thiserror::Error;
use w2rf::experiments::ExperimentError;
use w2rf::locality::LocalityError;
use w2rf::snn::SnnError;
use w2rf::theory_lab::TheoryError;
use w2rf::trainer::TrainError;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("config key `{key}`: {msg} (schema: {line})")]
    Schema { key: String, msg: String, line: String },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: {msg}", path.display())]
    Format { path: PathBuf, msg: String },
    #[error("numerical abort: {0}")]
    Numerical(String),
    #[error("{0}")]
    Inconclusive(String),
    #[error("replay mismatch: {0}")]
    ReplayMismatch(String),
}

impl CliError {
    /// Process exit status: 2 configuration, 3 numerical abort, 4
    /// inconclusive study, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Schema { .. } => 2,
            CliError::Numerical(_) => 3,
            CliError::Inconclusive(_) => 4,
            CliError::Io { .. } | CliError::Format { .. } | CliError::ReplayMismatch(_) => 1,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFiniteGradient { .. } | TrainError::NonFiniteLoss { .. } | TrainError::Diverged(_) => {
                CliError::Numerical(e.to_string())
            }
            TrainError::Locality(l) => l.into(),
            TrainError::Snn(s) => s.into(),
            TrainError::Config(_) | TrainError::Autodiff(_) => CliError::Config(e.to_string()),
        }
    }
}

impl From<LocalityError> for CliError {
    fn from(e: LocalityError) -> Self {
        match e {
            LocalityError::NonFinite(_) => CliError::Numerical(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<SnnError> for CliError {
    fn from(e: SnnError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<ExperimentError> for CliError {
    fn from(e: ExperimentError) -> Self {
        match e {
            ExperimentError::NonFiniteState { .. } => CliError::Numerical(format!(
                "{e}; consider setting train.clip_norm"
            )),
            ExperimentError::Train(t) => t.into(),
            ExperimentError::Locality(l) => l.into(),
            ExperimentError::Ot(o) => CliError::Numerical(o.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<TheoryError> for CliError {
    fn from(e: TheoryError) -> Self {
        match e {
            TheoryError::Inconclusive { .. } => CliError::Inconclusive(e.to_string()),
            TheoryError::Solver { .. } | TheoryError::Ot(_) => CliError::Numerical(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}
