use std::path::{Path, PathBuf};

use latentface_core::diffusion::DiffusionError;
use latentface_core::graph::GraphError;
use latentface_core::probe::ProbeError;
use latentface_core::render::RenderError;
use latentface_core::stage1::TrainError;
use latentface_core::synth::SynthError;

/// Failure of a pipeline command, grouped by the exit code it maps to.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("usage: {0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Data(String),
    #[error("numerical abort: {0}")]
    Numerical(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    /// Process exit status: 1 usage, 2 data, 3 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) => 1,
            Error::Io { .. } | Error::Data(_) => 2,
            Error::Numerical(_) => 3,
        }
    }

    pub fn io(path: impl AsRef<Path>) -> impl FnOnce(std::io::Error) -> Error {
        let path = path.as_ref().to_path_buf();
        move |source| Error::Io { path, source }
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }
}

impl From<TrainError> for Error {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFinite { .. } | TrainError::Graph(GraphError::NonPositiveScale) | TrainError::Graph(GraphError::Render(RenderError::NonFinite)) => Error::Numerical(e.to_string()),
            TrainError::InvalidConfig(_) => Error::Usage(e.to_string()),
            _ => Error::Data(e.to_string()),
        }
    }
}

impl From<DiffusionError> for Error {
    fn from(e: DiffusionError) -> Self {
        match e {
            DiffusionError::NonFinite { .. } => Error::Numerical(e.to_string()),
            DiffusionError::InvalidConfig(_) | DiffusionError::InvalidSteps { .. } | DiffusionError::TooManySamplingSteps { .. } => {
                Error::Usage(e.to_string())
            }
            _ => Error::Data(e.to_string()),
        }
    }
}

impl From<ProbeError> for Error {
    fn from(e: ProbeError) -> Self {
        match e {
            ProbeError::NonFinite => Error::Numerical(e.to_string()),
            _ => Error::Data(e.to_string()),
        }
    }
}

impl From<SynthError> for Error {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::InvalidCounts | SynthError::InvalidRange(_) => Error::Usage(e.to_string()),
            _ => Error::Data(e.to_string()),
        }
    }
}

impl From<RenderError> for Error {
    fn from(e: RenderError) -> Self {
        match e {
            RenderError::NonFinite => Error::Numerical(e.to_string()),
            _ => Error::Data(e.to_string()),
        }
    }
}

impl From<GraphError> for Error {
    fn from(e: GraphError) -> Self {
        match e {
            GraphError::NonPositiveScale | GraphError::Render(RenderError::NonFinite) => Error::Numerical(e.to_string()),
            _ => Error::Data(e.to_string()),
        }
    }
}
