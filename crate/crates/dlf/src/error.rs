use std::path::{Path, PathBuf};

use dlf_core::{BdRateError, CdfError, CoderError, ContainerError, ImageError, MetricError, PackError};

pub type Result<T, E = DlfError> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum DlfError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("empty dataset: {0}")]
    EmptyDataset(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),
    #[error("stage order: {0}")]
    StageOrder(String),
    #[error("causality violation: {0}")]
    Causality(String),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error(transparent)]
    Pack(#[from] PackError),
    #[error(transparent)]
    Coder(#[from] CoderError),
    #[error(transparent)]
    Cdf(#[from] CdfError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    BdRate(#[from] BdRateError),
    #[error("tensor error: {0}")]
    Tensor(#[from] candle_core::Error),
    #[error("checkpoint format: {0}")]
    Safetensors(#[from] safetensors::SafeTensorError),
}

impl DlfError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        DlfError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// Process exit code for the command line tool.
    ///
    /// 2: unreadable or invalid input, bad config. 3: checkpoint, lambda,
    /// magic or version mismatch and stage-order violations. 4: truncated or
    /// corrupt payloads. 1: anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            DlfError::Io { .. }
            | DlfError::InvalidInput(_)
            | DlfError::Config(_)
            | DlfError::EmptyDataset(_)
            | DlfError::Image(_) => 2,
            DlfError::CheckpointMismatch(_) | DlfError::StageOrder(_) | DlfError::Safetensors(_) => 3,
            DlfError::Container(ContainerError::BadMagic(_) | ContainerError::UnsupportedVersion(_)) => 3,
            DlfError::Container(_) | DlfError::Pack(_) | DlfError::Coder(_) => 4,
            _ => 1,
        }
    }
}
