use std::path::PathBuf;

use crate::nn::LayerId;

pub type Result<T, E = TlcError> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum TlcError {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: String,
        expected: usize,
        actual: usize,
    },

    #[error("non-finite value produced at layer {layer}")]
    NonFinite { layer: LayerId },

    #[error("training diverged at epoch {epoch} (loss = {loss})")]
    Diverged { epoch: usize, loss: f64 },

    #[error("invalid input: {0}")]
    Input(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("layer {0} does not exist in this network")]
    UnknownLayer(LayerId),

    #[error("layer {0} cannot be removed (the output head is never a removal candidate)")]
    HeadNotRemovable(LayerId),

    #[error("layer {0} has no ON neurons; collapsing it would block signal transmission")]
    NonRemovable(LayerId),

    #[error(
        "layer {0} carries no neuron statistics; attach empirical statistics first \
         (attach_empirical_stats)"
    )]
    StatisticsAbsent(LayerId),

    #[error("no removable layer left to rank")]
    EmptyRanking,

    #[error("checkpoint has bad magic bytes {0:?}")]
    BadMagic([u8; 4]),

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("checkpoint truncated: needed {needed} bytes, found {found}")]
    Truncated { needed: u64, found: u64 },

    #[error("checkpoint payload has {extra} trailing bytes")]
    TrailingBytes { extra: u64 },

    #[error(
        "layer chaining broken: {from} produces width {produced} but {to} expects {expected}"
    )]
    Chaining {
        from: LayerId,
        to: LayerId,
        produced: usize,
        expected: usize,
    },

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("parse error in {source_name} at {location}: {message}")]
    Parse {
        source_name: String,
        location: String,
        message: String,
    },

    #[error("{stage}: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<TlcError>,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serde(String),
}

impl TlcError {
    pub(crate) fn dim(context: impl Into<String>, expected: usize, actual: usize) -> Self {
        TlcError::Dimension {
            context: context.into(),
            expected,
            actual,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        TlcError::Io {
            path: path.into(),
            source,
        }
    }

    /// Wraps an error with the pipeline stage it surfaced in.
    pub fn in_stage(self, stage: impl Into<String>) -> Self {
        TlcError::Stage {
            stage: stage.into(),
            source: Box::new(self),
        }
    }

    /// Strips stage wrappers.
    pub fn root(&self) -> &TlcError {
        match self {
            TlcError::Stage { source, .. } => source.root(),
            other => other,
        }
    }
}
