//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by any stage of the toolkit.
#[derive(Debug, Error)]
pub enum MatsError {
    /// Operand shapes are incompatible.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// An input violates a documented precondition (e.g. a non-symmetric
    /// matrix passed to the symmetric eigensolver).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A linear system is not positive definite (callers may retry with a
    /// ridge term).
    #[error("singular system: {0}")]
    Singular(String),

    /// A dense oracle or exact-Fisher request exceeds its configured size cap.
    #[error("capacity exceeded: {0}")]
    Capacity(String),

    /// A container file is malformed; `offset` is the byte position of the
    /// first inconsistency.
    #[error("format error at byte {offset}: {reason}")]
    Format { offset: u64, reason: String },

    /// Checkpoints do not share an identical name → shape map.
    #[error("checkpoints not mergeable: {0}")]
    Mergeability(String),

    /// Invalid configuration value.
    #[error("invalid config: {0}")]
    Config(String),

    /// Training produced a non-finite loss.
    #[error("training diverged: {0}")]
    Divergence(String),

    /// A numerical routine failed to make progress or produced non-finite
    /// values.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// A merge objective needs a statistic that the stats bundle does not
    /// carry for this parameter.
    #[error("parameter `{param}` is missing statistic `{stat}`")]
    MissingStat { param: String, stat: String },

    /// A pipeline stage failed; partial artifacts are retained.
    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<MatsError>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, MatsError>;
