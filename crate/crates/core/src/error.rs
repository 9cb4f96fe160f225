use std::io;

use crate::ids::SampleId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors surfaced by every layer of the training stack.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("internal consistency error: {0}")]
    Internal(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("checkpoint corrupt: {0}")]
    CheckpointCorrupt(String),

    #[error("corrupt payload: {0}")]
    CorruptPayload(String),

    #[error("protocol error at byte {offset}: {reason}")]
    Protocol { offset: usize, reason: String },

    #[error("transport error ({}): {reason}", if *.retriable { "retriable" } else { "fatal" })]
    Transport { retriable: bool, reason: String },

    #[error("stale sample {0}: not buffered on this worker")]
    StaleSample(SampleId),

    #[error("backpressure: {0}")]
    Backpressure(String),

    #[error("would block: {0}")]
    WouldBlock(String),

    #[error("synchronization failure: {0}")]
    SyncFailure(String),

    #[error("replica consistency error: {0}")]
    Consistency(String),

    #[error("clock consistency error: {0}")]
    ClockConsistency(String),

    #[error("unrecoverable run: {0}")]
    Unrecoverable(String),

    #[error("run aborted: {0}")]
    Aborted(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn precondition(msg: impl Into<String>) -> Self {
        Error::Precondition(msg.into())
    }

    pub(crate) fn protocol(offset: usize, reason: impl Into<String>) -> Self {
        Error::Protocol {
            offset,
            reason: reason.into(),
        }
    }

    pub(crate) fn transport(retriable: bool, reason: impl Into<String>) -> Self {
        Error::Transport {
            retriable,
            reason: reason.into(),
        }
    }

    pub fn is_retriable(&self) -> bool {
        matches!(self, Error::Transport { retriable: true, .. } | Error::Backpressure(_))
    }
}
