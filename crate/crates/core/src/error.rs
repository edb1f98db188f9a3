use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid model, run, or scheme configuration.
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch in {context}: expected {expected:?}, got {actual:?}")]
    Shape {
        context: &'static str,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    /// Bad labels, empty batches, and similar data problems.
    #[error("data error: {0}")]
    Data(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    /// A stage of the split iteration ran out of order.
    #[error("protocol-order error: {0}")]
    ProtocolOrder(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("deserialization error: {0}")]
    Deserialize(String),

    #[error("score schedule exhausted: t = {t} has reached T = {total}")]
    ScheduleExhausted { t: usize, total: usize },

    #[error("ingestion error in {path}: {reason}")]
    Ingestion { path: String, reason: String },

    /// Training diverged; carries the last pruning decision for diagnosis.
    #[error(
        "training diverged at round {round}, client {client}, iteration {iteration}: {detail}"
    )]
    Diverged {
        round: usize,
        client: usize,
        iteration: usize,
        detail: String,
    },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn shape(context: &'static str, expected: &[usize], actual: &[usize]) -> Self {
        Error::Shape {
            context,
            expected: expected.to_vec(),
            actual: actual.to_vec(),
        }
    }
}
