use std::path::PathBuf;

use thiserror::Error;

use crate::diff::DiffError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("{0} is empty")]
    Empty(&'static str),
    #[error("length mismatch in {what}: expected {expected}, got {got}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("{kind} scoring requires {needs}")]
    MissingContext {
        kind: &'static str,
        needs: &'static str,
    },
    #[error("model has no hidden layer, so there is no embedding layer")]
    NoEmbeddingLayer,
    #[error("score at position {index} is NaN")]
    NanScore { index: usize },
    #[error(
        "score {score} at position {index} is negative; power sampling needs nonnegative scores"
    )]
    NegativeScore { index: usize, score: f64 },
    #[error("batch size {k} exceeds pool size {pool}")]
    BatchTooLarge { k: usize, pool: usize },
    #[error("sample {0} appears more than once in the sequence")]
    DuplicateInSequence(usize),
    #[error("sample {0} is not part of the pool snapshot")]
    NotInSnapshot(usize),
    #[error("selection record for cycle {cycle} has no pool snapshot")]
    MissingSnapshot { cycle: usize },
    #[error("non-finite loss at cycle {cycle}, epoch {epoch}: nll={nll}, dependency={dependency}")]
    NonFiniteLoss {
        cycle: usize,
        epoch: usize,
        nll: f64,
        dependency: f64,
    },
    #[error("pool exhausted: {needed} samples needed, train split has {available}")]
    PoolExhausted { needed: usize, available: usize },
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("ill-conditioned problem: {0}")]
    IllConditioned(String),
    #[error("model assigns zero probability to outcome (x={x}, y={y}) that has positive true probability")]
    InfiniteKl { x: usize, y: usize },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
