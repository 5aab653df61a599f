use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not positive definite (pivot {pivot} = {value:e})")]
    NotPositiveDefinite { pivot: usize, value: f64 },

    #[error("degenerate noise: entry {index} is {value:e}, must be finite and > 0")]
    DegenerateNoise { index: usize, value: f64 },

    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("retina spec does not tile grid: {0}")]
    Tiling(String),

    #[error("at offset {offset}: {source}")]
    AtOffset {
        offset: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("search space too large: {designs} designs exceed the limit of {limit}; use greedy search")]
    SearchTooLarge { designs: u128, limit: u128 },

    #[error("rank deficient: requested {requested} factors but the data has numerical rank {rank}")]
    RankDeficient { requested: usize, rank: usize },

    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: u64, message: String },

    #[error("checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    Checksum { stored: u32, computed: u32 },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn at_offset(offset: usize) -> impl FnOnce(Error) -> Error {
        move |e| match e {
            e @ Error::AtOffset { .. } => e,
            other => Error::AtOffset {
                offset,
                source: Box::new(other),
            },
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
        let path = path.into();
        move |source| Error::Io { path, source }
    }

    /// True for failures rooted in linear algebra (as opposed to bad input or I/O).
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::NotPositiveDefinite { .. } | Error::DegenerateNoise { .. } | Error::RankDeficient { .. } => true,
            Error::AtOffset { source, .. } => source.is_numerical(),
            _ => false,
        }
    }

    /// True for malformed data files.
    pub fn is_data(&self) -> bool {
        matches!(
            self,
            Error::Parse { .. } | Error::Checksum { .. } | Error::Io { .. } | Error::Csv(_)
        )
    }
}

pub(crate) fn check_dim(context: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            context,
            expected,
            found,
        })
    }
}
