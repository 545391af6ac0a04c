use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("rank {rank} is invalid for layer {layer} ({h}x{w}); admissible range is 1..={max}")]
    InvalidRank {
        layer: usize,
        rank: usize,
        h: usize,
        w: usize,
        max: usize,
    },

    #[error("rank must be at least 1, got {0}")]
    ZeroRank(usize),

    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    Shape {
        context: &'static str,
        expected: String,
        actual: String,
    },

    #[error("degenerate model spec: {0}")]
    DegenerateSpec(String),

    #[error("cannot partition dataset: {0}")]
    Partition(String),

    #[error("training diverged (non-finite loss) in round {round}, epoch {epoch}, batch {batch}")]
    Divergence {
        round: usize,
        epoch: usize,
        batch: usize,
    },

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("aggregation error: {0}")]
    Aggregation(String),

    #[error("SVD did not converge for a {h}x{w} matrix")]
    SvdNonConvergence { h: usize, w: usize },

    #[error("brute-force scheduling is limited to {limit} vehicles, got {count}")]
    TooManyVehicles { count: usize, limit: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: {source}", path.display())]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error("{}: {message}", path.display())]
    Parse { path: PathBuf, message: String },
}

impl Error {
    pub(crate) fn shape(
        context: &'static str,
        expected: impl ToString,
        actual: impl ToString,
    ) -> Self {
        Error::Shape {
            context,
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input (config, flags, files) rather
    /// than a failure during a run.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::InvalidArgument(_)
                | Error::InvalidRank { .. }
                | Error::ZeroRank(_)
                | Error::DegenerateSpec(_)
                | Error::Io { .. }
                | Error::Csv { .. }
                | Error::Parse { .. }
                | Error::TooManyVehicles { .. }
        )
    }
}
