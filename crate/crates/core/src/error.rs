use thiserror::Error;

/// Errors raised by the boosting library.
#[derive(Debug, Error)]
pub enum Error {
    /// Shapes, ranges or parameters that violate an operation's contract.
    #[error("invalid input: {0}")]
    Input(String),
    /// A linear solve or other numerical step could not be completed.
    #[error("numerical failure: {0}")]
    Numerical(String),
    /// The optimal constant does not exist for the given labels.
    #[error("degenerate class distribution: {0}")]
    DegenerateClass(String),
    /// A synthetic generator could not produce the requested sample.
    #[error("data generation failed: {0}")]
    Generation(String),
    #[error("parse error on line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("malformed ensemble document: {0}")]
    Document(String),
    /// Failure inside a boosting stage, tagged with the stage index.
    #[error("boosting stage {stage}: {source}")]
    Stage {
        stage: usize,
        #[source]
        source: Box<Error>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    /// Strips stage context to reach the underlying cause.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            other => other,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
