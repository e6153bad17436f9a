use std::path::PathBuf;

/// Errors surfaced by every layer of the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("degenerate variance: batch norm in train mode needs at least 2 values per channel, got {0}")]
    DegenerateVariance(usize),

    #[error("label error: {0}")]
    Label(String),

    #[error("stale graph: backward already ran on this graph, run a new forward pass")]
    StaleGraph,

    #[error("invalid model config: {0}")]
    Config(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("fold error: {0}")]
    Fold(String),

    #[error("imbalance error: {0}")]
    Imbalance(String),

    #[error("generation error: {0}")]
    Generation(String),

    #[error("optimizer error: {0}")]
    Optimizer(String),

    #[error("training diverged at epoch {epoch}, batch {batch}: loss = {loss}")]
    Divergence { epoch: usize, batch: usize, loss: f64 },

    #[error("input error: {0}")]
    Input(String),

    #[error("undefined score: {0}")]
    UndefinedScore(String),

    #[error("metadata error: {0}")]
    Metadata(String),

    #[error("index error: {0}")]
    Index(String),

    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("incompatible checkpoint: {0}")]
    Compatibility(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input rather than a failed computation.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::Format(_)
                | Error::Input(_)
                | Error::Io { .. }
                | Error::Fold(_)
                | Error::Compatibility(_)
                | Error::Index(_)
                | Error::Metadata(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
