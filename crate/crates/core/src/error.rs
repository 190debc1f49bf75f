use thiserror::Error;

/// Errors raised across loading, modelling and evaluation.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{source_name}:{line}: {message}")]
    Parse {
        source_name: String,
        line: usize,
        message: String,
    },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("referential integrity: {0}")]
    Integrity(String),

    #[error("insufficient capacity: {0}")]
    Capacity(String),

    #[error("{name} = {value} is outside {allowed}")]
    Range {
        name: &'static str,
        value: f64,
        allowed: &'static str,
    },

    #[error("unknown account `{0}`")]
    Lookup(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("numerical rank {achieved} is below the requested {requested} components")]
    NumericalRank { achieved: usize, requested: usize },

    #[error("non-finite loss in epoch {epoch} (last finite epoch: {last_finite:?})")]
    Divergence {
        epoch: usize,
        last_finite: Option<usize>,
    },

    #[error("training set needs both classes: {0}")]
    ClassCoverage(String),

    #[error("frozen parameters changed during fine-tuning ({before} -> {after})")]
    FreezeViolation { before: String, after: String },

    #[error("degenerate kernel bandwidth {0}")]
    Bandwidth(f64),

    #[error("division by zero: {0}")]
    Division(&'static str),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("config: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn parse(source_name: impl Into<String>, line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            source_name: source_name.into(),
            line,
            message: message.into(),
        }
    }

    /// True for errors caused by the input data rather than the caller.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::Parse { .. }
                | Error::Schema(_)
                | Error::Integrity(_)
                | Error::Capacity(_)
                | Error::Lookup(_)
                | Error::NumericalRank { .. }
                | Error::ClassCoverage(_)
                | Error::Checkpoint(_)
                | Error::Io(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
