use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("time {t} lies outside the domain [0, {end}]")]
    Domain { t: f64, end: f64 },

    #[error("index out of range: {0}")]
    Index(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: u64, msg: String },

    #[error("no observations")]
    NoObservations,

    #[error("unknown cell (subject {subject}, series {series})")]
    UnknownCell { subject: usize, series: usize },

    #[error("fit diverged at iteration {iteration} (loss {loss}); reduce the step size")]
    Divergence { iteration: usize, loss: f64 },

    #[error("every tuning candidate diverged")]
    AllDiverged,

    #[error("normal equations are singular")]
    Singular,

    #[error("empty input")]
    EmptyInput,

    #[error("unknown scenario '{0}'")]
    UnknownScenario(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors caused by the content of input data rather than by
    /// how the library was called.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::Parse { .. }
                | Error::NoObservations
                | Error::Domain { .. }
                | Error::UnknownCell { .. }
                | Error::Csv(_)
                | Error::Json(_)
                | Error::Io(_)
                | Error::Singular
                | Error::EmptyInput
                | Error::ShapeMismatch(_)
                | Error::Index(_)
        )
    }
}
