use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A value fell outside the support, mean space or link domain it was handed to.
    #[error("domain error: {0}")]
    Domain(String),

    /// Model configuration is inconsistent (bad family/link pair, unknown identifiers, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// Tabular data could not be read or does not match the model.
    #[error("data error: {0}")]
    Data(String),

    /// The validation report contains blocking issues.
    #[error("model validation failed:\n{0}")]
    Validation(String),

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("did not converge: {0}")]
    NonConvergence(String),

    #[error("not supported: {0}")]
    Unsupported(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
