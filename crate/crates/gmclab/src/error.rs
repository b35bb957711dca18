use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Input(String),
    #[error("outside the domain of definition: {0}")]
    Domain(String),
    #[error("numerical failure in {what}: {detail}")]
    Numerical { what: String, detail: String },
    #[error("grid resolution insufficient: {0}")]
    Resolution(String),
    #[error("covariance embedding failed: {0}")]
    Embedding(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("problem too large: {0}")]
    Size(String),
    #[error("unknown {kind} '{name}', expected one of: {valid}")]
    Registry {
        kind: String,
        name: String,
        valid: String,
    },
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn numerical(what: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Numerical {
            what: what.into(),
            detail: detail.into(),
        }
    }
}

pub(crate) fn ensure_finite(name: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::Input(format!("{name} must be finite, got {v}")))
    }
}
