use thiserror::Error;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite value produced by {op}")]
    NonFinite { op: String },

    #[error("training error on parameter `{param}`: {detail}")]
    Training { param: String, detail: String },

    #[error("training diverged at epoch {epoch}: loss is not finite; parameters restored to last good state")]
    Divergence { epoch: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("backbone error: {0}")]
    Backbone(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("undefined step: {0}")]
    UndefinedStep(String),

    #[error("coverage infeasible: alpha = {alpha} needs at least {min_n} calibration windows, got {n}")]
    CoverageInfeasible { alpha: f64, n: usize, min_n: usize },

    #[error("state error: {0}")]
    State(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("leakage: {0}")]
    Leakage(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension { op, detail: detail.into() }
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io { path: path.as_ref().display().to_string(), source }
    }
}
