use thiserror::Error;

/// Errors raised anywhere in the localization pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("cluster {cluster_id}: path delay {delay_s:.3e} s exceeds the unambiguous delay window {window_s:.3e} s")]
    DelayWindow {
        cluster_id: u32,
        delay_s: f64,
        window_s: f64,
    },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("parameter `{0}` has no gradient")]
    MissingGrad(String),

    #[error("training diverged at epoch {epoch}: loss = {loss}")]
    Divergence { epoch: usize, loss: f64 },

    #[error("missing label: {0}")]
    MissingLabel(String),

    #[error("unexpected label: {0}")]
    UnexpectedLabel(String),

    #[error("incompatible inputs: {0}")]
    Incompatible(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }

    /// Short category name used for CLI exit messages.
    pub fn category(&self) -> &'static str {
        match self {
            Error::InvalidArgument(_) => "invalid-argument",
            Error::ShapeMismatch(_) => "shape-mismatch",
            Error::DelayWindow { .. } => "simulation",
            Error::NonFinite(_) => "numerical",
            Error::MissingGrad(_) => "autodiff",
            Error::Divergence { .. } => "divergence",
            Error::MissingLabel(_) | Error::UnexpectedLabel(_) => "label",
            Error::Incompatible(_) => "incompatible",
            Error::Format(_) => "format",
            Error::Io(_) => "io",
            Error::Json(_) => "config",
            Error::Csv(_) => "csv",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
