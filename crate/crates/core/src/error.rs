use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    Shape {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("non-finite value produced at layer {layer} ({context})")]
    NonFinite { layer: usize, context: &'static str },

    #[error("covariance matrix not positive definite after jitter {jitter:e}")]
    CovarianceNotPsd { jitter: f64 },

    #[error("unsupported derivative order {0} (at most 2)")]
    UnsupportedOrder(usize),

    #[error("point {x} lies outside the sensor hull [{lo}, {hi}]")]
    Interpolation { x: f64, lo: f64, hi: f64 },

    #[error("data error: {0}")]
    Data(String),

    #[error("integration failed: {0}")]
    Integration(String),

    #[error("solver instability at t = {t}: max |s| = {max_abs:e}")]
    Instability { t: f64, max_abs: f64 },

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("kernel matrix with {n} terms exceeds the limit of {limit}; use the diagonal mode")]
    Size { n: usize, limit: usize },

    #[error("relative error undefined for a zero-norm reference")]
    UndefinedMetric,

    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
