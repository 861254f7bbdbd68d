use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite coefficient at row {row}, column {col}")]
    NonFiniteCoefficients { row: usize, col: usize },

    #[error("gram matrix is rank deficient: {deficient} of 10 basis dimensions unsupported (pass a positive ridge)")]
    RankDeficient { deficient: usize },

    #[error("numeric failure at epoch {epoch}, batch {batch} (lr {lr:e}): {what}")]
    NumericFailure {
        epoch: usize,
        batch: usize,
        lr: f64,
        what: String,
    },

    #[error("unsupported image format: {0}")]
    UnsupportedFormat(String),

    #[error("corrupt image: {0}")]
    CorruptImage(String),

    #[error("alpha channel not supported: {0}")]
    AlphaChannel(String),

    #[error("model file: {0}")]
    ModelFormat(String),

    #[error("malformed coefficient file: {0}")]
    ThetaFormat(String),

    #[error("config: {0}")]
    Config(String),

    #[error("manifest: {0}")]
    Manifest(String),

    #[error("gradient check failed: {0}")]
    GradientCheck(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Short machine-readable category name.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::InvalidArgument(_) => "usage",
            Error::NonFiniteCoefficients { .. } | Error::RankDeficient { .. } | Error::NumericFailure { .. } => {
                "numeric"
            }
            Error::UnsupportedFormat(_) | Error::CorruptImage(_) | Error::AlphaChannel(_) => "image",
            Error::ModelFormat(_) => "model",
            Error::ThetaFormat(_) => "theta",
            Error::Config(_) => "config",
            Error::Manifest(_) => "manifest",
            Error::GradientCheck(_) => "gradcheck",
            Error::Io { .. } => "io",
        }
    }

    /// Process exit code: 2 usage or shape, 3 I/O and file formats,
    /// 4 numeric failure, 5 configuration.
    pub fn exit_code(&self) -> i32 {
        match self.category() {
            "shape" | "usage" => 2,
            "numeric" | "gradcheck" => 4,
            "config" => 5,
            _ => 3,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
