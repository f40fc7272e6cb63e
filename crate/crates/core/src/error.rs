//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("annotation error: {0}")]
    Annotation(String),

    #[error("point out of bounds: ({x}, {y}) on image `{id}` of size {w}x{h}")]
    PointOutOfBounds {
        id: String,
        x: i64,
        y: i64,
        w: usize,
        h: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("image smaller than crop size: image is {h}x{w}, crop needs {m}x{m}")]
    ImageTooSmall { h: usize, w: usize, m: usize },

    #[error("encoder returned a zero vector for prompt `{0}`; cannot normalize")]
    ZeroEmbedding(String),

    #[error("optimal transport failed to converge within {iters} iterations (marginal residual {residual:.3e}, tolerance {tol:.3e})")]
    OtNotConverged {
        iters: usize,
        residual: f64,
        tol: f64,
    },

    #[error("non-finite loss ({0}) encountered at {1}")]
    NonFiniteLoss(f64, String),

    #[error("training diverged (loss became NaN) at epoch {0}")]
    Diverged(usize),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{0}")]
    Other(String),
}

impl CoreError {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        CoreError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, CoreError>;
