use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid shape {shape:?}: {detail}")]
    InvalidShape { shape: Vec<usize>, detail: String },

    #[error("{op}: {detail}")]
    Domain { op: &'static str, detail: String },

    #[error("{op}: kernel size {k} must be odd")]
    EvenKernel { op: &'static str, k: usize },

    #[error("{op}: input contains NaN")]
    NanInput { op: &'static str },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
}

pub type Result<T> = std::result::Result<T, TensorError>;
