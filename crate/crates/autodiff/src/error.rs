use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: {reason}")]
    InvalidArgument { op: &'static str, reason: String },

    #[error("tensor of shape {shape:?} needs {expected} values, got {actual}")]
    BadBuffer {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },

    #[error("unknown primitive `{0}`")]
    UnknownPrimitive(String),

    #[error("backward needs a scalar output, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),

    #[error("backward was already run on this tape")]
    BackwardTwice,

    #[error("variable does not belong to this tape")]
    ForeignVar,

    #[error("non-finite function value when perturbing leaf `{leaf}` at component {index}")]
    NonFinite { leaf: String, index: usize },
}

pub type Result<T> = std::result::Result<T, AutodiffError>;
