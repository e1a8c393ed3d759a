use eqgat_autodiff::AutodiffError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EqgatError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),

    #[error("invalid point cloud: {0}")]
    InvalidCloud(String),

    #[error("atoms {first} and {second} coincide within the cutoff; their relative direction is undefined")]
    CoincidentPoints { first: usize, second: usize },

    #[error("distance must be positive, got {0}")]
    NonPositiveDistance(f64),

    #[error(
        "element {} (Z = {z}) is not in the vocabulary {vocabulary:?}",
        crate::data::element_symbol(*z).unwrap_or("?")
    )]
    UnknownAtom { z: u32, vocabulary: Vec<u32> },

    #[error("{what}: expected shape {expected:?}, got {actual:?}")]
    Shape {
        what: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("positions are not centered (|mean| = {0:e}); subtract the centroid first")]
    NotCentered(f64),

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, EqgatError>;
