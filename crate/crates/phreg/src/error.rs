//! Crate-wide error type.

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("numeric domain error: {0}")]
    NumericDomain(String),

    #[error("invalid structure: {0}")]
    Structure(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("likelihood underflow at observation {index}")]
    LikelihoodUnderflow { index: usize },

    #[error("transform overflow at observation {index}")]
    TransformOverflow { index: usize },

    #[error("state {state} is never visited (expected sojourn {sojourn:.3e}); fit cannot continue")]
    DegenerateState { state: usize, sojourn: f64 },

    #[error("unsupported transform: {0}")]
    UnsupportedTransform(String),

    #[error("conditional mean is infinite: tail index {tail_index:.4} >= 1")]
    InfiniteMean { tail_index: f64 },

    #[error("matrix is singular")]
    Singular,

    #[error(
        "information matrix is near-singular (condition about {condition:.3e}); \
         try the other Fisher source"
    )]
    IllConditioned { condition: f64 },

    #[error("model document: {0}")]
    Document(String),

    #[error("dataset: {0}")]
    Data(String),
}
