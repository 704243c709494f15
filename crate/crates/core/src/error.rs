use alloc::boxed::Box;
use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// The mean function produced a non-finite value.
    #[error("mean function returned {value} at x = {x:?}, beta = {beta:?}, s = {s:?}")]
    Evaluation {
        x: Vec<f64>,
        beta: Vec<f64>,
        s: Vec<f64>,
        value: f64,
    },

    #[error("marginal density underflowed to zero")]
    QuadratureUnderflow,

    #[error(
        "tensor quadrature over {dims} dimensions refused (limit {limit}); force it or use Monte Carlo integration"
    )]
    TooManyDimensions { dims: usize, limit: usize },

    #[error("individual {id}: {source}")]
    Individual { id: String, source: Box<Error> },

    #[error("estimation failed: {0}")]
    Estimation(String),

    #[error("the 50:50 chi-bar-square reference needs exactly one tested variance, got {0}")]
    AsymptoticUnsupported(usize),
}

impl Error {
    /// True for failures caused by numerics rather than by the caller's input.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::Evaluation { .. } | Error::QuadratureUnderflow | Error::Estimation(_) => true,
            Error::Individual { source, .. } => source.is_numerical(),
            _ => false,
        }
    }
}
