use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("jump measure has divergent mass on |e| >= {threshold}")]
    DivergentMass { threshold: f64 },

    #[error("exponent {exponent:.3} in j-functional exceeds cap {cap}")]
    JOverflow { exponent: f64, cap: f64 },

    #[error("invalid time grid: {0}")]
    InvalidGrid(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("envelope candidate grid is empty")]
    EmptyGrid,

    #[error("field has {got} values but quadrature has {expected} nodes")]
    MisalignedField { expected: usize, got: usize },

    #[error("backward step is not a contraction: dt * L = {product:.4} >= 1")]
    NonContraction { product: f64 },

    #[error("regression design at step {step} is rank deficient (condition number {condition:.3e})")]
    RankDeficient { step: usize, condition: f64 },

    #[error("integration did not converge: {0}")]
    Integration(String),

    #[error("solution and ensemble do not match")]
    MismatchedEnsemble,

    #[error("comparison refused: {0}")]
    UnlinkedComparison(String),

    #[error("operation not supported: {0}")]
    Unsupported(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
