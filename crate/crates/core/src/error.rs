use thiserror::Error;

pub type Result<T> = std::result::Result<T, GeomError>;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum GeomError {
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("perturbation direction is degenerate: centering leaves an all-zero matrix")]
    DegenerateDirection,

    #[error("epsilon {eps} too large: entries must stay positive (limit {limit})")]
    EpsilonTooLarge { eps: f64, limit: f64 },

    #[error("inadmissible action: {0}")]
    InadmissibleAction(String),

    #[error("no convergence in {context} after {iterations} iterations (residual {residual:.3e})")]
    NonConvergence {
        context: String,
        iterations: usize,
        residual: f64,
    },

    #[error("value {value} is outside the open image of activation {activation}")]
    OutOfImage { value: f64, activation: String },

    #[error("gram matrix is numerically singular (condition number {condition:.3e})")]
    SingularGram { condition: f64 },

    #[error("rank {k} exceeds the admissible maximum {max}")]
    RankTooLarge { k: usize, max: usize },

    #[error("spectral gap {gap:.3e} below required {required:.3e} at rank {k}")]
    NoGap { k: usize, gap: f64, required: f64 },

    #[error("training diverged: risk {risk:.3e}")]
    Divergence { risk: f64 },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("parse error: {0}")]
    Parse(String),
}

impl GeomError {
    /// Module the error class belongs to, used when reporting failures.
    pub fn module(&self) -> &'static str {
        match self {
            GeomError::InvalidDistribution(_)
            | GeomError::DegenerateDirection
            | GeomError::EpsilonTooLarge { .. } => "dist",
            GeomError::InadmissibleAction(_) => "losses",
            GeomError::OutOfImage { .. } => "activations",
            GeomError::SingularGram { .. }
            | GeomError::RankTooLarge { .. }
            | GeomError::NoGap { .. } => "lowrank",
            GeomError::NonConvergence { .. } => "solver",
            GeomError::Divergence { .. } => "netlab",
            GeomError::DimensionMismatch(_) | GeomError::Parse(_) => "input",
        }
    }
}
