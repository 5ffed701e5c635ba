use thiserror::Error;

/// Errors produced by the tuning library.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller-supplied argument violates a precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// An operation would produce a degenerate object (zero filter,
    /// zero-denominator transfer function, algebraic loop, ...).
    #[error("degenerate result: {0}")]
    Degenerate(String),

    /// The regressor matrix does not have full column rank.
    #[error("rank-deficient regressor matrix: deficient columns {columns:?}")]
    RankDeficient { columns: Vec<usize> },

    /// A square system could not be solved.
    #[error("singular matrix in {context}")]
    SingularMatrix { context: String },

    /// A quadratic-form factorization failed even after jitter escalation.
    #[error(
        "factorization of the residual covariance failed after {retries} jitter escalations \
         (smallest diagonal {min_diag:.3e}, largest {max_diag:.3e})"
    )]
    FactorizationFailed {
        retries: usize,
        min_diag: f64,
        max_diag: f64,
    },

    /// The objective is not finite at the optimizer start point.
    #[error("objective is not finite at the initial point")]
    NonFiniteObjective,

    /// Configuration file problems, one entry per violated rule.
    #[error("invalid configuration:\n{}", .0.join("\n"))]
    InvalidConfig(Vec<String>),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("config parse error: {0}")]
    TomlParse(#[from] toml::de::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
