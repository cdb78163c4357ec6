use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("could not place user {user} after {attempts} draws")]
    Placement { user: usize, attempts: usize },

    #[error("zero distance between user {user} and AP {ap}")]
    ZeroDistance { user: usize, ap: usize },

    #[error("correlation matrix of AP {ap} is invalid: {reason}")]
    Correlation { ap: usize, reason: String },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("Gram matrix is singular at subcarrier {q}")]
    Singular { q: usize },

    #[error("{active} active antennas cannot serve {users} users")]
    InsufficientAntennas { active: usize, users: usize },

    #[error("no active AP remains")]
    EmptyActiveSet,

    #[error("{what} did not converge after {iterations} iterations (residual {residual:e})")]
    NoConvergence {
        what: &'static str,
        iterations: usize,
        residual: f64,
    },

    #[error("I - A is singular, the statistics are outside the valid regime")]
    SingularCoupling,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("malformed channel dump: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}
