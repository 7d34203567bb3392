use thiserror::Error;

/// Error type shared by all modules in the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// A CSV header or column map did not match expectations.
    #[error("schema error: {0}")]
    Schema(String),

    /// A cell or token failed to parse.
    #[error("parse error: {0}")]
    Parse(String),

    /// An invariant on ingested data was violated.
    #[error("validation error: {0}")]
    Validation(String),

    /// A model or kernel was configured inconsistently.
    #[error("configuration error: {0}")]
    Config(String),

    /// A linear-algebra or quadrature routine failed numerically.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// A caller-supplied argument was out of range.
    #[error("argument error: {0}")]
    Argument(String),

    /// Derivative-free optimization could not find a finite objective.
    #[error("optimization error: {0}")]
    Optimization(String),

    /// The MCMC sampler diverged or degenerated.
    #[error("divergence error: {0}")]
    Divergence(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
