use thiserror::Error;

/// Errors raised by the core library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("enumeration of {size} comparison triples exceeds the cap of {cap}")]
    EnumerationCapExceeded { size: usize, cap: usize },

    #[error("uncertainty radius rho={rho} is inadmissible: it must satisfy 0 <= rho < delta={delta}")]
    InadmissibleRadius { rho: f64, delta: f64 },

    #[error("interval [p*-rho, p*+rho] = [{lo}, {hi}] is not contained in [0, 1]")]
    IntervalOutOfRange { lo: f64, hi: f64 },

    #[error("envelope parameter lambda_env={lambda_env} must lie in (0, 1/kappa) with kappa={kappa}")]
    InvalidEnvelopeParam { lambda_env: f64, kappa: f64 },

    #[error("proximal solve hit the iteration cap ({iters}) with residual {residual:e}")]
    MaxInnerItersExceeded { iters: usize, residual: f64 },

    #[error("iterate {t} has a non-finite coordinate; the stepsize is likely misconfigured")]
    NonFiniteIterate { t: usize },

    #[error("invalid environment: {0}")]
    InvalidEnvironment(String),

    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("invalid hyperparameters: {0}")]
    InvalidHyperparams(String),

    #[error("malformed trace: {0}")]
    MalformedTrace(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
