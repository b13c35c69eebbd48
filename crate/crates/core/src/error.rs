use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("matrix is not positive definite")]
    NotPositiveDefinite,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("damping factor {0} outside (0, 1]")]
    InvalidAlpha(f64),
    #[error("argument outside the domain: {0}")]
    DomainError(String),
    #[error("halton dimension {0} exceeds the available prime bases")]
    DimensionTooLarge(usize),
    #[error("quasi-random table exhausted: requested {requested}, table holds {available}")]
    TableExhausted { requested: usize, available: usize },
    #[error("zero acceptance at site {site} after {draws} simulations")]
    ZeroAcceptance { site: usize, draws: u64 },
    #[error("site update failed at site {site} and the failure policy is abort")]
    AbortedOnFailure { site: usize },
    #[error("every site update in pass {pass} was refused")]
    TooManySkips { pass: usize },
    #[error("invalid block length {l} for {n} observations")]
    InvalidBlockLength { n: usize, l: usize },
    #[error("latent process is not stationary (rho = {0})")]
    NonStationary(f64),
    #[error("projection matrix yields a singular marginal covariance")]
    SingularProjection,
    #[error("hybrid sample for site {0} carries no weight")]
    EmptyHybridSample(usize),
    #[error("MCMC-ABC chain accepted no move in the first {0} iterations")]
    StuckChain(usize),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}
