use thiserror::Error;

/// Errors raised across the toolkit.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("direction {index} has norm {norm}, not a unit vector")]
    NonUnitDirection { index: usize, norm: f64 },
    #[error("weight or density value {value} at index {index} is negative")]
    NegativeWeight { index: usize, value: f64 },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("measure has zero total mass")]
    NullMeasure,
    #[error("total mass {mass} exceeds the configured bound {bound}")]
    MassBoundExceeded { mass: f64, bound: f64 },
    #[error("quadrature under-resolved: refinement delta {delta} exceeds {tolerance}")]
    QuadratureUnderResolved { delta: f64, tolerance: f64 },
    #[error("dimension {0} is not supported here")]
    UnsupportedDimension(usize),
    #[error("unknown test function `{0}`")]
    UnknownFunction(String),
    #[error("bad parameter: {0}")]
    BadParameter(String),
    #[error("Jacobi exponent {0} must be finite and > -1")]
    BadExponent(f64),
    #[error("rule with {0} nodes exceeds the supported maximum of 512")]
    Overflow(usize),
    #[error("function is not C^2 at the evaluation point")]
    NotC2AtPoint,
    #[error("non-finite value encountered: {0}")]
    NonfiniteValue(String),
    #[error("argument outside the domain: {0}")]
    DomainError(String),
    #[error("function has no bounded support or decay; seminorm is not computable")]
    UnboundedSupport,
    #[error("starting point lies outside the domain")]
    StartOutsideDomain,
    #[error("degenerate walk radius {0}")]
    DegenerateRadius(f64),
    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
