use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("schema error: column `{0}` not found")]
    MissingColumn(String),

    #[error("parse error at data row {row}, column `{column}`: {reason}")]
    Parse { row: usize, column: String, reason: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("degenerate knots: {0}")]
    DegenerateKnots(String),

    #[error("derivative of order {order} unsupported for spline of degree {degree}")]
    UnsupportedDerivative { order: usize, degree: usize },

    #[error("weighting error: {0}")]
    Weighting(String),

    #[error(
        "residual is not pointwise smooth in the sieve coefficients; \
         use SQLR or the slope variance estimator for this model"
    )]
    NonSmoothResidual,

    #[error("degenerate variance: {0}")]
    DegenerateVariance(String),

    #[error("restricted fit infeasible: |phi - phi0| = {violation:e}")]
    Infeasible { violation: f64 },

    #[error("slope variance degenerate: criterion gap {gap:e} is not positive")]
    SlopeDegenerate { gap: f64 },

    #[error("variance must be positive, got {0}")]
    NonPositiveVariance(f64),

    #[error("fits come from different models")]
    MismatchedFits,

    #[error("bootstrap unstable: {failures} of {replications} replications failed")]
    BootstrapUnstable { failures: usize, replications: usize },
}

impl Error {
    /// True for failures of the numerical pipeline, as opposed to bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonSmoothResidual
                | Error::DegenerateVariance(_)
                | Error::Infeasible { .. }
                | Error::SlopeDegenerate { .. }
                | Error::NonPositiveVariance(_)
                | Error::BootstrapUnstable { .. }
                | Error::DegenerateKnots(_)
        )
    }
}
