use thiserror::Error;

/// Errors raised across the crate.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("quadratic program is infeasible")]
    Infeasible,
    #[error("iteration limit of {0} reached")]
    MaxIterations(usize),
    #[error("matrix is not symmetric positive definite")]
    NotSpd,
    #[error("point lies outside the set (distance {0:.3e})")]
    NotInSet(f64),
    #[error("Hessian is not positive definite at the evaluation point")]
    SingularHessian,
    #[error("evaluation outside the function domain: {0}")]
    OutOfDomain(String),
    #[error("dual variable is negative")]
    NegativeDual,
    #[error("vector field failed at t = {t}: {message}")]
    FieldDomain { t: f64, message: String },
    #[error("plant is not asymptotically stable")]
    NotStable,
    #[error("state matrix is singular")]
    SingularA,
    #[error("plant did not settle within the time cap")]
    NoSettle,
    #[error("extremum seeking requires a scalar input")]
    NonScalarInput,
    #[error("inner model-based solve failed: {0}")]
    InnerSolveFailed(String),
    #[error("step QP is infeasible")]
    QpInfeasible,
    #[error("matrix is not Hurwitz")]
    NotHurwitz,
    #[error("power flow did not converge after {iterations} iterations (mismatch {mismatch:.3e})")]
    NoConvergence { iterations: usize, mismatch: f64 },
    #[error("power flow Jacobian is singular")]
    SingularJacobian,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("at t = {t}: {inner}")]
    AtTime { t: f64, inner: Box<Error> },
}

impl Error {
    /// Attaches the simulation time at which the error occurred.
    pub fn at_time(self, t: f64) -> Self {
        match self {
            e @ Error::AtTime { .. } => e,
            e => Error::AtTime { t, inner: Box::new(e) },
        }
    }

    /// The error without any time annotation.
    pub fn root(&self) -> &Error {
        match self {
            Error::AtTime { inner, .. } => inner.root(),
            e => e,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_dim(context: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            context,
            expected,
            found,
        })
    }
}
