use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument lies outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("degenerate precession axis: f0 + A_parallel and A_perp are both zero")]
    DegenerateAxis,

    #[error("inconsistent inputs: {0}")]
    Inconsistent(String),

    #[error("singular geometry: {0}")]
    Singular(String),

    #[error("alias order m = {m} is odd; only even orders are supported")]
    UnsupportedAliasOrder { m: u64 },

    #[error("integrator step {step} us exceeds the bound {required} us")]
    StepTooLarge { step: f64, required: f64 },

    #[error("azimuth ill-conditioned: transverse component {transverse:.3e}")]
    IllConditionedAzimuth { transverse: f64 },

    #[error("fit failed: {reason} (best residual {best_residual:.3e})")]
    FitFailed { reason: String, best_residual: f64 },

    #[error("unidentifiable: {0}")]
    Unidentifiable(String),

    #[error("invalid scenario field `{path}`: {message}")]
    Scenario { path: String, message: String },

    #[error("parse error at line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn scenario(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Scenario {
            path: path.into(),
            message: message.into(),
        }
    }

    /// True when the failure is numerical rather than caused by bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::FitFailed { .. }
                | Error::IllConditionedAzimuth { .. }
                | Error::Singular(_)
                | Error::Unidentifiable(_)
                | Error::DegenerateAxis
        )
    }
}
