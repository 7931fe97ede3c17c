//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced by the samplers and the exponential-family arithmetic.
#[derive(Debug, Error)]
pub enum Error {
    /// Removing a site from a global approximation left a non-positive
    /// precision at the given track index. Signals a corrupted or oversized
    /// site; the sweep engine responds by rebuilding the cluster and
    /// zeroing the site.
    #[error("cavity precision non-positive at index {index}")]
    NonPositiveCavityPrecision { index: usize },

    /// A normal-inverse-Wishart cavity lost normalizability (kappa, nu or
    /// scale matrix out of range).
    #[error("cavity not normalizable: {0}")]
    CavityNotNormalizable(&'static str),

    /// A tilted moment came back NaN or infinite.
    #[error("non-finite moment in site update")]
    NonFiniteMoment,

    /// A scatter-matrix update lost positive-definiteness even after
    /// re-symmetrization.
    #[error("matrix update lost positive definiteness")]
    NonSpdResult,

    /// The moment-matching residual for nu has no sign change over the
    /// search bracket; the supplied moments are inconsistent.
    #[error("nu root not bracketed during moment inversion")]
    RootNotBracketed,

    /// Moment inversion implied kappa <= 0 (M2 <= mu'M1).
    #[error("negative kappa in moment inversion")]
    NegativeKappa,

    /// An innovation covariance in the coupled-cluster filter is
    /// numerically singular.
    #[error("singular innovation covariance at t={t}")]
    SingularInnovation { t: usize },

    /// Every candidate cluster had weight -inf.
    #[error("all candidate clusters forbidden")]
    AllForbidden,

    #[error("length mismatch: {0}")]
    LengthMismatch(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures the sweep engine recovers from by rebuilding the
    /// cluster approximation and zeroing the offending site.
    pub fn is_cavity_failure(&self) -> bool {
        matches!(
            self,
            Error::NonPositiveCavityPrecision { .. } | Error::CavityNotNormalizable(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
