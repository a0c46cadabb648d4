use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("grid resolution too coarse: spacing {spacing} exceeds {limit} (length scale / 4)")]
    ResolutionTooCoarse { spacing: f64, limit: f64 },

    #[error("kernel is not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("support radius {radius} plus margin does not fit inside box of half-width {extent}")]
    CutoffExceedsBox { radius: f64, extent: f64 },

    #[error("mode {index} has non-zero values outside the support ball")]
    ModeSupportViolation { index: usize },

    #[error("coefficient law `{0}` lacks finite exponential moments")]
    UnboundedLaw(String),

    #[error("moment of order {k} is not available for {kernel} models")]
    UnsupportedMoment { k: usize, kernel: &'static str },

    #[error("invalid direction: {0}")]
    InvalidDirection(String),

    #[error("non-finite input: {0}")]
    NonFinite(&'static str),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("empty ensemble")]
    EmptyEnsemble,

    #[error("frame invariant broken: complement has dimension {found}, expected {expected}")]
    DimensionDeficit { expected: usize, found: usize },

    #[error("sampling violates Nyquist: radial spacing {dr} exceeds half the grid spacing {half_h}")]
    NyquistViolation { dr: f64, half_h: f64 },

    #[error("basis is not orthonormal: Gram deviation {0:e}")]
    NotOrthonormal(f64),

    #[error("CFL condition violated: time step {ht} exceeds space step {hx}")]
    CflViolation { ht: f64, hx: f64 },

    #[error("detector window contaminated: {0}")]
    WindowContaminated(String),

    #[error("config key `{key}`: {reason}")]
    Config { key: String, reason: String },

    #[error("malformed {format} data: {reason}")]
    Format { format: &'static str, reason: String },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter { name, reason: reason.into() }
    }

    pub fn config(key: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config { key: key.into(), reason: reason.into() }
    }

    pub(crate) fn format(format: &'static str, reason: impl Into<String>) -> Self {
        Error::Format { format, reason: reason.into() }
    }

    /// True for errors caused by bad input rather than the environment.
    pub fn is_validation(&self) -> bool {
        !matches!(self, Error::Io(_))
    }
}
