use thiserror::Error;

use crate::layer::LossTrace;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("rank deficient: smallest singular value {0:e} is at or below 1e-12")]
    RankDeficient(f64),

    #[error("dense size of {requested} elements exceeds guard of {guard}")]
    GuardExceeded { requested: u128, guard: u128 },

    #[error("out of range: {0}")]
    OutOfRange(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("singular value decomposition failed to converge on a {rows}x{cols} matrix")]
    SvdFailed { rows: usize, cols: usize },

    #[error("{0} factorization failed")]
    FactorizationFailed(String),

    #[error("loss became non-finite at step {step}")]
    NonFiniteLoss { step: usize, trace: Box<LossTrace> },

    #[error("bad magic \"{}\", expected \"QTEN\"", String::from_utf8_lossy(.0).escape_debug())]
    BadMagic([u8; 4]),

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u8),

    #[error("unsupported dtype code {0}")]
    UnsupportedDtype(u8),

    #[error("truncated file: expected {expected} bytes, found {found}")]
    Truncated { expected: u64, found: u64 },

    #[error("malformed file: {0}")]
    Malformed(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures caused by non-finite arithmetic rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonFinite(_) | Error::NonFiniteLoss { .. } | Error::SvdFailed { .. } | Error::FactorizationFailed(_)
        )
    }
}

pub(crate) fn mismatch(msg: impl Into<String>) -> Error {
    Error::DimensionMismatch(msg.into())
}
