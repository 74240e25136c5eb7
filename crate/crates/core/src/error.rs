use alloc::string::String;

/// Errors raised by the synthesis engine.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("non-finite value at flat index {0}")]
    NonFinite(usize),
    #[error("mask is empty")]
    EmptyMask,
    #[error("masks overlap at voxel {0}")]
    OverlappingMasks(usize),
    #[error("time step {t} outside {lo}..={hi}")]
    StepOutOfRange { t: usize, lo: usize, hi: usize },
    #[error("denoiser contract violated: {0}")]
    Contract(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("unknown method `{name}`; valid methods: {valid}")]
    UnknownMethod { name: String, valid: String },
}

pub type Result<T> = core::result::Result<T, Error>;
