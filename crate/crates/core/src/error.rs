use thiserror::Error;

/// Errors raised anywhere in the library.
///
/// Variants are grouped so the command-line front end can map them onto
/// distinct exit statuses (see [`AdmError::category`]).
#[derive(Debug, Error)]
pub enum AdmError {
    #[error("invalid kernel parameter `{name}` = {value}: {reason}")]
    KernelParameter {
        name: String,
        value: f64,
        reason: &'static str,
    },

    #[error("time grid is not uniformly spaced (step {expected} at index 1, found {found} at index {index})")]
    NonUniformGrid {
        index: usize,
        expected: f64,
        found: f64,
    },

    #[error("kernel conversion failed: {0}")]
    Conversion(String),

    #[error("conversion failed at time index {index}: {source}")]
    ConversionAt {
        index: usize,
        #[source]
        source: Box<AdmError>,
    },

    #[error("model error: {0}")]
    Model(String),

    #[error("inference error at t = {step}: {reason}")]
    Inference { step: usize, reason: String },

    #[error("initialization error: {0}")]
    Init(String),

    #[error("learning error: {0}")]
    Learning(String),

    #[error("EM iteration {iteration} failed: {source}")]
    Iteration {
        iteration: usize,
        #[source]
        source: Box<AdmError>,
    },

    #[error("GP oracle error: {0}")]
    Oracle(String),

    #[error("bad magic bytes {found:?}, expected {expected:?}")]
    BadMagic { found: [u8; 4], expected: [u8; 4] },

    #[error("unsupported format version {found} (supported: {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },

    #[error("truncated file: expected {expected} bytes, found {actual}")]
    Truncated { expected: u64, actual: u64 },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("malformed input: {0}")]
    Malformed(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Coarse classification used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    Data,
    Numerical,
    Io,
}

impl AdmError {
    pub fn category(&self) -> ErrorCategory {
        use AdmError::*;
        match self {
            Config(_) | KernelParameter { .. } => ErrorCategory::Config,
            NonUniformGrid { .. }
            | BadMagic { .. }
            | UnsupportedVersion { .. }
            | Truncated { .. }
            | DimensionMismatch(_)
            | Malformed(_)
            | Init(_) => ErrorCategory::Data,
            Conversion(_) | Model(_) | Inference { .. } | Learning(_) | Oracle(_) => {
                ErrorCategory::Numerical
            }
            ConversionAt { source, .. } | Iteration { source, .. } => source.category(),
            Io(_) => ErrorCategory::Io,
        }
    }
}

pub type Result<T, E = AdmError> = std::result::Result<T, E>;
