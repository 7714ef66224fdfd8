use std::path::PathBuf;

/// Every failure the engine can report.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimMismatch { expected: usize, found: usize },

    #[error("degenerate vector (norm <= 1e-12)")]
    DegenerateVector,

    #[error("non-finite value at flat index {0}")]
    NonFinite(usize),

    #[error("length mismatch: {left} predictions vs {right} labels")]
    LengthMismatch { left: usize, right: usize },

    #[error("cannot evaluate an empty set")]
    EmptyEvaluation,

    #[error("malformed prompt template {template:?}: {reason}")]
    MalformedTemplate { template: String, reason: &'static str },

    #[error("invalid temperature {0}: must be finite and > 0")]
    InvalidTemperature(f64),

    #[error("invalid gamma {0}: must lie in [0, 1]")]
    InvalidGamma(f64),

    #[error(
        "no pseudo-labels retained at gamma = {gamma} (max observed confidence {max_confidence:.6})"
    )]
    NoRetainedSamples { gamma: f64, max_confidence: f64 },

    #[error("domain index {index} out of range ({count} domains)")]
    DomainIndexOutOfRange { index: usize, count: usize },

    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),

    #[error("bad magic in {path}: expected {expected:?}, found {found:?}")]
    BadMagic {
        path: PathBuf,
        expected: [u8; 4],
        found: [u8; 4],
    },

    #[error("unsupported format version {version} in {path}")]
    UnsupportedVersion { path: PathBuf, version: u32 },

    #[error("truncated file {path}: needed {needed} bytes, found {found}")]
    TruncatedFile {
        path: PathBuf,
        needed: u64,
        found: u64,
    },

    #[error("payload size mismatch in {path}: header implies {expected} bytes, found {found}")]
    SizeMismatch {
        path: PathBuf,
        expected: u64,
        found: u64,
    },

    #[error("missing table for domain {domain:?} in {path}")]
    MissingDomainTable { domain: String, path: PathBuf },

    #[error("invalid manifest: {0}")]
    ManifestInvalid(String),

    #[error("split {0:?} has no labels")]
    MissingLabels(String),

    #[error(
        "gradient mismatch at class {class}, coordinate {coord}: analytic {analytic:e}, finite difference {numeric:e} (relative error {rel_err:e})"
    )]
    GradientMismatch {
        class: usize,
        coord: usize,
        analytic: f64,
        numeric: f64,
        rel_err: f64,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dim(expected: usize, found: usize) -> Self {
        Error::DimMismatch { expected, found }
    }

    /// Process exit code for the command-line tool.
    ///
    /// 1 = validation error, 2 = runtime data error, 3 = verification failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidTemperature(_)
            | Error::InvalidGamma(_)
            | Error::ConfigInvalid(_)
            | Error::ManifestInvalid(_)
            | Error::MalformedTemplate { .. }
            | Error::DomainIndexOutOfRange { .. } => 1,
            Error::GradientMismatch { .. } => 3,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
