use std::path::PathBuf;

/// Every failure the library can report.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("need at least 8 correspondences, got {0}")]
    TooFewCorrespondences(usize),
    #[error("degenerate point configuration: {0}")]
    DegenerateConfiguration(String),
    #[error("index {index} out of range for {len} tokens")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("degenerate epipolar line (point coincides with the epipole)")]
    DegenerateLine,
    #[error("invalid patch grid: {0}")]
    InvalidGrid(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("{path}: {source}")]
    IoAt {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic bytes, not an MVFT file")]
    BadMagic,
    #[error("unsupported MVFT version {0}")]
    VersionMismatch(u32),
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },
    #[error("invalid tensor: {0}")]
    InvalidTensor(String),
    #[error("schema error: {0}")]
    Schema(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("training split contains anomalous sample {0}")]
    AnomalousTrainSample(String),

    #[error("degenerate camera rig: {0}")]
    DegenerateRig(String),

    #[error("no mask for view pair ({0}, {1})")]
    MissingMaskPair(usize, usize),
    #[error("attention cache does not match gradient: {0}")]
    StaleCache(String),

    #[error("k-means needs at least {k} points, got {points}")]
    TooFewPoints { points: usize, k: usize },
    #[error("no support token has an epipolar correspondent")]
    NoEligibleSupportToken,
    #[error("training split is empty")]
    EmptyTrainSplit,

    #[error("view {0} has no source tokens")]
    EmptyView(usize),
    #[error("memory bank for view {0} is empty")]
    EmptyBank(usize),

    #[error("scores contain a single class; AUROC undefined")]
    SingleClass,
    #[error("scores contain no positive label; AP undefined")]
    NoPositives,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io_at(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::IoAt {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(context: &str, err: &serde_json::Error) -> Self {
        Error::Schema(format!(
            "{context}: {err} (line {}, column {})",
            err.line(),
            err.column()
        ))
    }

    /// Whether the error comes from the filesystem rather than from content.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io(_) | Error::IoAt { .. })
    }

    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::Numeric(_))
    }
}
