use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: cannot decode image: {msg}")]
    Decode { path: PathBuf, msg: String },
    #[error("{path}: expected 8-bit RGB, found {found}")]
    NotRgb { path: PathBuf, found: String },
    #[error("invalid image: {0}")]
    InvalidImage(String),
    #[error("orphan file {name}: no partner in {missing_dir}")]
    Orphan { name: String, missing_dir: PathBuf },
    #[error("geometry mismatch: {0}")]
    Geometry(String),
    #[error("image {height}x{width} is smaller than the {window}x{window} window")]
    TooSmall {
        height: usize,
        width: usize,
        window: usize,
    },
    #[error("missing component for composition mode {mode}: {component}")]
    MissingComponent {
        mode: &'static str,
        component: &'static str,
    },
    #[error("corrupt file: {0}")]
    Corrupt(String),
    #[error("architecture fingerprint mismatch: file has {found:016x}, config expects {expected:016x}")]
    Fingerprint { expected: u64, found: u64 },
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("misaligned detector reports: {derain} vs {clear} entries")]
    MisalignedReports { derain: usize, clear: usize },
    #[error("no matched labels; confidence bias is undefined")]
    NoMatchedLabels,
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("detector failed on sample {sample}: {msg}")]
    Detector { sample: String, msg: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
