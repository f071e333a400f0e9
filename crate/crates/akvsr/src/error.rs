use thiserror::Error;

#[derive(Error, Debug)]
pub enum AkvsrError {
    #[error("shape mismatch: {context}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        context: String,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("parameter error: {0}")]
    Parameter(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("contract error: {0}")]
    Contract(String),
    #[error("index error: frame {frame}: label {label} out of range (N = {n})")]
    IndexOutOfRange { frame: usize, label: usize, n: usize },
    #[error("range error: {0}")]
    Range(String),
    #[error("size error: {0}")]
    Size(String),
    #[error("integrity error: {0}")]
    Integrity(String),
    #[error("checkpoint version mismatch: found {found:?}, expected {expected:?}")]
    Version { found: String, expected: String },
    #[error("file error at {path}: {source}")]
    File {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, AkvsrError>;
