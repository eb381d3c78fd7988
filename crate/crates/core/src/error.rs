use thiserror::Error;

/// Crate-wide error type.
#[derive(Error, Debug)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left} vs {right}")]
    Dimension {
        op: &'static str,
        left: String,
        right: String,
    },
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("non-finite value in `{what}` at step {step}")]
    NonFinite { step: usize, what: String },
    #[error("language generation failed: {0}")]
    Generation(String),
    #[error("split construction failed: {0}")]
    Split(String),
    #[error("unknown phoneme id {id} for language {lang}")]
    Vocabulary { lang: u32, id: u32 },
    #[error("alignment error: {0}")]
    Alignment(String),
    #[error("duration error: {0}")]
    Duration(String),
    #[error("coverage error: phonemes missing from labeled data: {missing:?}")]
    Coverage { missing: Vec<u32> },
    #[error("calibration error: {0}")]
    Calibration(String),
    #[error("training error: {0}")]
    Training(String),
    #[error("metric error: {0}")]
    Metric(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("format error in {path}: {reason}")]
    Format { path: String, reason: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn dimension(op: &'static str, left: impl std::fmt::Display, right: impl std::fmt::Display) -> Self {
        Error::Dimension {
            op,
            left: left.to_string(),
            right: right.to_string(),
        }
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
