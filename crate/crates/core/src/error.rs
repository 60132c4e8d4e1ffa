use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// An operand had the wrong extents for the operation.
    #[error("shape error in {op} ({operand}): {detail}")]
    Shape {
        op: &'static str,
        operand: String,
        detail: String,
    },

    #[error("data error: {0}")]
    Data(String),

    /// Every violated configuration constraint, one per entry.
    #[error("invalid configuration: {}", .0.join("; "))]
    Config(Vec<String>),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("parameter `{0}` has no gradient")]
    MissingGradient(String),

    #[error("non-finite loss at step {step} (trace of totals: {trace:?})")]
    NonFinite { step: usize, trace: Vec<f64> },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: cannot decode image: {detail}")]
    Image { path: PathBuf, detail: String },

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("checkpoint config does not match the target network: {0}")]
    CheckpointConfig(String),

    #[error("checkpoint parameter names do not match the network: {0}")]
    CheckpointNames(String),

    #[error("checkpoint payload truncated: need {needed} bytes, found {found}")]
    CheckpointPayload { needed: usize, found: usize },

    #[error("malformed checkpoint: {0}")]
    CheckpointFormat(String),
}

impl Error {
    pub fn shape(op: &'static str, operand: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            operand: operand.into(),
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
