use thiserror::Error;

/// Errors raised by tensor arithmetic, configuration, scheduling and simulation.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid shape: {0}")]
    Shape(String),

    #[error("non-finite value {value} at element {index}")]
    NonFinite { index: usize, value: f32 },

    #[error("scale must be positive and finite, got {0}")]
    BadScale(f32),

    #[error("int32 accumulator overflow at element {0}")]
    Overflow(usize),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("invalid hyper-parameters: {0}")]
    Params(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("out of memory: region `{region}` needs {needed} bytes, {available} available")]
    OutOfMemory {
        region: String,
        needed: u64,
        available: u64,
    },

    #[error("scheduling error: {0}")]
    Schedule(String),

    #[error("schedule has {} conflict(s); first: {}", .0.len(), .0.first().map(String::as_str).unwrap_or(""))]
    Conflicts(Vec<String>),

    #[error("runtime hazard at cycle {cycle}: {detail}")]
    Hazard { cycle: u64, detail: String },

    #[error("uninitialized read of `{tensor}` by `{node}` at cycle {cycle}")]
    UninitializedRead {
        tensor: String,
        node: String,
        cycle: u64,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
