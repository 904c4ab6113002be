//! Crate-wide error type.

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Operand shapes do not conform for the named operation.
    #[error("{op}: shape mismatch: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A configuration value is out of its legal range.
    #[error("invalid config: {0}")]
    Config(String),

    /// A runtime input (token, image, grid) violates a precondition.
    #[error("invalid input: {0}")]
    Input(String),

    /// Non-finite values where finite ones are required.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// An API contract was violated (e.g. non-scalar loss, empty mask).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A capacity limit (serial numbers, sequence length) was exceeded.
    #[error("capacity exceeded: {0}")]
    Capacity(String),

    /// Internally inconsistent data (e.g. duplicate serial numbers).
    #[error("inconsistent data: {0}")]
    Consistency(String),

    /// Training produced a non-finite loss.
    #[error("training diverged at epoch {epoch}: loss is not finite")]
    Diverged { epoch: usize },

    /// Checkpoint file does not start with the expected magic bytes.
    #[error("bad checkpoint magic: expected \"FVID\", found {found:?}")]
    BadMagic { found: [u8; 4] },

    /// Checkpoint format version is not supported by this build.
    #[error("unsupported checkpoint version {found} (this build reads version {supported})")]
    BadVersion { found: u8, supported: u8 },

    /// Checkpoint payload fails its integrity check (truncation, corruption).
    #[error("checkpoint checksum mismatch: file is truncated or corrupt")]
    BadChecksum,

    /// Checkpoint passed the checksum but its contents are malformed.
    #[error("malformed checkpoint: {0}")]
    CheckpointFormat(String),

    /// A config file line failed to parse.
    #[error("config parse error at line {line}: {message}")]
    ConfigParse { line: usize, message: String },

    /// A config file names a key this build does not know.
    #[error("unknown config key \"{key}\" at line {line}")]
    UnknownKey { line: usize, key: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}
