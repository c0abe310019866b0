use thiserror::Error;

/// Errors raised by the engine, the environments and the harness.
///
/// The `Display` strings start with a stable kebab-case tag so that CLI
/// diagnostics can be matched by scripts.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("horizon-too-small: T = {0}, need T >= 3")]
    HorizonTooSmall(u64),
    #[error("invalid-context: {0}")]
    InvalidContext(String),
    #[error("invalid-item: {0}")]
    InvalidItem(String),
    #[error("duplicate-item: id {0}")]
    DuplicateItem(u64),
    #[error("empty-region")]
    EmptyRegion,
    #[error("no-items")]
    NoItems,
    #[error("invalid-reward: {0} is outside [0, 1]")]
    InvalidReward(f64),
    #[error("protocol: {0}")]
    Protocol(String),
    #[error("invalid-config: {0}")]
    InvalidConfig(String),
    #[error("config-mismatch: {0}")]
    ConfigMismatch(String),
    #[error("invariant: {0}")]
    Invariant(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("io: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
