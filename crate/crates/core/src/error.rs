use alloc::string::String;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("transition field `{0}` is not finite")]
    NonFinite(&'static str),
    #[error("transition `{field}` has dimension {got}, expected {expected}")]
    Dimension {
        field: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("requested {requested} samples from a buffer holding {available}")]
    InsufficientData { requested: usize, available: usize },
    #[error("loss evaluated on an empty batch")]
    EmptyBatch,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("parameter manifest mismatch: {0}")]
    Manifest(String),
    #[error("observer failed: {0}")]
    Observer(String),
}

pub type Result<T> = core::result::Result<T, Error>;
