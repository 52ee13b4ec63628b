use thiserror::Error;

pub type Result<T, E = ForgeError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum ForgeError {
    #[error("invalid input: {0}")]
    Input(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{role} service failed: {message}")]
    Service { role: String, message: String },
    #[error("record {id}: unparseable reply: {raw:?}")]
    Pipeline { id: String, raw: String },
    #[error("source '{source_name}' has {available} entries, {requested} requested")]
    SourceTooSmall { source_name: String, requested: usize, available: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}
