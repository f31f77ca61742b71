use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("sequence `{id}`, field `{field}`: {msg}")]
    Validation { id: String, field: String, msg: String },

    #[error("schema: {0}")]
    Schema(String),

    #[error("configuration: {0}")]
    Config(String),

    #[error("degenerate data: {0}")]
    Degenerate(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("attention row {0} has no allowed positions and is not padding")]
    EmptyAttentionRow(usize),

    #[error("loss has no valid positions")]
    NoValidPositions,

    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("non-finite loss during {0}")]
    NonFiniteLoss(String),

    #[error("mask: {0}")]
    Mask(String),

    #[error("generator: {0}")]
    Generator(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn in_stage(self, stage: &str) -> Self {
        Error::Stage { stage: stage.to_string(), source: Box::new(self) }
    }
}
