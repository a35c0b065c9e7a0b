use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line} (dialogue {dialogue}): speakers do not alternate at utterance {utterance}")]
    Alternation {
        line: usize,
        dialogue: usize,
        utterance: usize,
    },
    #[error("invalid dialogue: {0}")]
    InvalidDialogue(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("vocabulary mismatch: expected {expected}, found {found}")]
    VocabMismatch { expected: String, found: String },
    #[error(transparent)]
    Neural(#[from] charkeeper_neural::NeuralError),
}

pub type Result<T> = std::result::Result<T, CoreError>;
