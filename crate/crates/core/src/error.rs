use thiserror::Error;

/// Errors produced anywhere in the engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("text is not tokenizable at byte offset {offset}")]
    UntokenizableText { offset: usize },

    #[error("invalid vocabulary: {0}")]
    InvalidVocab(String),

    #[error("invalid token sequence: {0}")]
    InvalidSequence(String),

    #[error("invalid logits: {0}")]
    InvalidLogits(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("no table row for context {context:?} and no default row")]
    MissingContext { context: Vec<u32> },

    #[error("state space exceeds the enumeration budget of {limit} states")]
    StateSpaceTooLarge { limit: usize },

    #[error("model does not support scoring (sampling-only endpoint)")]
    ScoringUnsupported,

    #[error("prefix has zero probability under the {model} guidance model")]
    ZeroSupport { model: &'static str },

    #[error("vocabulary mismatch: {0}")]
    VocabMismatch(String),

    #[error("token budget exceeded: {used} sampled tokens > cap {cap}")]
    BudgetExceeded { used: usize, cap: usize },

    #[error("support of {size} successors exceeds the branch budget {limit}")]
    SupportTooLarge { size: usize, limit: usize },

    #[error("request timed out")]
    Timeout,

    #[error("http status {0}")]
    HttpStatus(u16),

    #[error("rate limited after {attempts} attempts")]
    RateLimited { attempts: u32 },

    #[error("transport error: {0}")]
    Transport(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("fixture parse error at line {line}: {message}")]
    Fixture { line: usize, message: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
