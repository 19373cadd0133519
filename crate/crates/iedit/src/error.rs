use thiserror::Error;

/// Errors surfaced by the editing pipeline and the evaluation harness.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {ctx}: expected {expected}, got {got}")]
    ShapeMismatch {
        ctx: &'static str,
        expected: String,
        got: String,
    },

    #[error("attention over an empty context (no key rows)")]
    EmptyContext,

    #[error("configuration error: {0}")]
    Config(String),

    #[error("unknown word {word:?}; vocabulary: {vocabulary}")]
    UnknownToken { word: String, vocabulary: String },

    #[error("unknown concept label {0:?}")]
    UnknownConcept(String),

    #[error("degenerate mask: no pixel selected")]
    DegenerateMask,

    #[error("non-finite value encountered in {ctx} at step {step}")]
    NonFinite { ctx: &'static str, step: usize },

    #[error("archive error: {0}")]
    Archive(String),

    #[error(
        "artifact is incompatible with the loaded base: {reason} \
         (pass force=true to override)"
    )]
    IncompatibleArtifact { reason: String },

    #[error("invalid benchmark instance {id:?}: {reason}")]
    InvalidInstance { id: String, reason: String },

    #[error("backend {0:?} is not available in this build")]
    BackendUnavailable(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("png error: {0}")]
    Png(String),
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
