//! Crate-wide error type.
//!
//! One enum covers every failure the library can produce. Variants are
//! grouped into families (`ErrorFamily`) so callers such as the CLI can map
//! whole families to exit codes without matching on individual variants.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    // --- configuration ---
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    // --- data and sample validation ---
    #[error("unknown class `{0}`")]
    UnknownClass(String),
    #[error("ground-truth volume must be positive, got {0} mL")]
    NonPositiveVolume(f64),
    #[error("stereo pair references the same frame index {0} twice")]
    DegenerateFramePair(usize),
    #[error("sequence `{id}` has {frames} frames; at least {needed} required")]
    SequenceTooShort { id: String, frames: usize, needed: usize },
    #[error("no samples in dataset")]
    DataEmpty,
    #[error("class `{0}` has no training samples")]
    EmptyClass(String),
    #[error("duplicate item id `{0}`")]
    DuplicateItem(String),
    #[error("prediction set needs at least {needed} items, got {got}")]
    TooFewItems { needed: usize, got: usize },
    #[error("length mismatch: {left} vs {right} ({context})")]
    LengthMismatch { left: usize, right: usize, context: String },
    #[error("malformed record at {path}:{line}: {message}")]
    MalformedRecord { path: PathBuf, line: usize, message: String },
    #[error("no nutrient profile for food code `{0}`")]
    UnknownFoodCode(String),

    // --- model ---
    #[error("dimension mismatch: expected {expected}, got {got} ({context})")]
    DimMismatch { expected: usize, got: usize, context: String },
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("checkpoint incompatible: {0}")]
    CheckpointMismatch(String),
    #[error("class index {index} out of range for {classes} classes")]
    ClassIndexOutOfRange { index: usize, classes: usize },

    // --- mesh ---
    #[error("mesh has no faces")]
    EmptyMesh,
    #[error("mesh is not watertight: {0}")]
    OpenMesh(String),
    #[error("invalid mesh: {0}")]
    InvalidMesh(String),

    // --- encoder backends ---
    #[error("encoder backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("failed to decode image {path}: {message}")]
    DecodeFailure { path: PathBuf, message: String },
    #[error("prompt is empty")]
    EmptyPrompt,
    #[error("prompt template invalid: {0}")]
    InvalidTemplate(String),

    // --- external model client ---
    #[error("response not parseable as a volume: {0}")]
    UnparseableResponse(String),
    #[error("query missing required context text")]
    MissingContext,
    #[error("query carries context text but mode does not accept one")]
    UnexpectedContext,
    #[error("no recorded response for query key {0}")]
    FixtureMiss(String),
    #[error("transport failed after {attempts} attempts: {message}")]
    Transport { attempts: u32, message: String },

    // --- io ---
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("serialization error at {path}: {message}")]
    Serde { path: PathBuf, message: String },
}

/// Coarse grouping used for exit codes and machine-parsable error lines.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorFamily {
    Config,
    Data,
    Model,
    Mesh,
    Backend,
    Client,
    Io,
}

impl ErrorFamily {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorFamily::Config => 2,
            ErrorFamily::Data => 3,
            ErrorFamily::Model => 4,
            ErrorFamily::Mesh => 5,
            ErrorFamily::Backend => 6,
            ErrorFamily::Client => 7,
            ErrorFamily::Io => 8,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ErrorFamily::Config => "config",
            ErrorFamily::Data => "data",
            ErrorFamily::Model => "model",
            ErrorFamily::Mesh => "mesh",
            ErrorFamily::Backend => "backend",
            ErrorFamily::Client => "client",
            ErrorFamily::Io => "io",
        }
    }
}

impl Error {
    pub fn family(&self) -> ErrorFamily {
        use Error::*;
        match self {
            InvalidConfig(_) | InvalidArgument(_) => ErrorFamily::Config,
            UnknownClass(_)
            | NonPositiveVolume(_)
            | DegenerateFramePair(_)
            | SequenceTooShort { .. }
            | DataEmpty
            | EmptyClass(_)
            | DuplicateItem(_)
            | TooFewItems { .. }
            | LengthMismatch { .. }
            | MalformedRecord { .. }
            | UnknownFoodCode(_) => ErrorFamily::Data,
            DimMismatch { .. }
            | NonFiniteLoss { .. }
            | NonFinite(_)
            | CheckpointMismatch(_)
            | ClassIndexOutOfRange { .. } => ErrorFamily::Model,
            EmptyMesh | OpenMesh(_) | InvalidMesh(_) => ErrorFamily::Mesh,
            BackendUnavailable(_) | DecodeFailure { .. } | EmptyPrompt | InvalidTemplate(_) => {
                ErrorFamily::Backend
            }
            UnparseableResponse(_)
            | MissingContext
            | UnexpectedContext
            | FixtureMiss(_)
            | Transport { .. } => ErrorFamily::Client,
            Io { .. } | Serde { .. } => ErrorFamily::Io,
        }
    }

    /// Wraps an io error with the path it occurred at.
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Wraps a serde error with the path it occurred at.
    pub fn serde(path: impl Into<PathBuf>, err: impl std::fmt::Display) -> Self {
        Error::Serde { path: path.into(), message: err.to_string() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn families_have_distinct_nonzero_exit_codes() {
        let all = [
            ErrorFamily::Config,
            ErrorFamily::Data,
            ErrorFamily::Model,
            ErrorFamily::Mesh,
            ErrorFamily::Backend,
            ErrorFamily::Client,
            ErrorFamily::Io,
        ];
        let mut codes: Vec<i32> = all.iter().map(|f| f.exit_code()).collect();
        assert!(codes.iter().all(|&c| c != 0));
        codes.sort_unstable();
        codes.dedup();
        assert_eq!(codes.len(), all.len());
    }

    #[test]
    fn display_includes_key_facts() {
        let e = Error::SequenceTooShort { id: "item-3".into(), frames: 2, needed: 3 };
        let msg = e.to_string();
        assert!(msg.contains("item-3"));
        assert!(msg.contains('2'));
        assert!(msg.contains('3'));
    }
}
