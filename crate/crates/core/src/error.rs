use thiserror::Error;

/// Errors shared by every module in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid polygon: {0}")]
    InvalidPolygon(String),

    /// An inward offset ate the whole polygon (margin at or beyond the inradius).
    #[error("polygon collapsed under offset of {margin} px")]
    PolygonCollapsed { margin: f64 },

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParam { name: &'static str, reason: String },

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("training diverged at step {step} (non-finite loss or gradient)")]
    Diverged { step: usize },

    #[error("no network available for loss kind `{0}`")]
    MissingNet(String),

    #[error("unsupported format version {found}, expected {expected}")]
    FormatVersion { found: u32, expected: u32 },

    #[error("could not place instance after {attempts} attempts")]
    PlacementFailed { attempts: usize },

    #[error("dataset line {line}: {reason}")]
    Dataset { line: usize, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("serialization: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
