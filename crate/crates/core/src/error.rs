use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed tile id {label:?}: unexpected character at position {position}")]
    TileId { label: String, position: usize },

    #[error("{path}: {message}")]
    Csv { path: PathBuf, message: String },

    #[error("invalid calendar: {0}")]
    Calendar(String),

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("rank-deficient design at pixel ({row}, {col}): {message}")]
    RankDeficient { row: usize, col: usize, message: String },

    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("config: {}", .0.join("; "))]
    Config(Vec<String>),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("container format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Shape {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    /// Short machine-readable category used by the CLI error line.
    pub fn code(&self) -> &'static str {
        match self {
            Error::TileId { .. } => "tile_id",
            Error::Csv { .. } => "csv",
            Error::Calendar(_) => "calendar",
            Error::DegenerateGeometry(_) => "geometry",
            Error::RankDeficient { .. } => "rank_deficient",
            Error::Shape { .. } => "shape",
            Error::Invalid(_) => "invalid",
            Error::Config(_) => "config",
            Error::Checkpoint(_) => "checkpoint",
            Error::Format(_) => "format",
            Error::Io(_) => "io",
        }
    }
}
