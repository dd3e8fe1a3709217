use thiserror::Error;

use crate::geo::CellIndex;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("duplicate image id `{0}`")]
    DuplicateId(String),
    #[error("need at least 2 points to fit a principal frame, got {0}")]
    TooFewPoints(usize),
    #[error("point cloud has zero variance")]
    DegenerateCloud,
    #[error("bearing is undefined: image position coincides with the focal point")]
    UndefinedBearing,
    #[error("image `{0}` has no heading and panorama mode is off")]
    MissingHeading(String),
    #[error("label {label} out of range for a head with {classes} classes")]
    InvalidLabel { label: usize, classes: usize },
    #[error("{what} row {row} has norm {norm}, expected unit norm")]
    NotNormalized {
        what: &'static str,
        row: usize,
        norm: f64,
    },
    #[error("shape mismatch: {0}")]
    ShapeError(String),
    #[error("not enough classes to train: {lateral} lateral, {frontal} frontal")]
    NotEnoughClasses { lateral: usize, frontal: usize },
    #[error("missing ground truth for {} id(s): {}", .0.len(), preview(.0))]
    MissingGroundTruth(Vec<String>),
    #[error("no descriptor for id `{0}`")]
    MissingId(String),
    #[error("cell {0} not found")]
    MissingCell(CellIndex),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("malformed descriptor file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors caused by bad user input (files, flags, metadata), as
    /// opposed to a broken internal invariant.
    pub fn is_input_error(&self) -> bool {
        !matches!(
            self,
            Error::ShapeError(_) | Error::NotNormalized { .. } | Error::InvalidLabel { .. }
        )
    }
}

fn preview(ids: &[String]) -> String {
    const SHOWN: usize = 5;
    let mut s = ids.iter().take(SHOWN).cloned().collect::<Vec<_>>().join(", ");
    if ids.len() > SHOWN {
        s.push_str(", ...");
    }
    s
}
