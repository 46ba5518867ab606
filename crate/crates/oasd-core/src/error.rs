use thiserror::Error;

/// Errors surfaced by the estimation pipeline.
#[derive(Debug, Error)]
pub enum OasdError {
    #[error("non-finite value at row {row}, column {column}")]
    NonFinite { row: usize, column: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("grid point y = {y} unusable: {reason}")]
    UnusableGridPoint { y: f64, reason: String },

    #[error("interval ({y1}, {y2}) not covered by the fitted grid [{lo}, {hi}]")]
    IntervalNotCovered { y1: f64, y2: f64, lo: f64, hi: f64 },

    #[error("no observations strictly inside ({y1}, {y2})")]
    EmptyInterval { y1: f64, y2: f64 },

    #[error("only {count} observations strictly inside ({y1}, {y2}); at least {min} required")]
    DegenerateInterval {
        y1: f64,
        y2: f64,
        count: usize,
        min: usize,
    },

    #[error("degenerate fit: {0}")]
    DegenerateFit(String),

    #[error("basis mismatch: {0}")]
    SpecMismatch(String),

    #[error("missing column {0:?} in input")]
    MissingColumn(String),

    #[error("could not parse cell at row {row}, column {column}: {value:?}")]
    BadCell {
        row: usize,
        column: String,
        value: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, OasdError>;
