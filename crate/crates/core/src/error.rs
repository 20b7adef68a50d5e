use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("missing column `{0}`")]
    MissingColumn(String),

    #[error("{file}:{line}: malformed row: {reason}")]
    MalformedRow {
        file: String,
        line: u64,
        reason: String,
    },

    #[error("duplicate patient id `{0}`")]
    DuplicatePatientId(String),

    #[error("unknown signal `{0}`")]
    UnknownSignal(String),

    #[error("cannot reach target prevalence {target}: bracket [{lo:.4}, {hi:.4}]")]
    InfeasiblePrevalence { target: f64, lo: f64, hi: f64 },

    #[error("too few samples per class: {0}")]
    TooFewPerClass(String),

    #[error("no baseline creatinine for patient `{0}` (CKD documented, no history)")]
    NoBaselineAvailable(String),

    #[error("outcome has a single class: {0}")]
    DegenerateOutcome(String),

    #[error("time series `{0}` is unusable")]
    SeriesUnusable(String),

    #[error("lab `{0}` has no observations")]
    EmptyLab(String),

    #[error("no PO2 or SpO2 available")]
    NoOxygenData,

    #[error("FiO2 must be positive, got {0}")]
    InvalidFio2(f64),

    #[error("cohort is empty")]
    EmptyCohort,

    #[error("IRLS did not converge after {iterations} iterations (deviance {deviance})")]
    NonConvergence { iterations: usize, deviance: f64 },

    #[error("rows are misaligned: {0}")]
    RowMisalignment(String),

    #[error("scores contain a single class")]
    SingleClass,

    #[error("bootstrap resample degenerate after {0} retries")]
    ResampleDegenerate(usize),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("report schema mismatch: {0}")]
    SchemaMismatch(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
