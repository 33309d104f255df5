use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed questionnaire: {0}")]
    MalformedQuestionnaire(String),

    #[error("question {question}: {reason}")]
    InvalidQuestion { question: String, reason: String },

    #[error("duplicate question id {0}")]
    DuplicateQuestion(String),

    #[error("unknown question {0}")]
    UnknownQuestion(String),

    #[error("bin edges must be strictly ascending: {0:?}")]
    InvalidBinEdges(Vec<f64>),

    #[error("label set has {have} labels but {need} are required")]
    LabelSetTooShort { have: usize, need: usize },

    #[error("invalid label set: {0}")]
    InvalidLabelSet(String),

    #[error("invalid permutation {perm:?} for {k} answers")]
    InvalidPermutation { perm: Vec<usize>, k: usize },

    #[error("unknown prompt style {0}")]
    UnknownStyle(String),

    #[error("answered prefix is inconsistent: {0}")]
    InvalidPrefix(String),

    #[error("prompt uses {tokens} tokens, budget is {budget}")]
    TokenBudgetExceeded { tokens: usize, budget: usize },

    #[error("invalid distribution for {question}: {reason}")]
    InvalidDistribution { question: String, reason: String },

    #[error("distribution needs at least 2 categories, got {0}")]
    DegenerateSupport(usize),

    #[error("mismatched supports: {0}")]
    SupportMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("no candidate label observed in backend response")]
    UnusableQuery,

    #[error("backend {backend}: {message}")]
    Backend { backend: String, message: String },

    #[error("HTTP request failed permanently after {attempts} attempts: {message}")]
    Http { attempts: u32, message: String },

    #[error("fixture has no record for key {0}")]
    FixtureMiss(String),

    #[error("synthetic model has no content scores for question {0}")]
    MissingScores(String),

    #[error("label {0} is not part of the label set")]
    LabelAbsent(String),

    #[error("per-permutation records were not retained")]
    RecordsDropped,

    #[error("reference table: {0}")]
    Table(String),

    #[error("no rows left after filtering on subgroup {0}")]
    EmptySubgroup(String),

    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(String),

    #[error("discriminator: {0}")]
    Discriminator(String),

    #[error("i/o error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
