use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("no records")]
    NoRecords,
    #[error("duplicate path: {0}")]
    DuplicatePath(PathBuf),
    #[error("unknown keyword directory `{0}`")]
    UnknownKeyword(String),
    #[error("unknown subject {0}")]
    UnknownSubject(u32),
    #[error("duplicate subject {0}")]
    DuplicateSubject(u32),
    #[error("cell (subject {subject}, keyword {keyword}) has {count} records, need at least {min}")]
    CellTooSmall { subject: u32, keyword: String, count: usize, min: usize },
    #[error("subject {subject}, keyword {keyword}: requested {requested}, only {available} available")]
    Unsatisfiable { subject: u32, keyword: String, requested: usize, available: usize },
    #[error("malformed manifest line {line}: {reason}")]
    Manifest { line: usize, reason: String },
    #[error("audio error: {0}")]
    Audio(String),
    #[error("unknown mode `{0}`")]
    UnknownMode(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("training diverged at stage {stage} epoch {epoch}")]
    Diverged { stage: u8, epoch: usize, history: Box<crate::trainer::TrainHistory> },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("missing corpus: {0}")]
    MissingCorpus(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) trait IoContext<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T>;
}

impl<T> IoContext<T> for std::io::Result<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T> {
        self.map_err(|source| Error::Io { path: path.into(), source })
    }
}
