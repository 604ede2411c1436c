use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("no samples found under {0}")]
    NoSamples(PathBuf),
    #[error("unknown letter name {name:?} at {path}")]
    UnknownLetter { name: String, path: PathBuf },
    #[error("invalid position code {code:?} at {path}")]
    InvalidPosition { code: String, path: PathBuf },
    #[error("unreadable image {path}: {reason}")]
    UnreadableImage { path: PathBuf, reason: String },
    #[error("duplicate sample id {0:?}")]
    DuplicateSample(String),
    #[error("unknown sample id {0:?}")]
    UnknownSample(String),
    #[error("invalid split: {0}")]
    InvalidSplit(String),
    #[error("invalid image: {0}")]
    InvalidImage(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("malformed distribution: {0}")]
    MalformedDistribution(String),
    #[error("training diverged (non-finite loss) at epoch {epoch}, batch {batch}")]
    Diverged { epoch: usize, batch: usize },
    #[error("non-finite logits; the model has diverged")]
    NonFiniteLogits,
    #[error("{path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error(transparent)]
    Nn(#[from] qalam_nn::NnError),
    #[error("{path}: {source}")]
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

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) trait IoContext<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T>;
}

impl<T> IoContext<T> for std::io::Result<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T> {
        self.map_err(|source| Error::Io {
            path: path.into(),
            source,
        })
    }
}
