use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot decode or encode image {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("dataset layout: {0}")]
    Layout(String),
    #[error("test frame has no ground-truth mask: {0}")]
    MissingGroundTruth(PathBuf),
    #[error("missing mask for frame: {0}")]
    MissingMask(PathBuf),
    #[error("{what}: expected {expected:?}, found {found:?}")]
    Shape { what: &'static str, expected: (usize, usize), found: (usize, usize) },
    #[error("class count mismatch: configured {configured}, dataset has {found}")]
    ClassMismatch { configured: usize, found: usize },
    #[error("training diverged at epoch {epoch}, batch {batch}: loss {loss}")]
    Divergence { epoch: usize, batch: usize, loss: f64 },
    #[error("instance provider failed: {0}")]
    Provider(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

/// Attaches the offending path to an `io::Error`.
pub(crate) trait IoContext<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T>;
}

impl<T> IoContext<T> for std::io::Result<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T> {
        self.map_err(|source| Error::Io { path: path.into(), source })
    }
}

impl<T> IoContext<T> for image::ImageResult<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T> {
        self.map_err(|source| Error::Image { path: path.into(), source })
    }
}
