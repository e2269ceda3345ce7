use std::path::PathBuf;

/// Errors surfaced by every fallible operation in the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid dimension: {0}")]
    Dimension(String),

    #[error("label {label} out of range for {classes} classes")]
    Label { label: i64, classes: usize },

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("optimizer state: {0}")]
    State(String),

    #[error("config: {0}")]
    Config(String),

    #[error("evaluation: {0}")]
    Evaluation(String),

    #[error("validation: {0}")]
    Validation(String),

    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),

    #[error("identity {identity} appears in both {first} and {second} splits")]
    Leakage {
        identity: String,
        first: String,
        second: String,
    },

    #[error("format: {0}")]
    Format(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("{path}: {source}")]
    Path {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn at_path(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Self {
        let path = path.into();
        move |source| Error::Path { path, source }
    }
}
