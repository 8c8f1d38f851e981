use std::path::PathBuf;

/// One class whose requested count exceeds what is available.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassShortfall {
    pub class: String,
    pub requested: usize,
    pub available: usize,
}

fn list_shortfalls(items: &[ClassShortfall]) -> String {
    items
        .iter()
        .map(|s| format!("{} (requested {}, available {})", s.class, s.requested, s.available))
        .collect::<Vec<_>>()
        .join(", ")
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid {what}: {reason}")]
    Invalid { what: &'static str, reason: String },

    #[error("shortfall in {context}: {}", list_shortfalls(.classes))]
    Shortfall {
        context: String,
        classes: Vec<ClassShortfall>,
    },

    #[error("{path}:{line}: {reason}")]
    Parse {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("missing adapter targets: {}", .0.join(", "))]
    MissingTargets(Vec<String>),

    #[error("non-finite gradient at outer step {step} (seed {seed})")]
    NonFiniteGradient { step: usize, seed: u64 },

    #[error("covariance not positive definite after adding epsilon {epsilon:e}; use a larger epsilon")]
    NotPositiveDefinite { epsilon: f64 },

    #[error("stage `{stage}` needs `{upstream}` to be run first")]
    Dependency { stage: String, upstream: String },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    TomlDe(#[from] toml::de::Error),

    #[error(transparent)]
    TomlSer(#[from] toml::ser::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(what: &'static str, reason: impl Into<String>) -> Self {
        Error::Invalid {
            what,
            reason: reason.into(),
        }
    }
}

/// Attaches a path or action description to I/O errors.
pub(crate) trait IoContext<T> {
    fn ctx(self, context: impl FnOnce() -> String) -> Result<T>;
}

impl<T> IoContext<T> for std::result::Result<T, std::io::Error> {
    fn ctx(self, context: impl FnOnce() -> String) -> Result<T> {
        self.map_err(|source| Error::Io {
            context: context(),
            source,
        })
    }
}
