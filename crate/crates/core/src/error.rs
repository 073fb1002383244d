use std::fmt;
use std::path::PathBuf;

use thiserror::Error;

/// Pipeline stage, attached to errors raised during `analyze`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stage {
    EncodeText,
    AlignInput,
    Edit,
    AlignEdited,
    FinalMask,
    LocalizeWords,
    Score,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Stage::EncodeText => "encode_text",
            Stage::AlignInput => "align(step 1)",
            Stage::Edit => "edit(step 2)",
            Stage::AlignEdited => "align(step 3)",
            Stage::FinalMask => "final_mask(step 4)",
            Stage::LocalizeWords => "localize_words(step 4)",
            Stage::Score => "consistency_score(step 4)",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty text")]
    EmptyText,

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    #[error("invalid value: {0}")]
    InvalidValue(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("timestep {t} out of range for schedule of length {len}")]
    TimestepOutOfRange { t: usize, len: usize },

    #[error("noise estimation undefined at timestep {0}: alpha_t = 1")]
    NoiselessTimestep(usize),

    #[error("backend does not expose generator gradients; use the synthetic backend or a gradient-capable adapter")]
    NotDifferentiable,

    #[error("backend error: {0}")]
    Backend(String),

    #[error("zero text vector: cosine similarity undefined")]
    ZeroTextVector,

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("missing predictions for records: {0:?}")]
    MissingPredictions(Vec<String>),

    #[error("unknown ablation axis `{0}`")]
    UnknownAxis(String),

    #[error("{stage}: {source}")]
    Stage {
        stage: Stage,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(expected: impl fmt::Display, actual: impl fmt::Display) -> Self {
        Error::ShapeMismatch {
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Innermost error, skipping stage tags.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            other => other,
        }
    }

    pub fn stage(&self) -> Option<Stage> {
        match self {
            Error::Stage { stage, .. } => Some(*stage),
            _ => None,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Tags an error with the stage that produced it.
pub(crate) trait StageExt<T> {
    fn stage(self, stage: Stage) -> Result<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, stage: Stage) -> Result<T> {
        self.map_err(|e| Error::Stage {
            stage,
            source: Box::new(e),
        })
    }
}
