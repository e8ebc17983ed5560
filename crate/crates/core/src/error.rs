use thiserror::Error;

/// Errors raised across the segmentation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("missing annotation for sample `{0}`")]
    MissingAnnotation(String),

    #[error("split error: {0}")]
    Split(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("training diverged at epoch {epoch} (loss = {loss})")]
    Divergence { epoch: usize, loss: f64 },

    #[error("class prior undefined for n_p = {n_p}, n_u = {n_u}")]
    Prior { n_p: usize, n_u: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("cannot compare runs: {0}")]
    Comparison(String),

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Wraps `self` with the name of the pipeline stage that produced it.
    pub fn in_stage(self, stage: &str) -> Error {
        match self {
            e @ Error::Stage { .. } => e,
            e => Error::Stage {
                stage: stage.to_string(),
                source: Box::new(e),
            },
        }
    }

    /// True for errors caused by invalid user configuration rather than a
    /// failure while running.
    pub fn is_config_error(&self) -> bool {
        matches!(self, Error::Config(_))
    }
}
