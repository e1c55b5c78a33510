use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Core(#[from] priorreg::Error),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<HarnessError>,
    },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("thread pool error: {0}")]
    Pool(String),
}

impl HarnessError {
    pub fn stage(stage: &str, source: impl Into<HarnessError>) -> Self {
        HarnessError::Stage {
            stage: stage.to_string(),
            source: Box::new(source.into()),
        }
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;
