use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{}: row {row}: {message}", path.display())]
    Parse {
        path: PathBuf,
        row: u64,
        message: String,
    },
    #[error("duplicate reading for meter {meter_id} at {timestamp}")]
    Duplicate { meter_id: String, timestamp: String },
    #[error("series {0} has no usable readings")]
    UnrecoverableSeries(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("cannot encode {field}: {value}")]
    Encoding { field: &'static str, value: String },
    #[error("format error: {0}")]
    Format(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("timestep {t} outside 1..={steps}")]
    StepOutOfRange { t: usize, steps: usize },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch}: {terms}")]
    NonFiniteLoss { epoch: usize, batch: usize, terms: String },
    #[error("reports are not comparable: {0}")]
    Incomparable(String),
    #[error("no data for {0}")]
    NoData(String),
    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },
    #[error("repetition {repetition}: {source}")]
    Repetition {
        repetition: usize,
        #[source]
        source: Box<Error>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Nn(#[from] meterdiff_nn::NnError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn in_stage(self, stage: &str) -> Self {
        Error::Stage {
            stage: stage.to_string(),
            source: Box::new(self),
        }
    }
}
