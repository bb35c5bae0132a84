use thiserror::Error;

#[derive(Debug, Error)]
pub enum FedError {
    #[error(transparent)]
    Num(#[from] numkit::NumError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("line {line}: {msg}")]
    Malformed { line: usize, msg: String },
    #[error("invalid data: {0}")]
    InvalidData(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("label {0} out of range")]
    LabelOutOfRange(usize),
    #[error("non-finite loss in {0}")]
    NonFiniteLoss(String),
    #[error("client {client} failed in round {round}: {source}")]
    Client {
        client: usize,
        round: usize,
        #[source]
        source: Box<FedError>,
    },
}

pub type Result<T> = std::result::Result<T, FedError>;
