use m2curl_numerics::NumericsError;
use m2curl_sim::SimError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("config error: {0}")]
    Config(String),
    #[error("contract violated: {0}")]
    Contract(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Sim(#[from] SimError),
}

pub type Result<T, E = CoreError> = std::result::Result<T, E>;
