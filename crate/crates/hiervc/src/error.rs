#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] hiervc_core::Error),

    #[error(transparent)]
    Model(#[from] hiervc_model::ModelError),

    #[error(transparent)]
    Candle(#[from] candle_core::Error),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("training aborted at step {step}: non-finite loss; breakdown: {breakdown}")]
    NonFiniteLoss { step: u64, breakdown: String },

    #[error("{0}")]
    Pipeline(String),
}

pub type Result<T> = std::result::Result<T, Error>;
