use thiserror::Error;

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
    #[error("parameter {0} not found")]
    MissingParam(String),
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("target {index} of image {image} has non-positive area")]
    InvalidTarget { image: usize, index: usize },
    #[error("non-finite loss at batch {batch}: iou={iou} cls={cls} obj={obj}")]
    NonFiniteLoss { batch: u64, iou: f64, cls: f64, obj: f64 },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint config does not match: {0}")]
    ConfigMismatch(String),
    #[error("cannot access {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("image {path}: {source}")]
    Image {
        path: String,
        #[source]
        source: image::ImageError,
    },
    #[error("policy: {0}")]
    Policy(String),
    #[error("distillation: {0}")]
    Distill(String),
}
