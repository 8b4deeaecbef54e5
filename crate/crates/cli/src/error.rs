use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] lesion_detector::ModelError),
    #[error(transparent)]
    Dataset(#[from] lesion_core::dataset::DatasetError),
    #[error(transparent)]
    Detections(#[from] lesion_core::detections::DetectionFileError),
    #[error(transparent)]
    Synth(#[from] lesion_core::synth::SynthError),
    #[error(transparent)]
    Eval(#[from] lesion_core::eval::EvalError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {source}")]
    Image { path: String, source: image::ImageError },
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    /// 1 for usage and configuration problems, 2 for failures at run time.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => 1,
            _ => 2,
        }
    }

    pub fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        CliError::Io { path: path.display().to_string(), source }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
