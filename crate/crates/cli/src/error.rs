use icscan::datagen::DatagenError;
use icscan::model::ModelError;
use icscan::pipeline::PipelineError;
use icscan::pyramid::PyramidError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("model version mismatch: {0}")]
    ModelVersion(String),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    /// Process exit code: 2 config, 3 data, 4 model version, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::ModelVersion(_) => 4,
            CliError::Other(_) => 1,
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::VersionMismatch { .. } => CliError::ModelVersion(e.to_string()),
            ModelError::InvalidConfig(_) => CliError::Config(e.to_string()),
            ModelError::Format(_) | ModelError::Io { .. } | ModelError::EmptyClass(_) | ModelError::EmptyInput => {
                CliError::Data(e.to_string())
            }
            _ => CliError::Other(e.to_string()),
        }
    }
}

impl From<PyramidError> for CliError {
    fn from(e: PyramidError) -> Self {
        match e {
            PyramidError::Io { .. } | PyramidError::Png { .. } | PyramidError::Manifest(_) | PyramidError::FormatVersion(_) => {
                CliError::Data(e.to_string())
            }
            _ => CliError::Other(e.to_string()),
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Model(m) => m.into(),
            PipelineError::Pyramid(p) => p.into(),
            PipelineError::Segmentation(_) | PipelineError::Filter(_) => CliError::Config(e.to_string()),
            _ => CliError::Other(e.to_string()),
        }
    }
}

impl From<DatagenError> for CliError {
    fn from(e: DatagenError) -> Self {
        match e {
            DatagenError::InvalidFractions { .. } | DatagenError::OutOfRange(_) => CliError::Config(e.to_string()),
            DatagenError::Model(m) => m.into(),
            DatagenError::Pipeline(p) => p.into(),
            DatagenError::Pyramid(p) => p.into(),
            DatagenError::Segmentation(_) | DatagenError::Filter(_) => CliError::Config(e.to_string()),
            DatagenError::UngroupedLabel(_) | DatagenError::Manifest(_) | DatagenError::Io { .. } => {
                CliError::Data(e.to_string())
            }
            DatagenError::Eval(_) => CliError::Other(e.to_string()),
        }
    }
}

impl From<icscan::segmentation::SegmentationError> for CliError {
    fn from(e: icscan::segmentation::SegmentationError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<icscan::filtering::FilterError> for CliError {
    fn from(e: icscan::filtering::FilterError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<icscan::evaluation::EvalError> for CliError {
    fn from(e: icscan::evaluation::EvalError) -> Self {
        CliError::Data(e.to_string())
    }
}
