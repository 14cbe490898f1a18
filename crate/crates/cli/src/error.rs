use splatlight::backend::BackendError;
use splatlight::cloud::CloudError;
use splatlight::image_io::ImageIoError;
use splatlight::mesh::MeshError;
use splatlight::metrics::MetricsError;
use splatlight::personalize::PersonalizeError;
use splatlight::relight::RelightError;
use splatlight_bridge::BridgeError;
use thiserror::Error;

/// Every failure maps to one exit code: 1 usage, 2 data, 3 bridge.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("data: {0}")]
    Data(String),
    #[error("bridge: {0}")]
    Bridge(String),
    #[error("interrupted after outer iteration {0}; checkpoint written, rerun with --resume")]
    Interrupted(u64),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) => 1,
            Self::Data(_) => 2,
            Self::Bridge(_) => 3,
            Self::Interrupted(_) => 130,
        }
    }
}

pub fn data(e: impl std::fmt::Display) -> CliError {
    CliError::Data(e.to_string())
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        data(e)
    }
}

impl From<CloudError> for CliError {
    fn from(e: CloudError) -> Self {
        data(e)
    }
}

impl From<ImageIoError> for CliError {
    fn from(e: ImageIoError) -> Self {
        data(e)
    }
}

impl From<BridgeError> for CliError {
    fn from(e: BridgeError) -> Self {
        match e {
            BridgeError::Config(m) => CliError::Usage(m),
            other => CliError::Bridge(other.to_string()),
        }
    }
}

impl From<BackendError> for CliError {
    fn from(e: BackendError) -> Self {
        CliError::Bridge(e.to_string())
    }
}

impl From<MeshError> for CliError {
    fn from(e: MeshError) -> Self {
        match e {
            MeshError::InvalidConfig(m) => CliError::Usage(m),
            other => data(other),
        }
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        match e {
            MetricsError::Backend(b) => b.into(),
            other => data(other),
        }
    }
}

impl From<PersonalizeError> for CliError {
    fn from(e: PersonalizeError) -> Self {
        match e {
            PersonalizeError::BridgeFailure { .. } => CliError::Bridge(e.to_string()),
            PersonalizeError::InvariantViolation(m) => CliError::Usage(m),
            other => data(other),
        }
    }
}

impl From<RelightError> for CliError {
    fn from(e: RelightError) -> Self {
        match e {
            RelightError::Interrupted { outer_iters_done } => CliError::Interrupted(outer_iters_done),
            RelightError::InvalidJob(m) => CliError::Usage(m),
            e if e.is_denoiser_failure() => CliError::Bridge(e.to_string()),
            other => data(other),
        }
    }
}
