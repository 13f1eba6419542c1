//! Exit-code classification for command failures.

use std::fmt;

use persview::fit::FitError;
use persview::fixture::FixtureError;
use persview::io::BundleError;
use persview::metrics::MetricError;
use persview::pipeline::PipelineError;

pub const EXIT_VALIDATION: u8 = 2;
pub const EXIT_RUNTIME: u8 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    /// Bad inputs or flags.
    Validation,
    /// Failure while running on valid inputs.
    Runtime,
}

#[derive(Debug)]
pub struct CliError {
    pub kind: Kind,
    pub stage: &'static str,
    pub message: String,
}

impl CliError {
    pub fn validation(stage: &'static str, message: impl fmt::Display) -> Self {
        Self {
            kind: Kind::Validation,
            stage,
            message: message.to_string(),
        }
    }

    pub fn runtime(stage: &'static str, message: impl fmt::Display) -> Self {
        Self {
            kind: Kind::Runtime,
            stage,
            message: message.to_string(),
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self.kind {
            Kind::Validation => EXIT_VALIDATION,
            Kind::Runtime => EXIT_RUNTIME,
        }
    }

    pub fn bundle(e: BundleError) -> Self {
        match e {
            BundleError::IoFailure { .. } => Self::runtime("load", e),
            _ => Self::validation("load", e),
        }
    }

    pub fn write(e: impl fmt::Display) -> Self {
        Self::runtime("write", e)
    }

    pub fn pipeline(e: PipelineError) -> Self {
        let stage = match &e {
            PipelineError::MissingGenerated | PipelineError::BadParameter(_) => "config",
            PipelineError::Smooth(_) => "smooth",
            PipelineError::Mesh(_) => "mesh",
            PipelineError::Camera(_) | PipelineError::View(_) => "camera",
            PipelineError::Raster(_) => "rasterize",
            PipelineError::Composite(_) => "blend",
        };
        // stage prefixes already live in the error text for wrapped errors
        let message = match &e {
            PipelineError::MissingGenerated => "member `generated` is missing from the bundle; blending needs it".to_string(),
            other => other.to_string(),
        };
        let kind = if e.is_validation() { Kind::Validation } else { Kind::Runtime };
        Self { kind, stage, message }
    }

    pub fn fit(e: FitError) -> Self {
        match e {
            FitError::DivergedFit => Self::runtime("fit", e),
            _ => Self::validation("fit", e),
        }
    }

    pub fn fixture(e: FixtureError) -> Self {
        match e {
            FixtureError::TooSmall(_) => Self::validation("fixture", e),
            _ => Self::runtime("fixture", e),
        }
    }

    pub fn metric(e: MetricError) -> Self {
        Self::validation("eval", e)
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}] {}", self.stage, self.message)
    }
}

impl std::error::Error for CliError {}

pub type CliResult<T> = Result<T, CliError>;
