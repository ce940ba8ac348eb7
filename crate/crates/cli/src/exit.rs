use posefit::{ObjectiveError, RefineError};
use posefit_harness::HarnessError;

/// A command failure and the process exit code it maps to.
#[derive(Debug)]
pub enum Failure {
    Config(String),
    Load(String),
    EmptyMask(String),
    Refine(String),
    GradCheck(String),
}

impl Failure {
    pub fn code(&self) -> i32 {
        match self {
            Failure::Config(_) => 2,
            Failure::Load(_) => 3,
            Failure::EmptyMask(_) => 4,
            Failure::Refine(_) => 5,
            Failure::GradCheck(_) => 6,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            Failure::Config(m) | Failure::Load(m) | Failure::EmptyMask(m) | Failure::Refine(m) | Failure::GradCheck(m) => m,
        }
    }
}

impl From<RefineError> for Failure {
    fn from(e: RefineError) -> Self {
        match e {
            RefineError::InvalidConfig(_) => Failure::Config(e.to_string()),
            RefineError::EmptyMask => Failure::EmptyMask(e.to_string()),
            _ => Failure::Refine(e.to_string()),
        }
    }
}

impl From<ObjectiveError> for Failure {
    fn from(e: ObjectiveError) -> Self {
        match e {
            ObjectiveError::EmptyMask => Failure::EmptyMask(e.to_string()),
            ObjectiveError::ZeroWeights => Failure::Config(e.to_string()),
            _ => Failure::Load(e.to_string()),
        }
    }
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        match e {
            HarnessError::Config(_) | HarnessError::UnknownScene(_) => Failure::Config(e.to_string()),
            HarnessError::EmptyRender => Failure::EmptyMask(e.to_string()),
            HarnessError::Objective(o) => o.into(),
            HarnessError::Refine(r) => r.into(),
            _ => Failure::Load(e.to_string()),
        }
    }
}
