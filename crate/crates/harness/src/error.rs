use std::path::PathBuf;

use posefit::{ImageIoError, MeshError, ObjectiveError, RefineError};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("nothing rendered: the object is outside the view")]
    EmptyRender,
    #[error("unknown scene {0:?} (expected cube, box or prism)")]
    UnknownScene(String),
    #[error("{path}: missing {what}")]
    Missing { path: PathBuf, what: &'static str },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("{path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
    #[error(transparent)]
    Image(#[from] ImageIoError),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Refine(#[from] RefineError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("inconsistent scene package: {0}")]
    Inconsistent(String),
}

impl HarnessError {
    pub(crate) fn io(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> HarnessError {
        let path = path.to_path_buf();
        move |source| HarnessError::Io { path, source }
    }

    pub(crate) fn json(path: &std::path::Path) -> impl FnOnce(serde_json::Error) -> HarnessError {
        let path = path.to_path_buf();
        move |source| HarnessError::Json { path, source }
    }

    pub(crate) fn csv(path: &std::path::Path) -> impl FnOnce(csv::Error) -> HarnessError {
        let path = path.to_path_buf();
        move |source| HarnessError::Csv { path, source }
    }
}
