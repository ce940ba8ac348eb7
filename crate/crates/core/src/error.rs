use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("degenerate quaternion (norm {norm:e})")]
    DegenerateQuaternion { norm: f64 },
    #[error("point behind camera (z = {z})")]
    BehindCamera { z: f64 },
    #[error("invalid camera intrinsics: {0}")]
    InvalidIntrinsics(String),
}

#[derive(Debug, Error)]
pub enum MeshError {
    #[error("failed to load OBJ {path}: {source}")]
    Obj { path: PathBuf, source: tobj::LoadError },
    #[error("failed to read texture {path}: {source}")]
    Texture { path: PathBuf, source: image::ImageError },
    #[error("mesh has no triangles")]
    Empty,
    #[error("triangle {triangle} references vertex {index}, but mesh has {count} vertices")]
    IndexOutOfRange { triangle: usize, index: usize, count: usize },
    #[error("triangle {0} is degenerate")]
    DegenerateTriangle(usize),
    #[error("uv count {uvs} does not match corner count {corners}")]
    UvMismatch { uvs: usize, corners: usize },
    #[error("texture buffer has {got} values, expected {expected}")]
    TextureSize { got: usize, expected: usize },
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

#[derive(Debug, Error)]
pub enum ImageIoError {
    #[error("failed to decode {path}: {source}")]
    Decode { path: PathBuf, source: image::ImageError },
    #[error("failed to encode {path}: {source}")]
    Encode { path: PathBuf, source: image::ImageError },
    #[error("{path}: expected {expected}, found {found}")]
    Format { path: PathBuf, expected: &'static str, found: String },
    #[error("image shape mismatch: {0}")]
    Shape(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ObjectiveError {
    #[error("observation mask has no active pixels")]
    EmptyMask,
    #[error("image size mismatch: observation {obs:?}, rendered {rendered:?}")]
    SizeMismatch { obs: (usize, usize), rendered: (usize, usize) },
    #[error("all loss weights are zero")]
    ZeroWeights,
    #[error("invalid observation: {0}")]
    InvalidObservation(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RefineError {
    #[error("no frames given")]
    NoFrames,
    #[error("invalid optimizer config: {0}")]
    InvalidConfig(String),
    #[error("empty mask in every instance at the first iteration")]
    EmptyMask,
    #[error("refinement failed: {0}")]
    Failed(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}
