//! Render-and-compare 6-DoF pose refinement.
//!
//! A textured mesh is rendered at a hypothesized pose by a differentiable
//! soft rasterizer, compared against an observed color/depth/mask bundle,
//! and the pose is refined by batched gradient descent with randomized
//! learning rates.

pub mod error;
pub mod geometry;
pub mod imageproc;
pub mod mesh;
pub mod metrics;
pub mod objective;
pub mod optimizer;
pub mod perturb;
pub mod pixels;
pub mod render;

pub use error::{GeometryError, ImageIoError, MeshError, ObjectiveError, RefineError};
pub use geometry::{CameraIntrinsics, Pose, Quaternion};
pub use mesh::TexturedMesh;
pub use pixels::ImageF;
pub use render::{FrameBuffers, FrameGradients, PoseGradient, RenderConfig, RenderOptions};
pub use objective::{LossBreakdown, LossWeights, Observation};
pub use optimizer::{Frame, LrSampling, OptimConfig, RefineResult};
pub use perturb::{perturb_pose, PerturbSpec};
