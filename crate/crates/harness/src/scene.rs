//! Synthetic scenes and the on-disk scene package.

use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use posefit::imageproc::{decode_depth, resize_to, resized_dims, ResizeKind};
use posefit::mesh::primitives::{textured_box, textured_cube, textured_prism};
use posefit::pixels::{encode_depth, read_color_png, read_depth_png, read_mask_png, write_color_png, write_depth_png, write_gray_png};
use posefit::render::render_channels;
use posefit::{CameraIntrinsics, ImageF, Observation, Pose, Quaternion, RenderConfig, RenderOptions, TexturedMesh};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::HarnessError;

pub const BUILTIN_SCENES: [&str; 3] = ["cube", "box", "prism"];

/// Millimeter depth PNGs.
pub const DEPTH_SCALE: f64 = 0.001;

/// Mask dilation at full resolution, pixels.
pub const DEFAULT_DILATION_PX: f64 = 10.0;

pub fn builtin_mesh(name: &str) -> Result<TexturedMesh, HarnessError> {
    match name {
        "cube" => Ok(textured_cube(0.1, 3, 1)),
        "box" => Ok(textured_box(Vector3::new(0.12, 0.08, 0.05), 3, 2)),
        // octagonal prism: symmetric under 45° turns about its axis
        "prism" => Ok(textured_prism(8, 0.05, 0.1, 3, 3)),
        other => Err(HarnessError::UnknownScene(other.to_string())),
    }
}

/// 320×240 pinhole camera, f = 320 px.
pub fn default_camera() -> CameraIntrinsics {
    CameraIntrinsics::new(320.0, 320.0, 160.0, 120.0, 320, 240).expect("valid intrinsics")
}

/// Uniformly random orientation, object centered roughly 0.45 m in front of
/// the camera.
pub fn random_object_pose(rng: &mut impl Rng) -> Pose {
    let q: [f64; 4] = std::array::from_fn(|_| rng.sample(StandardNormal));
    let rotation = Quaternion::new(q[0], q[1], q[2], q[3]).normalize().unwrap_or(Quaternion::IDENTITY);
    let t = Vector3::new(rng.gen_range(-0.02..0.02), rng.gen_range(-0.02..0.02), rng.gen_range(0.42..0.48));
    Pose::new(rotation, t)
}

/// Gaussian pixel noise added to a synthetic observation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Corruption {
    /// Standard deviation on linear color values in [0, 1].
    pub color_sigma: f64,
    /// Standard deviation on valid depth pixels, meters.
    pub depth_sigma_m: f64,
    pub seed: u64,
}

impl Corruption {
    pub fn validate(&self) -> Result<(), HarnessError> {
        if !(self.color_sigma >= 0.0 && self.color_sigma.is_finite() && self.depth_sigma_m >= 0.0 && self.depth_sigma_m.is_finite()) {
            return Err(HarnessError::Config(format!("noise sigmas must be finite and >= 0, got {self:?}")));
        }
        Ok(())
    }
}

/// Where a package's mesh comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum MeshRef {
    Builtin(String),
    /// OBJ path, relative to the package directory unless absolute.
    Path(PathBuf),
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneRecord {
    mesh: MeshRef,
    #[serde(default = "default_depth_scale")]
    depth_scale: f64,
}

fn default_depth_scale() -> f64 {
    DEPTH_SCALE
}

/// One observed frame with its camera, ground truth (when known) and mesh.
#[derive(Clone, Debug, PartialEq)]
pub struct ScenePackage {
    pub color: ImageF,
    /// Meters, 0 = invalid. `None` when the package has no depth image.
    pub depth: Option<ImageF>,
    pub mask: ImageF,
    pub intrinsics: CameraIntrinsics,
    pub pose_gt: Option<Pose>,
    pub mesh: MeshRef,
}

/// Renders `mesh` at `pose_gt`. The mask is the silhouette thresholded at
/// 0.5; depth is kept inside the mask only.
pub fn synth_scene(
    mesh: &TexturedMesh,
    mesh_ref: MeshRef,
    pose_gt: &Pose,
    k: &CameraIntrinsics,
    opts: &RenderOptions,
    corruption: Option<&Corruption>,
) -> Result<ScenePackage, HarnessError> {
    let fb = render_channels(mesh, pose_gt, k, &RenderConfig::for_camera(k, *opts));
    let mask = ImageF { data: fb.silhouette.data.iter().map(|&s| if s > 0.5 { 1.0 } else { 0.0 }).collect(), ..fb.silhouette.clone() };
    if fb.empty || mask.count_nonzero() == 0 {
        return Err(HarnessError::EmptyRender);
    }
    let mut color = fb.color;
    let mut depth = ImageF { data: fb.depth.data.iter().zip(&mask.data).map(|(&d, &m)| if m > 0.0 { d } else { 0.0 }).collect(), ..fb.depth };
    if let Some(c) = corruption {
        c.validate()?;
        let mut rng = crate::seeds::rng(c.seed, &[0xc0]);
        if c.color_sigma > 0.0 {
            for v in &mut color.data {
                let n: f64 = rng.sample(StandardNormal);
                *v = (*v + c.color_sigma * n).clamp(0.0, 1.0);
            }
        }
        if c.depth_sigma_m > 0.0 {
            for v in depth.data.iter_mut().filter(|v| **v > 0.0) {
                let n: f64 = rng.sample(StandardNormal);
                *v = (*v + c.depth_sigma_m * n).max(DEPTH_SCALE);
            }
        }
    }
    Ok(ScenePackage { color, depth: Some(depth), mask, intrinsics: *k, pose_gt: Some(*pose_gt), mesh: mesh_ref })
}

const COLOR: &str = "color.png";
const DEPTH: &str = "depth.png";
const MASK: &str = "mask.png";
const INTRINSICS: &str = "intrinsics.json";
const POSE_GT: &str = "pose_gt.json";
const SCENE: &str = "scene.json";

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), HarnessError> {
    let text = serde_json::to_string_pretty(value).map_err(HarnessError::json(path))?;
    std::fs::write(path, text + "\n").map_err(HarnessError::io(path))
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, HarnessError> {
    let text = std::fs::read_to_string(path).map_err(HarnessError::io(path))?;
    serde_json::from_str(&text).map_err(HarnessError::json(path))
}

impl ScenePackage {
    /// Writes the package. Color is 8-bit sRGB and depth 16-bit millimeters,
    /// so a reload is quantized.
    pub fn save(&self, dir: &Path) -> Result<(), HarnessError> {
        std::fs::create_dir_all(dir).map_err(HarnessError::io(dir))?;
        write_color_png(&dir.join(COLOR), &self.color)?;
        write_gray_png(&dir.join(MASK), &self.mask)?;
        if let Some(d) = &self.depth {
            write_depth_png(&dir.join(DEPTH), &encode_depth(d, DEPTH_SCALE))?;
        }
        write_json(&dir.join(INTRINSICS), &self.intrinsics)?;
        if let Some(p) = &self.pose_gt {
            write_json(&dir.join(POSE_GT), p)?;
        }
        write_json(&dir.join(SCENE), &SceneRecord { mesh: self.mesh.clone(), depth_scale: DEPTH_SCALE })
    }

    /// Reads a package; depth.png and pose_gt.json are optional.
    pub fn load(dir: &Path) -> Result<Self, HarnessError> {
        for (name, what) in [(COLOR, "color image"), (MASK, "mask image"), (INTRINSICS, "intrinsics"), (SCENE, "scene description")] {
            if !dir.join(name).is_file() {
                return Err(HarnessError::Missing { path: dir.join(name), what });
            }
        }
        let record: SceneRecord = read_json(&dir.join(SCENE))?;
        if !(record.depth_scale > 0.0) {
            return Err(HarnessError::Inconsistent(format!("depth_scale must be > 0, got {}", record.depth_scale)));
        }
        let intrinsics: CameraIntrinsics = read_json(&dir.join(INTRINSICS))?;
        intrinsics.validate().map_err(|e| HarnessError::Inconsistent(e.to_string()))?;
        let color = read_color_png(&dir.join(COLOR))?;
        let mask = read_mask_png(&dir.join(MASK))?;
        let depth = match dir.join(DEPTH) {
            p if p.is_file() => Some(decode_depth(&read_depth_png(&p)?, record.depth_scale)),
            _ => None,
        };
        let pose_gt = match dir.join(POSE_GT) {
            p if p.is_file() => Some(read_json::<Pose>(&p)?),
            _ => None,
        };
        let mesh = match record.mesh {
            MeshRef::Path(p) if p.is_relative() => MeshRef::Path(dir.join(p)),
            m => m,
        };
        let pkg = Self { color, depth, mask, intrinsics, pose_gt, mesh };
        pkg.check()?;
        Ok(pkg)
    }

    fn check(&self) -> Result<(), HarnessError> {
        let dims = (self.intrinsics.width, self.intrinsics.height);
        let mut shapes = vec![("color", self.color.dims()), ("mask", self.mask.dims())];
        if let Some(d) = &self.depth {
            shapes.push(("depth", d.dims()));
        }
        for (name, s) in shapes {
            if s != dims {
                return Err(HarnessError::Inconsistent(format!("{name} is {}x{}, intrinsics say {}x{}", s.0, s.1, dims.0, dims.1)));
            }
        }
        Ok(())
    }

    pub fn load_mesh(&self) -> Result<TexturedMesh, HarnessError> {
        match &self.mesh {
            MeshRef::Builtin(name) => builtin_mesh(name),
            MeshRef::Path(p) => Ok(TexturedMesh::load_obj(p, None)?),
        }
    }

    /// Observation resized by `factor`, with the mask band scaled alongside.
    pub fn observation(&self, factor: f64, dilation_px: f64) -> Result<Observation, HarnessError> {
        check_factor(factor)?;
        let (w, h) = resized_dims(self.color.width, self.color.height, factor);
        let color = resize_to(&self.color, w, h, ResizeKind::Smooth);
        let depth = self.depth.as_ref().map(|d| resize_to(d, w, h, ResizeKind::Depth));
        let mask = resize_to(&self.mask, w, h, ResizeKind::Mask);
        Ok(Observation::new(color, depth, mask, self.intrinsics.scaled_to(w, h), dilation_px * factor)?)
    }
}

pub fn check_factor(factor: f64) -> Result<(), HarnessError> {
    if !(0.1 - 1e-12..=1.0).contains(&factor) {
        return Err(HarnessError::Config(format!("image_scale must be in [0.1, 1], got {factor}")));
    }
    Ok(())
}

/// Full-resolution render options adapted to an image downscaled by
/// `factor`: the silhouette band keeps its width in full-resolution pixels.
pub fn render_options_at(opts: &RenderOptions, factor: f64) -> RenderOptions {
    RenderOptions { sigma: opts.sigma * factor, ..*opts }
}
