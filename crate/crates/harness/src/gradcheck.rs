//! Finite-difference check of the analytic pose gradient on seeded scenes.

use std::time::Instant;

use posefit::objective::{compute_loss, loss_value};
use posefit::render::{render_backward, render_channels};
use posefit::{perturb_pose, LossWeights, PerturbSpec, Pose, Quaternion, RenderConfig, RenderOptions};
use serde::{Deserialize, Serialize};

use crate::error::HarnessError;
use crate::scene::{builtin_mesh, default_camera, random_object_pose, render_options_at, synth_scene, MeshRef, BUILTIN_SCENES, DEFAULT_DILATION_PX};
use crate::seeds;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradCheckConfig {
    pub scenes: usize,
    pub seed: u64,
    /// Central-difference step on each translation component, meters.
    pub step_translation: f64,
    /// Central-difference step on each raw quaternion component.
    pub step_quaternion: f64,
    pub tolerance: f64,
    pub weights: LossWeights,
    pub image_scale: f64,
    pub dilation_px: f64,
    pub render: RenderOptions,
    /// Offset of the evaluation pose from the ground truth.
    pub offset: PerturbSpec,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            scenes: 20,
            seed: 0,
            step_translation: 1e-4,
            step_quaternion: 1e-4,
            tolerance: 1e-2,
            weights: LossWeights::default(),
            image_scale: 0.5,
            dilation_px: DEFAULT_DILATION_PX,
            render: RenderOptions::default(),
            offset: PerturbSpec::MEDIUM,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SceneCheck {
    pub index: usize,
    pub scene: String,
    /// `[tx, ty, tz, qw, qx, qy, qz]`.
    pub analytic: [f64; 7],
    pub numeric: [f64; 7],
    /// `max |analytic − numeric| / max |numeric|`.
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub checks: Vec<SceneCheck>,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub runtime_ms: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

fn params(p: &Pose) -> [f64; 7] {
    let q = p.rotation.as_array();
    [p.translation.x, p.translation.y, p.translation.z, q[0], q[1], q[2], q[3]]
}

fn from_params(v: &[f64; 7]) -> Pose {
    Pose::new(Quaternion::new(v[3], v[4], v[5], v[6]), nalgebra::Vector3::new(v[0], v[1], v[2]))
}

pub fn rel_error(analytic: &[f64; 7], numeric: &[f64; 7]) -> f64 {
    let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let diff = analytic.iter().zip(numeric).fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
    if scale == 0.0 {
        if diff == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        diff / scale
    }
}

/// Scene `i` cycles through the builtin meshes; its ground truth and the
/// evaluation pose come from the seed.
pub fn grad_check(cfg: &GradCheckConfig) -> Result<GradCheckReport, HarnessError> {
    if cfg.scenes == 0 || !(cfg.step_translation > 0.0 && cfg.step_quaternion > 0.0) {
        return Err(HarnessError::Config("grad-check needs >= 1 scene and positive steps".into()));
    }
    cfg.weights.validate()?;
    let t0 = Instant::now();
    let k_full = default_camera();
    let mut checks = Vec::with_capacity(cfg.scenes);
    for i in 0..cfg.scenes {
        let name = BUILTIN_SCENES[i % BUILTIN_SCENES.len()];
        let mesh = builtin_mesh(name)?;
        let gt = random_object_pose(&mut seeds::rng(cfg.seed, &[i as u64, 1]));
        let pose = perturb_pose(&gt, &cfg.offset, &mut seeds::rng(cfg.seed, &[i as u64, 2]));
        let obs = synth_scene(&mesh, MeshRef::Builtin(name.into()), &gt, &k_full, &cfg.render, None)?.observation(cfg.image_scale, cfg.dilation_px)?;
        let k = obs.intrinsics;
        let rc = RenderConfig::for_camera(&k, render_options_at(&cfg.render, cfg.image_scale));
        let (_, up) = compute_loss(&obs, &render_channels(&mesh, &pose, &k, &rc), &cfg.weights)?;
        let analytic = render_backward(&mesh, &pose, &k, &rc, &up).as_array();
        let f = |v: &[f64; 7]| -> Result<f64, HarnessError> {
            Ok(loss_value(&obs, &render_channels(&mesh, &from_params(v), &k, &rc), &cfg.weights)?.total)
        };
        let base = params(&pose);
        let mut numeric = [0.0; 7];
        for j in 0..7 {
            let h = if j < 3 { cfg.step_translation } else { cfg.step_quaternion };
            let (mut a, mut b) = (base, base);
            a[j] += h;
            b[j] -= h;
            numeric[j] = (f(&a)? - f(&b)?) / (2.0 * h);
        }
        checks.push(SceneCheck { index: i, scene: name.into(), analytic, numeric, rel_error: rel_error(&analytic, &numeric) });
    }
    let max_rel_error = checks.iter().fold(0.0f64, |m, c| m.max(c.rel_error));
    Ok(GradCheckReport { checks, max_rel_error, tolerance: cfg.tolerance, runtime_ms: t0.elapsed().as_secs_f64() * 1e3 })
}
