//! The single JSON run configuration shared by all commands.

use std::path::Path;

use posefit::{LossWeights, OptimConfig, PerturbSpec, RenderOptions};
use posefit_harness::bench::{Ablations, BenchConfig, Level};
use posefit_harness::scene::{Corruption, BUILTIN_SCENES, DEFAULT_DILATION_PX};
use posefit_harness::GradCheckConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::exit::Failure;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Working resolution relative to the scene images.
    pub image_scale: f64,
    /// Mask dilation in full-resolution pixels.
    pub dilation_px: f64,
    pub optim: OptimConfig,
    pub weights: LossWeights,
    pub render: RenderOptions,
    /// Offset of the initial pose written by `synth`.
    pub perturb: PerturbSpec,
    pub benchmark: BenchSection,
    pub grad_check: GradSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        let b = BenchConfig::default();
        Self {
            image_scale: b.image_scale,
            dilation_px: DEFAULT_DILATION_PX,
            optim: OptimConfig::default(),
            weights: LossWeights::default(),
            render: RenderOptions::default(),
            perturb: PerturbSpec::NONE,
            benchmark: BenchSection::default(),
            grad_check: GradSection::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchSection {
    pub scenes: Vec<String>,
    pub levels: Vec<Level>,
    pub trials: usize,
    pub seed: u64,
    pub refine: bool,
    pub frames: usize,
    pub corruption: Option<Corruption>,
    pub add_s: bool,
    pub record_timing: bool,
    pub ablations: Ablations,
}

impl Default for BenchSection {
    fn default() -> Self {
        let b = BenchConfig::default();
        Self {
            scenes: BUILTIN_SCENES.iter().map(|s| s.to_string()).collect(),
            levels: b.levels,
            trials: b.trials,
            seed: b.seed,
            refine: b.refine,
            frames: b.frames,
            corruption: b.corruption,
            add_s: b.add_s,
            record_timing: b.record_timing,
            ablations: b.ablations,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradSection {
    pub scenes: usize,
    pub seed: u64,
    pub step_translation: f64,
    pub step_quaternion: f64,
    pub tolerance: f64,
    pub offset: PerturbSpec,
}

impl Default for GradSection {
    fn default() -> Self {
        let g = GradCheckConfig::default();
        Self {
            scenes: g.scenes,
            seed: g.seed,
            step_translation: g.step_translation,
            step_quaternion: g.step_quaternion,
            tolerance: g.tolerance,
            offset: g.offset,
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, Failure> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = std::fs::read_to_string(path).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), Failure> {
        self.optim.validate().map_err(|e| Failure::Config(e.to_string()))?;
        self.weights.validate().map_err(|e| Failure::Config(e.to_string()))?;
        self.perturb.validate().map_err(Failure::Config)?;
        posefit_harness::scene::check_factor(self.image_scale).map_err(|e| Failure::Config(e.to_string()))?;
        if !(self.dilation_px >= 0.0) || !(self.render.sigma > 0.0) {
            return Err(Failure::Config("dilation_px must be >= 0 and render.sigma > 0".into()));
        }
        Ok(())
    }

    pub fn bench(&self) -> BenchConfig {
        let b = &self.benchmark;
        BenchConfig {
            scenes: b.scenes.clone(),
            levels: b.levels.clone(),
            trials: b.trials,
            seed: b.seed,
            image_scale: self.image_scale,
            dilation_px: self.dilation_px,
            render: self.render,
            optim: self.optim,
            weights: self.weights,
            refine: b.refine,
            frames: b.frames,
            corruption: b.corruption,
            add_s: b.add_s,
            record_timing: b.record_timing,
            ablations: b.ablations.clone(),
        }
    }

    pub fn grad_check(&self) -> GradCheckConfig {
        let g = &self.grad_check;
        GradCheckConfig {
            scenes: g.scenes,
            seed: g.seed,
            step_translation: g.step_translation,
            step_quaternion: g.step_quaternion,
            tolerance: g.tolerance,
            weights: self.weights,
            image_scale: self.image_scale,
            dilation_px: self.dilation_px,
            render: self.render,
            offset: g.offset,
        }
    }
}

fn flatten(prefix: &str, v: &Value, out: &mut Vec<(String, String)>) {
    match v {
        Value::Object(m) => {
            for (k, v) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        other => out.push((prefix.to_string(), other.to_string())),
    }
}

/// `field = default` lines for every config field, in file order.
pub fn defaults_listing() -> String {
    let mut rows = Vec::new();
    flatten("", &serde_json::to_value(RunConfig::default()).expect("config serializes"), &mut rows);
    let width = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    let mut s = String::from("Config fields (JSON via --config; unknown fields are rejected) and defaults:\n");
    for (k, v) in rows {
        s.push_str(&format!("  {k:<width$}  {v}\n"));
    }
    s
}
