//! Benchmark runs: scenes × noise levels × trials, plus ablation grids.

use std::time::Instant;

use nalgebra::Vector3;
use posefit::metrics::{add, add_s, auc, AUC_MAX_THRESHOLD, EVAL_POINTS};
use posefit::optimizer::refine;
use posefit::{perturb_pose, Frame, LossWeights, LrSampling, OptimConfig, PerturbSpec, Pose, Quaternion, RenderOptions, TexturedMesh};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::HarnessError;
use crate::scene::{builtin_mesh, check_factor, default_camera, random_object_pose, render_options_at, synth_scene, Corruption, MeshRef, DEFAULT_DILATION_PX};
use crate::seeds;

/// A named initial-pose noise level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Level {
    pub name: String,
    pub rotation_deg: f64,
    pub translation_m: f64,
}

impl Level {
    pub fn new(name: &str, spec: PerturbSpec) -> Self {
        Self { name: name.to_string(), rotation_deg: spec.rotation_deg, translation_m: spec.translation_m }
    }

    pub fn named(name: &str) -> Option<Self> {
        PerturbSpec::named(name).map(|s| Self::new(name, s))
    }

    pub fn spec(&self) -> PerturbSpec {
        PerturbSpec::new(self.rotation_deg, self.translation_m)
    }

    pub fn standard() -> Vec<Level> {
        ["easy", "medium", "hard"].iter().map(|n| Level::named(n).expect("standard level")).collect()
    }
}

/// Which ablation grids to run next to the main benchmark. Empty lists and
/// `false`/`None` skip a grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablations {
    pub iterations: Vec<usize>,
    pub image_scales: Vec<f64>,
    /// Uniform against log-uniform learning-rate sampling.
    pub sampling: bool,
    /// Randomized learning rates against a fixed rate with start-pose noise
    /// of this size.
    pub noise_baseline: Option<PerturbSpec>,
}

impl Default for Ablations {
    fn default() -> Self {
        Self {
            iterations: vec![5, 10, 25, 50, 100, 200, 500],
            image_scales: vec![0.1, 0.25, 0.5, 0.75, 1.0],
            sampling: true,
            noise_baseline: Some(PerturbSpec::MEDIUM),
        }
    }
}

impl Ablations {
    pub fn none() -> Self {
        Self { iterations: vec![], image_scales: vec![], sampling: false, noise_baseline: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub scenes: Vec<String>,
    pub levels: Vec<Level>,
    pub trials: usize,
    pub seed: u64,
    /// Observations are resized by this factor before refinement.
    pub image_scale: f64,
    /// Mask dilation at full resolution, pixels.
    pub dilation_px: f64,
    /// Full-resolution render options; sigma is scaled with `image_scale`.
    pub render: RenderOptions,
    pub optim: OptimConfig,
    pub weights: LossWeights,
    /// `false` reports the perturbed input pose as the output.
    pub refine: bool,
    /// Views per trial. View `j` sees the object turned by a known offset.
    pub frames: usize,
    pub corruption: Option<Corruption>,
    pub add_s: bool,
    /// Write measured runtimes. Off, the runtime column is 0 and reports are
    /// byte-reproducible.
    pub record_timing: bool,
    pub ablations: Ablations,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            scenes: crate::scene::BUILTIN_SCENES.iter().map(|s| s.to_string()).collect(),
            levels: Level::standard(),
            trials: 10,
            seed: 0,
            image_scale: 0.5,
            dilation_px: DEFAULT_DILATION_PX,
            render: RenderOptions::default(),
            optim: OptimConfig::default(),
            weights: LossWeights::default(),
            refine: true,
            frames: 1,
            corruption: None,
            add_s: false,
            record_timing: true,
            ablations: Ablations::default(),
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if self.scenes.is_empty() {
            return bad("at least one scene is required".into());
        }
        for s in &self.scenes {
            builtin_mesh(s)?;
        }
        if self.levels.is_empty() {
            return bad("at least one level is required".into());
        }
        for l in &self.levels {
            l.spec().validate().map_err(|e| HarnessError::Config(format!("level {}: {e}", l.name)))?;
        }
        if self.trials == 0 {
            return bad("trials must be >= 1".into());
        }
        if self.frames == 0 {
            return bad("frames must be >= 1".into());
        }
        check_factor(self.image_scale)?;
        for &s in &self.ablations.image_scales {
            check_factor(s)?;
        }
        if self.ablations.iterations.contains(&0) {
            return bad("ablation iteration counts must be >= 1".into());
        }
        if !(self.dilation_px >= 0.0) {
            return bad(format!("dilation_px must be >= 0, got {}", self.dilation_px));
        }
        if !(self.render.sigma > 0.0) {
            return bad(format!("render.sigma must be > 0, got {}", self.render.sigma));
        }
        if let Some(c) = &self.corruption {
            c.validate()?;
        }
        self.optim.validate()?;
        self.weights.validate()?;
        Ok(())
    }
}

/// One refinement trial.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub scene: String,
    pub level: String,
    pub trial: usize,
    pub input_add: f64,
    /// `None` when the trial failed.
    pub output_add: Option<f64>,
    pub input_add_s: Option<f64>,
    pub output_add_s: Option<f64>,
    pub winner_lr: f64,
    pub runtime_ms: f64,
    pub diameter: f64,
    pub error: Option<String>,
}

impl TrialRecord {
    /// Output error used in curves; a failed trial never passes a threshold.
    pub fn output_error(&self) -> f64 {
        self.output_add.unwrap_or(f64::MAX)
    }

    /// Output ADD below `fraction` of the mesh diameter.
    pub fn within(&self, fraction: f64) -> bool {
        self.output_add.is_some_and(|a| a < fraction * self.diameter)
    }
}

/// Known object-frame offset seen by view `j` of a multi-frame trial.
pub fn frame_offset(j: usize) -> Pose {
    Pose::new(Quaternion::from_axis_angle(&Vector3::new(0.0, 1.0, 0.0), 1.2 * j as f64), Vector3::zeros())
}

struct SceneAssets {
    name: String,
    mesh: TexturedMesh,
    points: Vec<Vector3<f64>>,
    views: Vec<TexturedMesh>,
}

fn assets(cfg: &BenchConfig) -> Result<Vec<SceneAssets>, HarnessError> {
    cfg.scenes
        .iter()
        .map(|name| {
            let mesh = builtin_mesh(name)?;
            let views = (1..cfg.frames).map(|j| mesh.transformed(&frame_offset(j))).collect();
            Ok(SceneAssets { name: name.clone(), points: mesh.sample_points(EVAL_POINTS), mesh, views })
        })
        .collect()
}

/// Runs one trial: synthesize, perturb, refine, score.
fn run_trial(cfg: &BenchConfig, scene_idx: usize, sa: &SceneAssets, level_idx: usize, trial: usize) -> TrialRecord {
    let tags = [scene_idx as u64, trial as u64];
    let gt = random_object_pose(&mut seeds::rng(cfg.seed, &[tags[0], tags[1], 1]));
    let init = perturb_pose(&gt, &cfg.levels[level_idx].spec(), &mut seeds::rng(cfg.seed, &[tags[0], level_idx as u64, tags[1], 2]));
    let input_add = add(&sa.points, &gt, &init);
    let mut rec = TrialRecord {
        scene: sa.name.clone(),
        level: cfg.levels[level_idx].name.clone(),
        trial,
        input_add,
        output_add: None,
        input_add_s: cfg.add_s.then(|| add_s(&sa.points, &gt, &init)),
        output_add_s: None,
        winner_lr: 0.0,
        runtime_ms: 0.0,
        diameter: sa.mesh.diameter(),
        error: None,
    };
    let k = default_camera();
    let corruption = cfg.corruption.map(|c| Corruption { seed: seeds::derive(c.seed, &[tags[0], tags[1]]), ..c });
    let meshes: Vec<&TexturedMesh> = std::iter::once(&sa.mesh).chain(sa.views.iter()).collect();
    let observations: Result<Vec<_>, HarnessError> = meshes
        .iter()
        .enumerate()
        .map(|(j, m)| {
            let c = corruption.map(|c| Corruption { seed: seeds::derive(c.seed, &[j as u64]), ..c });
            synth_scene(m, MeshRef::Builtin(sa.name.clone()), &gt, &k, &cfg.render, c.as_ref())?.observation(cfg.image_scale, cfg.dilation_px)
        })
        .collect();
    let observations = match observations {
        Ok(o) => o,
        Err(e) => {
            rec.error = Some(e.to_string());
            return rec;
        }
    };
    let est = if cfg.refine {
        let frames: Vec<Frame> = observations.iter().zip(&meshes).map(|(o, m)| Frame::new(o, m)).collect();
        let optim = OptimConfig { seed: seeds::derive(cfg.seed, &[tags[0], level_idx as u64, tags[1], 3]), ..cfg.optim };
        let opts = render_options_at(&cfg.render, cfg.image_scale);
        let t0 = Instant::now();
        let r = refine(&frames, &init, &cfg.weights, &optim, &opts);
        if cfg.record_timing {
            rec.runtime_ms = t0.elapsed().as_secs_f64() * 1e3;
        }
        match r {
            Ok(r) => {
                rec.winner_lr = r.winner().alpha;
                r.pose
            }
            Err(e) => {
                rec.error = Some(e.to_string());
                return rec;
            }
        }
    } else {
        init
    };
    rec.output_add = Some(add(&sa.points, &gt, &est));
    rec.output_add_s = cfg.add_s.then(|| add_s(&sa.points, &gt, &est));
    rec
}

/// Runs every scene × level × trial of `cfg` (ablations excluded). Records
/// come back in scene-major, then level, then trial order.
pub fn run_trials(cfg: &BenchConfig) -> Result<Vec<TrialRecord>, HarnessError> {
    cfg.validate()?;
    let scenes = assets(cfg)?;
    let jobs: Vec<(usize, usize, usize)> = (0..scenes.len())
        .flat_map(|s| (0..cfg.levels.len()).flat_map(move |l| (0..cfg.trials).map(move |t| (s, l, t))))
        .collect();
    Ok(jobs.par_iter().map(|&(s, l, t)| run_trial(cfg, s, &scenes[s], l, t)).collect())
}

/// AUC row of the summary table.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AucRow {
    pub level: String,
    pub trials: usize,
    pub failures: usize,
    pub input_auc: f64,
    pub output_auc: f64,
}

pub const ALL_LEVELS: &str = "all";

fn auc_of(errors: &[f64]) -> f64 {
    auc(errors, AUC_MAX_THRESHOLD).map(|c| c.auc).unwrap_or(f64::NAN)
}

/// One row per level in `levels` order, then "all".
pub fn auc_table(records: &[TrialRecord], levels: &[String]) -> Vec<AucRow> {
    let row = |name: &str, sel: Vec<&TrialRecord>| AucRow {
        level: name.to_string(),
        trials: sel.len(),
        failures: sel.iter().filter(|r| r.output_add.is_none()).count(),
        input_auc: auc_of(&sel.iter().map(|r| r.input_add).collect::<Vec<_>>()),
        output_auc: auc_of(&sel.iter().map(|r| r.output_error()).collect::<Vec<_>>()),
    };
    let mut rows: Vec<AucRow> = levels.iter().map(|l| row(l, records.iter().filter(|r| &r.level == l).collect())).collect();
    rows.push(row(ALL_LEVELS, records.iter().collect()));
    rows
}

/// One variant of an ablation grid.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRun {
    pub ablation: String,
    pub variant: String,
    pub records: Vec<TrialRecord>,
    pub auc: Vec<AucRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchReport {
    pub config: BenchConfig,
    pub records: Vec<TrialRecord>,
    pub auc: Vec<AucRow>,
    pub ablations: Vec<AblationRun>,
}

impl BenchReport {
    pub fn row(&self, level: &str) -> Option<&AucRow> {
        self.auc.iter().find(|r| r.level == level)
    }

    pub fn ablation(&self, ablation: &str, variant: &str) -> Option<&AblationRun> {
        self.ablations.iter().find(|a| a.ablation == ablation && a.variant == variant)
    }
}

fn variants(cfg: &BenchConfig) -> Vec<(String, String, BenchConfig)> {
    let base = BenchConfig { ablations: Ablations::none(), ..cfg.clone() };
    let mut out = Vec::new();
    for &n in &cfg.ablations.iterations {
        out.push(("iterations".into(), n.to_string(), BenchConfig { optim: OptimConfig { iters: n, ..base.optim }, ..base.clone() }));
    }
    for &s in &cfg.ablations.image_scales {
        out.push(("image_scale".into(), s.to_string(), BenchConfig { image_scale: s, ..base.clone() }));
    }
    if cfg.ablations.sampling {
        for (name, mode) in [("uniform", LrSampling::Uniform), ("exponent", LrSampling::Exponent)] {
            out.push(("sampling".into(), name.into(), BenchConfig { optim: OptimConfig { lr_sampling: mode, ..base.optim }, ..base.clone() }));
        }
    }
    if let Some(noise) = cfg.ablations.noise_baseline {
        out.push(("noise_baseline".into(), "randomized_lr".into(), BenchConfig { optim: OptimConfig { noise_baseline: None, ..base.optim }, ..base.clone() }));
        out.push(("noise_baseline".into(), "fixed_lr_noise".into(), BenchConfig { optim: OptimConfig { noise_baseline: Some(noise), ..base.optim }, ..base.clone() }));
    }
    out
}

/// Main benchmark plus every configured ablation grid.
pub fn run_benchmark(cfg: &BenchConfig) -> Result<BenchReport, HarnessError> {
    cfg.validate()?;
    let levels: Vec<String> = cfg.levels.iter().map(|l| l.name.clone()).collect();
    let base = BenchConfig { ablations: Ablations::none(), ..cfg.clone() };
    let records = run_trials(&base)?;
    let auc = auc_table(&records, &levels);
    let mut ablations = Vec::new();
    for (ablation, variant, vcfg) in variants(cfg) {
        // a variant equal to the main run is not run twice
        let records = if vcfg == base { records.clone() } else { run_trials(&vcfg)? };
        let auc = auc_table(&records, &levels);
        ablations.push(AblationRun { ablation, variant, records, auc });
    }
    Ok(BenchReport { config: cfg.clone(), records, auc, ablations })
}
