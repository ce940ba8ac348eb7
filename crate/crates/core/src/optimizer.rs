//! Batched gradient descent with randomized learning rates.
//!
//! `B` instances start from the same pose, each with its own learning rate
//! drawn from `[lr_low, lr_high]`, and run plain gradient descent with an
//! exponentially decaying step. The instance with the lowest final loss wins.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ObjectiveError, RefineError};
use crate::geometry::Pose;
use crate::mesh::TexturedMesh;
use crate::objective::{compute_loss_with, loss_value, LossBreakdown, LossScratch, LossWeights, Observation};
use crate::perturb::{perturb_pose, PerturbSpec};
use crate::render::{FrameBuffers, PoseGradient, Raster, RenderConfig, RenderOptions};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSampling {
    Uniform,
    /// Log-uniform.
    Exponent,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub batch: usize,
    pub iters: usize,
    pub lr_low: f64,
    pub lr_high: f64,
    /// Learning-rate multiplier reached at the last iteration.
    pub decay: f64,
    pub lr_sampling: LrSampling,
    /// When set, every instance uses the fixed rate `sqrt(lr_low * lr_high)`
    /// and starts from its own perturbed copy of the initial pose.
    pub noise_baseline: Option<PerturbSpec>,
    pub seed: u64,
    /// Meters moved per unit of `alpha * gradient`.
    pub translation_scale: f64,
    /// Raw quaternion units moved per unit of `alpha * gradient`.
    pub rotation_scale: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            batch: 32,
            iters: 100,
            lr_low: 0.001,
            lr_high: 50.0,
            decay: 0.1,
            lr_sampling: LrSampling::Uniform,
            noise_baseline: None,
            seed: 0,
            translation_scale: DEFAULT_TRANSLATION_SCALE,
            rotation_scale: DEFAULT_ROTATION_SCALE,
        }
    }
}

pub const DEFAULT_TRANSLATION_SCALE: f64 = 1e-5;
pub const DEFAULT_ROTATION_SCALE: f64 = 1e-3;

impl OptimConfig {
    pub fn validate(&self) -> Result<(), RefineError> {
        let bad = |m: String| Err(RefineError::InvalidConfig(m));
        if self.batch < 1 {
            return bad("batch must be >= 1".into());
        }
        if self.iters < 1 {
            return bad("iters must be >= 1".into());
        }
        if !(self.lr_low > 0.0 && self.lr_low <= self.lr_high && self.lr_high.is_finite()) {
            return bad(format!("need 0 < lr_low <= lr_high, got {} and {}", self.lr_low, self.lr_high));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return bad(format!("decay must be in (0, 1], got {}", self.decay));
        }
        for (name, v) in [("translation_scale", self.translation_scale), ("rotation_scale", self.rotation_scale)] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        if let Some(n) = &self.noise_baseline {
            n.validate().map_err(RefineError::InvalidConfig)?;
        }
        Ok(())
    }

    fn lr_rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed)
    }
}

/// One observed frame and the mesh as seen in it. Frames refined together
/// share the pose; a frame whose object sits at a known offset `G` from the
/// shared pose carries the mesh pre-transformed by `G`.
#[derive(Clone, Copy, Debug)]
pub struct Frame<'a> {
    pub observation: &'a Observation,
    pub mesh: &'a TexturedMesh,
}

impl<'a> Frame<'a> {
    pub fn new(observation: &'a Observation, mesh: &'a TexturedMesh) -> Self {
        Self { observation, mesh }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TraceEntry {
    /// 1-based.
    pub iteration: usize,
    /// Step size used after evaluating this iterate (0 once frozen).
    pub alpha: f64,
    /// Loss at `pose`, summed over frames.
    pub loss: LossBreakdown,
    pub pose: Pose,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimInstance {
    pub alpha: f64,
    pub init_pose: Pose,
    pub pose: Pose,
    /// Loss at the returned pose.
    pub final_loss: LossBreakdown,
    pub trace: Vec<TraceEntry>,
    /// Stopped early on a non-finite loss, gradient or pose.
    pub frozen: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RefineResult {
    pub pose: Pose,
    pub winner_index: usize,
    pub instances: Vec<OptimInstance>,
    /// The winner ended no worse than where it started.
    pub converged: bool,
}

impl RefineResult {
    pub fn winner(&self) -> &OptimInstance {
        &self.instances[self.winner_index]
    }
}

/// `B` learning rates, deterministic in `rng`.
pub fn sample_learning_rates(cfg: &OptimConfig, rng: &mut impl Rng) -> Vec<f64> {
    let (lo, hi) = (cfg.lr_low, cfg.lr_high);
    (0..cfg.batch)
        .map(|_| {
            if lo == hi {
                return lo;
            }
            match cfg.lr_sampling {
                LrSampling::Uniform => rng.gen_range(lo..=hi),
                LrSampling::Exponent => 10f64.powf(rng.gen_range(lo.log10()..=hi.log10())).clamp(lo, hi),
            }
        })
        .collect()
}

/// Step size at iteration `k` (1-based) of `iters`.
pub fn lr_schedule(alpha_i: f64, k: usize, iters: usize, decay: f64) -> f64 {
    alpha_i * decay.powf(k as f64 / iters as f64)
}

struct Evaluated {
    loss: LossBreakdown,
    grad: PoseGradient,
}

/// Render and gradient buffers for each frame, reused across iterations.
struct Workspace {
    buffers: Vec<FrameBuffers>,
    scratch: Vec<LossScratch>,
}

impl Workspace {
    fn new(frames: &[Frame], opts: &RenderOptions) -> Self {
        Self {
            buffers: frames.iter().map(|f| FrameBuffers::new_empty(f.observation.width(), f.observation.height(), opts.depth_background)).collect(),
            scratch: frames.iter().map(|f| LossScratch::new(f.observation)).collect(),
        }
    }
}

fn evaluate(
    frames: &[Frame],
    pose: &Pose,
    weights: &LossWeights,
    opts: &RenderOptions,
    want_grad: bool,
    ws: &mut Workspace,
) -> Result<Evaluated, ObjectiveError> {
    let mut loss = LossBreakdown::default();
    let mut grad = PoseGradient::zero(true);
    for (j, f) in frames.iter().enumerate() {
        let k = f.observation.intrinsics;
        let cfg = RenderConfig::for_camera(&k, *opts);
        let raster = Raster::new(f.mesh, pose, &k, &cfg);
        let fb = &mut ws.buffers[j];
        raster.buffers_into(fb);
        if want_grad {
            let l = compute_loss_with(f.observation, fb, weights, &mut ws.scratch[j])?;
            loss = loss.add(&l);
            grad = grad.add(&raster.backward(ws.scratch[j].grads()));
        } else {
            loss = loss.add(&loss_value(f.observation, fb, weights)?);
        }
    }
    Ok(Evaluated { loss, grad })
}

fn step(pose: &Pose, g: &PoseGradient, alpha: f64, cfg: &OptimConfig) -> Option<Pose> {
    let t = pose.translation - g.d_translation * (alpha * cfg.translation_scale);
    let q = pose.rotation.to_vector() - g.d_quaternion * (alpha * cfg.rotation_scale);
    let next = Pose::new(crate::geometry::Quaternion::from_vector(&q), t).normalized().ok()?;
    next.is_finite().then_some(next)
}

/// Runs a single instance with a given base learning rate.
pub fn run_instance(
    frames: &[Frame],
    init_pose: &Pose,
    weights: &LossWeights,
    cfg: &OptimConfig,
    opts: &RenderOptions,
    alpha_i: f64,
) -> Result<OptimInstance, ObjectiveError> {
    let init = init_pose.normalized().unwrap_or(*init_pose);
    let mut pose = init;
    let mut trace = Vec::with_capacity(cfg.iters);
    let mut frozen = false;
    let mut ws = Workspace::new(frames, opts);
    for k in 1..=cfg.iters {
        if frozen {
            let prev: &TraceEntry = trace.last().expect("frozen after at least one entry");
            trace.push(TraceEntry { iteration: k, alpha: 0.0, ..prev.clone() });
            continue;
        }
        let ev = match evaluate(frames, &pose, weights, opts, true, &mut ws) {
            Ok(ev) => ev,
            Err(e) if k == 1 => return Err(e),
            Err(_) => {
                frozen = true;
                trace.push(TraceEntry { iteration: k, alpha: 0.0, ..trace.last().cloned().expect("k > 1") });
                continue;
            }
        };
        if !ev.loss.total.is_finite() || !ev.grad.is_finite() {
            frozen = true;
            match trace.last().cloned() {
                Some(prev) => trace.push(TraceEntry { iteration: k, alpha: 0.0, ..prev }),
                None => trace.push(TraceEntry { iteration: k, alpha: 0.0, loss: ev.loss, pose }),
            }
            continue;
        }
        let alpha = lr_schedule(alpha_i, k, cfg.iters, cfg.decay);
        trace.push(TraceEntry { iteration: k, alpha, loss: ev.loss, pose });
        match step(&pose, &ev.grad, alpha, cfg) {
            Some(next) => pose = next,
            None => frozen = true,
        }
    }
    // the pose after the last update has not been scored yet
    let final_loss = if frozen {
        trace.last().map(|e| e.loss).unwrap_or_default()
    } else {
        match evaluate(frames, &pose, weights, opts, false, &mut ws) {
            Ok(ev) if ev.loss.total.is_finite() => ev.loss,
            _ => {
                frozen = true;
                let prev = trace.last().expect("iters >= 1");
                pose = prev.pose;
                prev.loss
            }
        }
    };
    if frozen {
        if let Some(e) = trace.last() {
            pose = e.pose;
        }
    }
    Ok(OptimInstance { alpha: alpha_i, init_pose: init, pose, final_loss, trace, frozen })
}

fn select(instances: Vec<OptimInstance>) -> RefineResult {
    let pick = |only_live: bool| {
        let mut best: Option<usize> = None;
        for (i, inst) in instances.iter().enumerate() {
            if only_live && (inst.frozen || !inst.final_loss.total.is_finite()) {
                continue;
            }
            let better = match best {
                None => true,
                Some(b) => inst.final_loss.total < instances[b].final_loss.total,
            };
            if better {
                best = Some(i);
            }
        }
        best
    };
    let winner_index = pick(true).or_else(|| pick(false)).unwrap_or(0);
    let w = &instances[winner_index];
    let converged = !w.frozen && w.final_loss.total <= w.trace[0].loss.total;
    RefineResult { pose: w.pose, winner_index, instances, converged }
}

fn run_batch(
    frames: &[Frame],
    inits: &[Pose],
    alphas: &[f64],
    weights: &LossWeights,
    cfg: &OptimConfig,
    opts: &RenderOptions,
) -> Result<RefineResult, RefineError> {
    if frames.is_empty() {
        return Err(RefineError::NoFrames);
    }
    cfg.validate()?;
    weights.validate().map_err(|e| RefineError::InvalidConfig(e.to_string()))?;
    let runs: Vec<Result<OptimInstance, ObjectiveError>> = inits
        .par_iter()
        .zip(alphas.par_iter())
        .map(|(init, &a)| run_instance(frames, init, weights, cfg, opts, a))
        .collect();
    let mut instances = Vec::with_capacity(runs.len());
    let mut first_err = None;
    for r in runs {
        match r {
            Ok(i) => instances.push(i),
            Err(e) => {
                first_err.get_or_insert(e);
            }
        }
    }
    match first_err {
        Some(ObjectiveError::EmptyMask) if instances.is_empty() => Err(RefineError::EmptyMask),
        Some(e) if instances.is_empty() => Err(RefineError::Failed(e.to_string())),
        Some(e) => Err(RefineError::Failed(format!("some instances could not start: {e}"))),
        None => Ok(select(instances)),
    }
}

/// Randomized-learning-rate refinement. Dispatches to
/// [`refine_noise_baseline`] when `cfg.noise_baseline` is set.
pub fn refine(
    frames: &[Frame],
    init_pose: &Pose,
    weights: &LossWeights,
    cfg: &OptimConfig,
    opts: &RenderOptions,
) -> Result<RefineResult, RefineError> {
    if cfg.noise_baseline.is_some() {
        return refine_noise_baseline(frames, init_pose, weights, cfg, opts);
    }
    cfg.validate()?;
    let alphas = sample_learning_rates(cfg, &mut cfg.lr_rng());
    let inits = vec![*init_pose; cfg.batch];
    run_batch(frames, &inits, &alphas, weights, cfg, opts)
}

/// Ablation: one fixed learning rate, diversity from perturbed starting
/// poses instead. Instance `i` draws its perturbation from stream `i` of the
/// seed. Without a configured noise spec the starts are unperturbed.
pub fn refine_noise_baseline(
    frames: &[Frame],
    init_pose: &Pose,
    weights: &LossWeights,
    cfg: &OptimConfig,
    opts: &RenderOptions,
) -> Result<RefineResult, RefineError> {
    cfg.validate()?;
    let noise = cfg.noise_baseline.unwrap_or(PerturbSpec::NONE);
    let alpha = (cfg.lr_low * cfg.lr_high).sqrt();
    let inits: Vec<Pose> = (0..cfg.batch)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(i as u64 + 1);
            perturb_pose(init_pose, &noise, &mut rng)
        })
        .collect();
    run_batch(frames, &inits, &vec![alpha; cfg.batch], weights, cfg, opts)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_examples() {
        assert!((lr_schedule(3.0, 100, 100, 0.1) - 0.3).abs() < 1e-15);
        assert_eq!(lr_schedule(3.0, 17, 100, 1.0), 3.0);
        assert!((lr_schedule(2.0, 50, 100, 0.1) - 2.0 * 10f64.powf(-0.5)).abs() < 1e-15);
    }

    #[test]
    fn degenerate_interval() {
        let cfg = OptimConfig { lr_low: 5.0, lr_high: 5.0, batch: 7, ..Default::default() };
        for mode in [LrSampling::Uniform, LrSampling::Exponent] {
            let cfg = OptimConfig { lr_sampling: mode, ..cfg };
            assert!(sample_learning_rates(&cfg, &mut cfg.lr_rng()).iter().all(|a| *a == 5.0));
        }
    }

    #[test]
    fn samples_stay_in_bounds() {
        for mode in [LrSampling::Uniform, LrSampling::Exponent] {
            let cfg = OptimConfig { lr_sampling: mode, batch: 5000, ..Default::default() };
            let a = sample_learning_rates(&cfg, &mut cfg.lr_rng());
            assert!(a.iter().all(|v| (cfg.lr_low..=cfg.lr_high).contains(v)));
        }
    }

    /// Kolmogorov-Smirnov statistic against U(lo, hi) with the asymptotic
    /// p-value series.
    fn ks_uniform_p(samples: &[f64], lo: f64, hi: f64) -> f64 {
        let mut s = samples.to_vec();
        s.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = s.len() as f64;
        let mut d = 0.0f64;
        for (i, v) in s.iter().enumerate() {
            let f = (v - lo) / (hi - lo);
            d = d.max((i as f64 + 1.0) / n - f).max(f - i as f64 / n);
        }
        let lambda = (n.sqrt() + 0.12 + 0.11 / n.sqrt()) * d;
        let mut p = 0.0;
        for j in 1..=100 {
            let j = j as f64;
            p += 2.0 * (-1f64).powf(j - 1.0) * (-2.0 * j * j * lambda * lambda).exp();
        }
        p.clamp(0.0, 1.0)
    }

    #[test]
    fn exponent_mode_is_log_uniform() {
        let cfg = OptimConfig { lr_sampling: LrSampling::Exponent, lr_low: 0.01, lr_high: 10.0, batch: 10_000, seed: 17, ..Default::default() };
        let logs: Vec<f64> = sample_learning_rates(&cfg, &mut cfg.lr_rng()).iter().map(|a| a.log10()).collect();
        let p = ks_uniform_p(&logs, -2.0, 1.0);
        assert!(p > 0.01, "p = {p}");
        // and the same samples are clearly not uniform on the linear scale
        let lin: Vec<f64> = logs.iter().map(|l| 10f64.powf(*l)).collect();
        assert!(ks_uniform_p(&lin, 0.01, 10.0) < 1e-6);
    }

    #[test]
    fn config_validation() {
        assert!(OptimConfig::default().validate().is_ok());
        for bad in [
            OptimConfig { batch: 0, ..Default::default() },
            OptimConfig { iters: 0, ..Default::default() },
            OptimConfig { lr_low: 2.0, lr_high: 1.0, ..Default::default() },
            OptimConfig { lr_low: 0.0, ..Default::default() },
            OptimConfig { decay: 0.0, ..Default::default() },
            OptimConfig { decay: 1.5, ..Default::default() },
        ] {
            assert!(matches!(bad.validate(), Err(RefineError::InvalidConfig(_))), "{bad:?}");
        }
    }

    #[test]
    fn config_json_uses_defaults_and_rejects_unknown_fields() {
        let c: OptimConfig = serde_json_like("{\"batch\": 4, \"lr_sampling\": \"exponent\"}").unwrap();
        assert_eq!(c.batch, 4);
        assert_eq!(c.lr_sampling, LrSampling::Exponent);
        assert_eq!(c.iters, 100);
        assert!(serde_json_like("{\"batchsize\": 4}").is_err());
    }

    fn serde_json_like(s: &str) -> Result<OptimConfig, String> {
        serde_json::from_str(s).map_err(|e| e.to_string())
    }
}
