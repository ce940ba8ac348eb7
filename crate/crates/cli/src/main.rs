mod config;
mod exit;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};
use posefit::imageproc::edge_map;
use posefit::metrics::{add, EVAL_POINTS};
use posefit::objective::{loss_value, rendered_edges};
use posefit::optimizer::refine;
use posefit::pixels::{write_color_png, write_depth_png, write_gray_png};
use posefit::render::render_channels;
use posefit::{perturb_pose, Frame, ImageF, PerturbSpec, Pose, RenderConfig, TexturedMesh};
use posefit_harness::bench::Level;
use posefit_harness::report::{write_report, write_trace};
use posefit_harness::scene::{builtin_mesh, default_camera, random_object_pose, render_options_at, synth_scene, Corruption, MeshRef, ScenePackage, DEPTH_SCALE};
use posefit_harness::{grad_check, run_benchmark, seeds};
use serde_json::json;

use config::RunConfig;
use exit::Failure;

#[derive(Parser)]
#[command(name = "posefit", version, about = "Render-and-compare 6-DoF pose refinement")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Refine an initial pose against a scene package.
    Refine {
        #[arg(long)]
        scene: PathBuf,
        /// OBJ file or builtin mesh name; defaults to the scene's mesh reference.
        #[arg(long)]
        mesh: Option<String>,
        /// Texture image for an OBJ without a material.
        #[arg(long)]
        texture: Option<PathBuf>,
        #[arg(long)]
        init_pose: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Refined pose JSON.
        #[arg(long)]
        out: PathBuf,
        /// Winner's per-iteration trace; defaults to OUT with a .trace.csv extension.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Overrides optim.seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the synthetic benchmark and write a report bundle.
    Benchmark {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides benchmark.seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        trials: Option<usize>,
        /// Comma-separated builtin scene names.
        #[arg(long, value_delimiter = ',')]
        scenes: Option<Vec<String>>,
        /// Comma-separated level names (easy, medium, hard).
        #[arg(long, value_delimiter = ',')]
        levels: Option<Vec<String>>,
        /// Skip every ablation grid.
        #[arg(long)]
        no_ablations: bool,
    },
    /// Render a scene package, plus an initial pose offset by `perturb`.
    Synth {
        /// OBJ file or builtin mesh name.
        #[arg(long, default_value = "cube")]
        mesh: String,
        #[arg(long)]
        texture: Option<PathBuf>,
        /// Ground-truth pose JSON; drawn from the seed when absent.
        #[arg(long)]
        pose: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Named perturbation level, overriding the config's `perturb`.
        #[arg(long)]
        level: Option<String>,
        /// Gaussian color noise, in [0, 1] intensity units.
        #[arg(long, default_value_t = 0.0)]
        color_sigma: f64,
        /// Gaussian depth noise, meters.
        #[arg(long, default_value_t = 0.0)]
        depth_sigma: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare analytic pose gradients with central finite differences.
    GradCheck {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides grad_check.seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides grad_check.scenes.
        #[arg(long)]
        scenes: Option<usize>,
        /// Full per-scene report as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the rendered channels at a pose as PNGs.
    RenderDebug {
        /// OBJ file or builtin mesh name; defaults to the scene's mesh reference.
        #[arg(long)]
        mesh: Option<String>,
        #[arg(long)]
        texture: Option<PathBuf>,
        #[arg(long)]
        pose: PathBuf,
        /// Scene package supplying the camera and an observation to compare against.
        #[arg(long)]
        scene: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the default configuration as JSON.
    Defaults,
}

fn load_err(path: &Path) -> impl Fn(String) -> Failure + '_ {
    move |m| Failure::Load(format!("{}: {m}", path.display()))
}

fn read_pose(path: &Path) -> Result<Pose, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| load_err(path)(e.to_string()))?;
    let p: Pose = serde_json::from_str(&text).map_err(|e| load_err(path)(e.to_string()))?;
    p.normalized().map_err(|e| load_err(path)(e.to_string()))
}

fn write_text(path: &Path, text: String) -> Result<(), Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| load_err(dir)(e.to_string()))?;
    }
    std::fs::write(path, text + "\n").map_err(|e| load_err(path)(e.to_string()))
}

fn mesh_arg(spec: &str, texture: Option<&Path>) -> Result<(TexturedMesh, MeshRef), Failure> {
    let path = Path::new(spec);
    if !path.exists() && !spec.contains(['/', '.']) {
        return Ok((builtin_mesh(spec)?, MeshRef::Builtin(spec.to_string())));
    }
    let mesh = TexturedMesh::load_obj(path, texture).map_err(|e| Failure::Load(e.to_string()))?;
    let abs = std::fs::canonicalize(path).map_err(|e| load_err(path)(e.to_string()))?;
    Ok((mesh, MeshRef::Path(abs)))
}

fn scene_mesh(pkg: &ScenePackage, spec: Option<&str>, texture: Option<&Path>) -> Result<TexturedMesh, Failure> {
    match spec {
        Some(s) => Ok(mesh_arg(s, texture)?.0),
        None => Ok(pkg.load_mesh()?),
    }
}

fn cmd_refine(
    scene: &Path,
    mesh: Option<&str>,
    texture: Option<&Path>,
    init_pose: &Path,
    config: Option<&Path>,
    out: &Path,
    trace: Option<&Path>,
    seed: Option<u64>,
) -> Result<(), Failure> {
    let mut cfg = RunConfig::load(config)?;
    if let Some(s) = seed {
        cfg.optim.seed = s;
    }
    let pkg = ScenePackage::load(scene)?;
    if pkg.depth.is_none() && cfg.weights.lambda_d > 0.0 {
        return Err(Failure::Load(format!("{}: depth.png is missing but weights.lambda_d = {}", scene.display(), cfg.weights.lambda_d)));
    }
    let mesh = scene_mesh(&pkg, mesh, texture)?;
    let init = read_pose(init_pose)?;
    let obs = pkg.observation(cfg.image_scale, cfg.dilation_px)?;
    if obs.active_pixels() == 0 {
        return Err(Failure::EmptyMask(format!("{}: mask.png has no object pixels", scene.display())));
    }
    let r = refine(&[Frame::new(&obs, &mesh)], &init, &cfg.weights, &cfg.optim, &render_options_at(&cfg.render, cfg.image_scale))?;
    let w = r.winner();
    if w.frozen || !r.pose.is_finite() {
        return Err(Failure::Refine("every instance diverged to a non-finite loss or pose".into()));
    }
    write_text(out, serde_json::to_string_pretty(&r.pose).expect("pose serializes"))?;
    let trace_path = trace.map(Path::to_path_buf).unwrap_or_else(|| out.with_extension("trace.csv"));
    write_trace(&trace_path, &w.trace)?;

    let mut summary = json!({
        "pose": r.pose,
        "initial_loss": w.trace.first().map(|e| e.loss.total),
        "final_loss": w.final_loss.total,
        "winner_lr": w.alpha,
        "winner_index": r.winner_index,
        "converged": r.converged,
        "trace": trace_path,
    });
    if let Some(gt) = pkg.pose_gt {
        let pts = mesh.sample_points(EVAL_POINTS);
        summary["input_add"] = json!(add(&pts, &gt, &init));
        summary["output_add"] = json!(add(&pts, &gt, &r.pose));
    }
    println!("{}", serde_json::to_string_pretty(&summary).expect("summary serializes"));
    Ok(())
}

fn cmd_benchmark(
    config: Option<&Path>,
    out: &Path,
    seed: Option<u64>,
    trials: Option<usize>,
    scenes: Option<Vec<String>>,
    levels: Option<Vec<String>>,
    no_ablations: bool,
) -> Result<(), Failure> {
    let cfg = RunConfig::load(config)?;
    let mut b = cfg.bench();
    if let Some(s) = seed {
        b.seed = s;
    }
    if let Some(t) = trials {
        b.trials = t;
    }
    if let Some(s) = scenes {
        b.scenes = s;
    }
    if let Some(ls) = levels {
        b.levels = ls.iter().map(|n| Level::named(n).ok_or_else(|| Failure::Config(format!("unknown level {n:?}")))).collect::<Result<_, _>>()?;
    }
    if no_ablations {
        b.ablations = posefit_harness::Ablations::none();
    }
    let report = run_benchmark(&b)?;
    write_report(&report, out)?;
    for row in &report.auc {
        println!("{:<8} trials {:>4}  failures {:>3}  input AUC {:.4}  refined AUC {:.4}", row.level, row.trials, row.failures, row.input_auc, row.output_auc);
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_synth(
    mesh: &str,
    texture: Option<&Path>,
    pose: Option<&Path>,
    seed: u64,
    config: Option<&Path>,
    level: Option<&str>,
    color_sigma: f64,
    depth_sigma: f64,
    out: &Path,
) -> Result<(), Failure> {
    let cfg = RunConfig::load(config)?;
    let perturb = match level {
        Some(n) => PerturbSpec::named(n).ok_or_else(|| Failure::Config(format!("unknown level {n:?}")))?,
        None => cfg.perturb,
    };
    let (mesh, mesh_ref) = mesh_arg(mesh, texture)?;
    let gt = match pose {
        Some(p) => read_pose(p)?,
        None => random_object_pose(&mut seeds::rng(seed, &[0, 1])),
    };
    let corruption = (color_sigma != 0.0 || depth_sigma != 0.0).then_some(Corruption { color_sigma, depth_sigma_m: depth_sigma, seed });
    let pkg = synth_scene(&mesh, mesh_ref, &gt, &default_camera(), &cfg.render, corruption.as_ref())?;
    pkg.save(out)?;
    let init = perturb_pose(&gt, &perturb, &mut seeds::rng(seed, &[0, 2]));
    write_text(&out.join("init_pose.json"), serde_json::to_string_pretty(&init).expect("pose serializes"))?;
    println!("{}", out.display());
    Ok(())
}

fn cmd_grad_check(config: Option<&Path>, seed: Option<u64>, scenes: Option<usize>, out: Option<&Path>) -> Result<(), Failure> {
    let mut g = RunConfig::load(config)?.grad_check();
    if let Some(s) = seed {
        g.seed = s;
    }
    if let Some(n) = scenes {
        g.scenes = n;
    }
    let r = grad_check(&g)?;
    if let Some(p) = out {
        write_text(p, serde_json::to_string_pretty(&r).expect("report serializes"))?;
    }
    println!("max relative error {:.6e} over {} scenes (tolerance {:e}, {:.0} ms)", r.max_rel_error, r.checks.len(), r.tolerance, r.runtime_ms);
    if r.passed() {
        Ok(())
    } else {
        Err(Failure::GradCheck(format!("max relative error {:.3e} is not below {:e}", r.max_rel_error, r.tolerance)))
    }
}

fn gray(img: &ImageF, scale: f64) -> ImageF {
    ImageF { data: img.data.iter().map(|v| (v * scale).clamp(0.0, 1.0)).collect(), ..img.clone() }
}

fn cmd_render_debug(
    mesh: Option<&str>,
    texture: Option<&Path>,
    pose: &Path,
    scene: Option<&Path>,
    config: Option<&Path>,
    out: &Path,
) -> Result<(), Failure> {
    let cfg = RunConfig::load(config)?;
    let pose = read_pose(pose)?;
    let pkg = scene.map(ScenePackage::load).transpose()?;
    let mesh = match (&pkg, mesh) {
        (Some(p), m) => scene_mesh(p, m, texture)?,
        (None, Some(m)) => mesh_arg(m, texture)?.0,
        (None, None) => return Err(Failure::Config("render-debug needs --mesh or --scene".into())),
    };
    let k = pkg.as_ref().map_or_else(default_camera, |p| p.intrinsics);
    let fb = render_channels(&mesh, &pose, &k, &RenderConfig::for_camera(&k, cfg.render));
    std::fs::create_dir_all(out).map_err(|e| load_err(out)(e.to_string()))?;
    let io = |e: posefit::ImageIoError| Failure::Load(e.to_string());
    write_color_png(&out.join("color.png"), &fb.color).map_err(io)?;
    write_depth_png(&out.join("depth.png"), &posefit::pixels::encode_depth(&fb.depth, DEPTH_SCALE)).map_err(io)?;
    write_gray_png(&out.join("silhouette.png"), &fb.silhouette).map_err(io)?;
    match &pkg {
        Some(p) => {
            let obs = p.observation(1.0, cfg.dilation_px)?;
            let (edges, _) = rendered_edges(&obs, &fb);
            write_gray_png(&out.join("edges.png"), &gray(&edges, 1.0)).map_err(io)?;
            write_gray_png(&out.join("active_mask.png"), obs.effective_mask()).map_err(io)?;
            let residual = ImageF {
                channels: 1,
                data: fb.color.data.chunks(3).zip(p.color.data.chunks(3)).map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / 3.0).collect(),
                ..fb.silhouette.clone()
            };
            write_gray_png(&out.join("residual.png"), &residual).map_err(io)?;
            let loss = loss_value(&obs, &fb, &cfg.weights)?;
            write_text(&out.join("loss.json"), serde_json::to_string_pretty(&loss).expect("loss serializes"))?;
        }
        None => write_gray_png(&out.join("edges.png"), &gray(&edge_map(&fb.color), 1.0)).map_err(io)?,
    }
    println!("{}", out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Refine { scene, mesh, texture, init_pose, config, out, trace, seed } => {
            cmd_refine(&scene, mesh.as_deref(), texture.as_deref(), &init_pose, config.as_deref(), &out, trace.as_deref(), seed)
        }
        Command::Benchmark { config, out, seed, trials, scenes, levels, no_ablations } => {
            cmd_benchmark(config.as_deref(), &out, seed, trials, scenes, levels, no_ablations)
        }
        Command::Synth { mesh, texture, pose, seed, config, level, color_sigma, depth_sigma, out } => {
            cmd_synth(&mesh, texture.as_deref(), pose.as_deref(), seed, config.as_deref(), level.as_deref(), color_sigma, depth_sigma, &out)
        }
        Command::GradCheck { config, seed, scenes, out } => cmd_grad_check(config.as_deref(), seed, scenes, out.as_deref()),
        Command::RenderDebug { mesh, texture, pose, scene, config, out } => {
            cmd_render_debug(mesh.as_deref(), texture.as_deref(), &pose, scene.as_deref(), config.as_deref(), &out)
        }
        Command::Defaults => {
            println!("{}", serde_json::to_string_pretty(&RunConfig::default()).expect("config serializes"));
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let listing = config::defaults_listing();
    let mut cmd = Cli::command().after_help(listing.clone());
    for name in ["refine", "benchmark", "synth", "grad-check", "render-debug", "defaults"] {
        cmd = cmd.mut_subcommand(name, |s| s.after_help(listing.clone()));
    }
    let cli = match Cli::from_arg_matches(&cmd.get_matches()) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("posefit: {}", f.message());
            ExitCode::from(f.code() as u8)
        }
    }
}
