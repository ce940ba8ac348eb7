use std::path::Path;
use std::process::{Command, Output};

fn posefit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_posefit")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &Path, extra: &[&str]) {
    let mut args = vec!["synth", "--mesh", "box", "--seed", "3", "--out", s(dir)];
    args.extend_from_slice(extra);
    let o = posefit(&args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

fn small_config(dir: &Path) -> std::path::PathBuf {
    let p = dir.join("config.json");
    std::fs::write(
        &p,
        r#"{"optim": {"batch": 8, "iters": 40},
            "benchmark": {"ablations": {"iterations": [5], "image_scales": [0.25], "sampling": true,
                                         "noise_baseline": {"rotation_deg": 10.0, "translation_m": 0.01}}}}"#,
    )
    .unwrap();
    p
}

#[test]
fn synth_then_refine_at_zero_perturbation() {
    let tmp = tempfile::tempdir().unwrap();
    let scene = tmp.path().join("scene");
    synth(&scene, &[]);
    let out = tmp.path().join("pose.json");
    // full resolution, so no resampling on top of the PNG quantization
    let cfg = tmp.path().join("full.json");
    std::fs::write(&cfg, r#"{"image_scale": 1.0, "optim": {"batch": 4, "iters": 10}}"#).unwrap();
    let init = scene.join("init_pose.json");
    let o = posefit(&["refine", "--scene", s(&scene), "--init-pose", s(&init), "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let summary: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    // 8-bit color and millimeter depth leave a quantization floor; the
    // in-memory round trip (harness tests/scenes.rs) starts at exactly 0
    let l0 = summary["initial_loss"].as_f64().unwrap();
    assert!((0.0..2e-3).contains(&l0), "{l0}");
    assert!(summary["output_add"].as_f64().unwrap() < 1e-3);
    assert!(out.is_file() && tmp.path().join("pose.trace.csv").is_file());
    let trace = std::fs::read_to_string(tmp.path().join("pose.trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 11);
}

#[test]
fn refine_is_deterministic_and_improves_a_medium_start() {
    let tmp = tempfile::tempdir().unwrap();
    let scene = tmp.path().join("scene");
    synth(&scene, &["--level", "medium"]);
    let cfg = small_config(tmp.path());
    let run = |name: &str| {
        let out = tmp.path().join(name);
        let o = posefit(&["refine", "--scene", s(&scene), "--init-pose", s(&scene.join("init_pose.json")), "--config", s(&cfg), "--out", s(&out), "--seed", "5"]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
        (std::fs::read(out).unwrap(), v)
    };
    let (a, v) = run("a.json");
    let (b, _) = run("b.json");
    assert_eq!(a, b);
    assert!(v["output_add"].as_f64().unwrap() < v["input_add"].as_f64().unwrap());
}

#[test]
fn missing_depth_with_depth_weight_is_a_load_failure() {
    let tmp = tempfile::tempdir().unwrap();
    let scene = tmp.path().join("scene");
    synth(&scene, &[]);
    std::fs::remove_file(scene.join("depth.png")).unwrap();
    let out = tmp.path().join("pose.json");
    let o = posefit(&["refine", "--scene", s(&scene), "--init-pose", s(&scene.join("init_pose.json")), "--out", s(&out)]);
    assert_eq!(code(&o), 3);
    assert!(!out.exists());

    // without the depth term the same package is fine
    let cfg = tmp.path().join("nodepth.json");
    std::fs::write(&cfg, r#"{"weights": {"lambda_d": 0.0}, "optim": {"batch": 2, "iters": 3}}"#).unwrap();
    let o = posefit(&["refine", "--scene", s(&scene), "--init-pose", s(&scene.join("init_pose.json")), "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let scene = tmp.path().join("scene");
    synth(&scene, &[]);
    let init = scene.join("init_pose.json");
    let out = tmp.path().join("pose.json");

    let bad = tmp.path().join("bad.json");
    std::fs::write(&bad, r#"{"optim": {"batchsize": 3}}"#).unwrap();
    let o = posefit(&["refine", "--scene", s(&scene), "--init-pose", s(&init), "--config", s(&bad), "--out", s(&out)]);
    assert_eq!(code(&o), 2);
    std::fs::write(&bad, r#"{"optim": {"decay": 0.0}}"#).unwrap();
    assert_eq!(code(&posefit(&["refine", "--scene", s(&scene), "--init-pose", s(&init), "--config", s(&bad), "--out", s(&out)])), 2);

    let o = posefit(&["refine", "--scene", s(&tmp.path().join("nowhere")), "--init-pose", s(&init), "--out", s(&out)]);
    assert_eq!(code(&o), 3);

    // a blank mask
    let blank = tmp.path().join("blank");
    synth(&blank, &[]);
    let mask = posefit::ImageF::new(320, 240, 1);
    posefit::pixels::write_gray_png(&blank.join("mask.png"), &mask).unwrap();
    assert_eq!(code(&posefit(&["refine", "--scene", s(&blank), "--init-pose", s(&init), "--out", s(&out)])), 4);

    // a step so large every instance blows up
    let huge = tmp.path().join("huge.json");
    std::fs::write(&huge, r#"{"optim": {"batch": 1, "iters": 5, "lr_low": 1e300, "lr_high": 1e300, "translation_scale": 1e10}}"#).unwrap();
    let o = posefit(&["refine", "--scene", s(&scene), "--init-pose", s(&scene.join("pose_gt.json")), "--config", s(&huge), "--out", s(&out)]);
    assert_eq!(code(&o), 5, "{}", String::from_utf8_lossy(&o.stderr));

    let gc = posefit(&["grad-check", "--scenes", "2", "--config", s(&bad)]);
    assert_eq!(code(&gc), 2);
}

#[test]
fn grad_check_reports_and_fails_above_tolerance() {
    let tmp = tempfile::tempdir().unwrap();
    let loose = tmp.path().join("loose.json");
    std::fs::write(&loose, r#"{"grad_check": {"step_translation": 1e-6, "step_quaternion": 1e-6, "tolerance": 0.05}}"#).unwrap();
    let out = tmp.path().join("gc.json");
    let o = posefit(&["grad-check", "--scenes", "3", "--config", s(&loose), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let r: serde_json::Value = serde_json::from_slice(&std::fs::read(&out).unwrap()).unwrap();
    assert_eq!(r["checks"].as_array().unwrap().len(), 3);

    let strict = tmp.path().join("strict.json");
    std::fs::write(&strict, r#"{"grad_check": {"tolerance": 1e-12}}"#).unwrap();
    assert_eq!(code(&posefit(&["grad-check", "--scenes", "2", "--config", s(&strict)])), 6);
}

#[test]
fn benchmark_emits_every_declared_file() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let out = tmp.path().join("report");
    let o = posefit(&["benchmark", "--config", s(&cfg), "--out", s(&out), "--trials", "1", "--scenes", "cube", "--levels", "medium"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let mut files = vec!["config.json", "results.csv", "auc_table.csv", "ablation_table.csv"];
    files.extend(["curves/medium.csv", "curves/all.csv", "plots/medium.svg", "plots/all.svg"]);
    for a in ["iterations", "image_scale", "sampling", "noise_baseline"] {
        assert!(out.join(format!("ablations/{a}.csv")).is_file(), "{a}");
        assert!(out.join(format!("plots/ablation_{a}.svg")).is_file(), "{a}");
    }
    for f in files {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let results = std::fs::read_to_string(out.join("results.csv")).unwrap();
    assert!(results.starts_with("scene,level,trial,input_add,output_add,winner_lr,runtime_ms"));
    assert_eq!(results.lines().count(), 2);
}

#[test]
fn render_debug_writes_channels() {
    let tmp = tempfile::tempdir().unwrap();
    let scene = tmp.path().join("scene");
    synth(&scene, &[]);
    let out = tmp.path().join("debug");
    let o = posefit(&["render-debug", "--scene", s(&scene), "--pose", s(&scene.join("pose_gt.json")), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["color.png", "depth.png", "silhouette.png", "edges.png", "residual.png", "active_mask.png", "loss.json"] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let o = posefit(&["render-debug", "--mesh", "prism", "--pose", s(&scene.join("pose_gt.json")), "--out", s(&tmp.path().join("d2"))]);
    assert_eq!(code(&o), 0);
}

#[test]
fn help_lists_config_defaults() {
    let o = posefit(&["refine", "--help"]);
    let text = String::from_utf8_lossy(&o.stdout);
    for needle in ["optim.batch", "32", "optim.iters", "100", "optim.lr_low", "0.001", "optim.lr_high", "50.0", "optim.decay", "0.1", "weights.lambda_c", "benchmark.trials"] {
        assert!(text.contains(needle), "help lacks {needle}");
    }
    let d = posefit(&["defaults"]);
    let v: serde_json::Value = serde_json::from_slice(&d.stdout).unwrap();
    assert_eq!(v["optim"]["batch"], 32);
}
