use posefit::metrics::{auc, AUC_MAX_THRESHOLD};
use posefit::{OptimConfig, PerturbSpec};
use posefit_harness::bench::{Ablations, BenchConfig, Level, ALL_LEVELS};
use posefit_harness::report::{bundle_files, read_results, write_report};
use posefit_harness::{run_benchmark, run_trials};

fn small(levels: Vec<Level>) -> BenchConfig {
    BenchConfig {
        scenes: vec!["cube".into(), "prism".into()],
        levels,
        trials: 3,
        seed: 11,
        optim: OptimConfig { batch: 4, iters: 20, ..OptimConfig::default() },
        record_timing: false,
        ablations: Ablations::none(),
        ..BenchConfig::default()
    }
}

#[test]
fn unperturbed_unrefined_scores_one() {
    let cfg = BenchConfig { refine: false, ..small(vec![Level::new("zero", PerturbSpec::NONE)]) };
    let r = run_benchmark(&cfg).unwrap();
    for row in &r.auc {
        assert_eq!(row.input_auc, 1.0);
        assert_eq!(row.output_auc, 1.0);
    }
}

#[test]
fn translation_only_input_error_is_the_offset() {
    let cfg = BenchConfig { refine: false, trials: 6, ..small(vec![Level::new("shift", PerturbSpec::new(0.0, 0.02))]) };
    let recs = run_trials(&cfg).unwrap();
    for r in &recs {
        assert!((r.input_add - 0.02).abs() < 1e-12, "{}", r.input_add);
    }
    let curve = auc(&recs.iter().map(|r| r.input_add).collect::<Vec<_>>(), AUC_MAX_THRESHOLD).unwrap();
    assert_eq!(curve.fraction_at(0.0199), 0.0);
    assert_eq!(curve.fraction_at(0.0201), 1.0);
    assert!((curve.auc - 0.6).abs() < 1e-9);
}

#[test]
fn same_seed_same_records() {
    let cfg = small(vec![Level::named("medium").unwrap()]);
    let a = run_trials(&cfg).unwrap();
    let b = run_trials(&cfg).unwrap();
    assert_eq!(a, b);
    let other = run_trials(&BenchConfig { seed: 12, ..cfg }).unwrap();
    assert_ne!(a, other);
}

#[test]
fn report_tables_match_raw_errors() {
    let cfg = BenchConfig {
        ablations: Ablations { iterations: vec![5], image_scales: vec![0.25], sampling: true, noise_baseline: Some(PerturbSpec::MEDIUM) },
        trials: 2,
        ..small(vec![Level::named("easy").unwrap(), Level::named("medium").unwrap()])
    };
    let report = run_benchmark(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_report(&report, dir.path()).unwrap();
    for f in bundle_files(&report) {
        assert!(dir.path().join(&f).is_file(), "missing {f}");
    }

    let raw = read_results(&dir.path().join("results.csv")).unwrap();
    assert_eq!(raw.len(), report.records.len());
    let mut table = csv::Reader::from_path(dir.path().join("auc_table.csv")).unwrap();
    let mut rows = 0;
    for row in table.records() {
        let row = row.unwrap();
        let level = &row[0];
        let sel: Vec<_> = raw.iter().filter(|r| level == ALL_LEVELS || r.level == level).collect();
        let input = auc(&sel.iter().map(|r| r.input_add).collect::<Vec<_>>(), AUC_MAX_THRESHOLD).unwrap().auc;
        let output = auc(&sel.iter().map(|r| r.output_add.unwrap_or(f64::MAX)).collect::<Vec<_>>(), AUC_MAX_THRESHOLD).unwrap().auc;
        assert!((row[3].parse::<f64>().unwrap() - input).abs() <= 1e-12);
        assert!((row[4].parse::<f64>().unwrap() - output).abs() <= 1e-12);
        rows += 1;
    }
    assert_eq!(rows, 3);

    // the iteration-5 ablation is a separate run, the sampling "uniform" one reuses the main records
    assert_eq!(report.ablation("sampling", "uniform").unwrap().records, report.records);
    assert_ne!(report.ablation("iterations", "5").unwrap().records, report.records);
}

#[test]
fn bad_configs_are_rejected() {
    let ok = small(vec![Level::named("easy").unwrap()]);
    assert!(ok.validate().is_ok());
    for bad in [
        BenchConfig { scenes: vec![], ..ok.clone() },
        BenchConfig { scenes: vec!["teapot".into()], ..ok.clone() },
        BenchConfig { trials: 0, ..ok.clone() },
        BenchConfig { image_scale: 0.0, ..ok.clone() },
        BenchConfig { levels: vec![Level::new("neg", PerturbSpec { rotation_deg: -1.0, translation_m: 0.0 })], ..ok.clone() },
    ] {
        assert!(run_trials(&bad).is_err());
    }
}
