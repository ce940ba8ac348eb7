//! Report bundle: CSV tables, threshold curves and SVG plots.

use std::fmt::Write as _;
use std::path::Path;

use posefit::metrics::{auc, ThresholdCurve, AUC_MAX_THRESHOLD};
use posefit::optimizer::TraceEntry;

use crate::bench::{AucRow, BenchReport, TrialRecord, ALL_LEVELS};
use crate::error::HarnessError;

pub const RESULTS_HEADER: [&str; 10] =
    ["scene", "level", "trial", "input_add", "output_add", "winner_lr", "runtime_ms", "input_add_s", "output_add_s", "error"];

const CURVE_SAMPLES: usize = 200;

fn opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

fn writer(path: &Path) -> Result<csv::Writer<std::fs::File>, HarnessError> {
    csv::Writer::from_path(path).map_err(HarnessError::csv(path))
}

fn write_header(w: &mut csv::Writer<std::fs::File>, path: &Path, variant: bool) -> Result<(), HarnessError> {
    let header: Vec<&str> = variant.then_some("variant").into_iter().chain(RESULTS_HEADER).collect();
    w.write_record(&header).map_err(HarnessError::csv(path))
}

fn write_records(w: &mut csv::Writer<std::fs::File>, path: &Path, records: &[TrialRecord], variant: Option<&str>) -> Result<(), HarnessError> {
    for r in records {
        let mut row: Vec<String> = variant.map(|v| vec![v.to_string()]).unwrap_or_default();
        row.extend([
            r.scene.clone(),
            r.level.clone(),
            r.trial.to_string(),
            r.input_add.to_string(),
            opt(r.output_add),
            r.winner_lr.to_string(),
            r.runtime_ms.to_string(),
            opt(r.input_add_s),
            opt(r.output_add_s),
            r.error.clone().unwrap_or_default(),
        ]);
        w.write_record(&row).map_err(HarnessError::csv(path))?;
    }
    Ok(())
}

fn write_auc_rows(w: &mut csv::Writer<std::fs::File>, path: &Path, prefix: &[String], rows: &[AucRow]) -> Result<(), HarnessError> {
    for r in rows {
        let mut row = prefix.to_vec();
        row.extend([r.level.clone(), r.trials.to_string(), r.failures.to_string(), r.input_auc.to_string(), r.output_auc.to_string()]);
        w.write_record(&row).map_err(HarnessError::csv(path))?;
    }
    Ok(())
}

fn curve(errors: &[f64]) -> ThresholdCurve {
    auc(errors, AUC_MAX_THRESHOLD).expect("errors are finite and nonempty")
}

/// Every file of the bundle, relative to the report directory.
pub fn bundle_files(report: &BenchReport) -> Vec<String> {
    let mut files: Vec<String> = ["config.json", "results.csv", "auc_table.csv"].iter().map(|s| s.to_string()).collect();
    for level in curve_levels(report) {
        files.push(format!("curves/{level}.csv"));
        files.push(format!("plots/{level}.svg"));
    }
    if !report.ablations.is_empty() {
        files.push("ablation_table.csv".into());
        let mut names: Vec<&str> = report.ablations.iter().map(|a| a.ablation.as_str()).collect();
        names.dedup();
        for n in names {
            files.push(format!("ablations/{n}.csv"));
            files.push(format!("plots/ablation_{n}.svg"));
        }
    }
    files
}

fn curve_levels(report: &BenchReport) -> Vec<String> {
    report.auc.iter().map(|r| r.level.clone()).collect()
}

/// Writes the bundle under `dir`.
pub fn write_report(report: &BenchReport, dir: &Path) -> Result<(), HarnessError> {
    for sub in ["curves", "plots"] {
        std::fs::create_dir_all(dir.join(sub)).map_err(HarnessError::io(&dir.join(sub)))?;
    }
    let cfg_path = dir.join("config.json");
    let text = serde_json::to_string_pretty(&report.config).map_err(HarnessError::json(&cfg_path))?;
    std::fs::write(&cfg_path, text + "\n").map_err(HarnessError::io(&cfg_path))?;

    let path = dir.join("results.csv");
    let mut w = writer(&path)?;
    write_header(&mut w, &path, false)?;
    write_records(&mut w, &path, &report.records, None)?;
    w.flush().map_err(HarnessError::io(&path))?;

    let path = dir.join("auc_table.csv");
    let mut w = writer(&path)?;
    w.write_record(["level", "trials", "failures", "input_auc", "output_auc"]).map_err(HarnessError::csv(&path))?;
    write_auc_rows(&mut w, &path, &[], &report.auc)?;
    w.flush().map_err(HarnessError::io(&path))?;

    for level in curve_levels(report) {
        let sel: Vec<&TrialRecord> = report.records.iter().filter(|r| level == ALL_LEVELS || r.level == level).collect();
        let input = curve(&sel.iter().map(|r| r.input_add).collect::<Vec<_>>());
        let output = curve(&sel.iter().map(|r| r.output_error()).collect::<Vec<_>>());
        let path = dir.join("curves").join(format!("{level}.csv"));
        let mut w = writer(&path)?;
        w.write_record(["threshold_m", "input_fraction", "output_fraction"]).map_err(HarnessError::csv(&path))?;
        let (a, b) = (input.sampled(CURVE_SAMPLES), output.sampled(CURVE_SAMPLES));
        for ((t, fi), (_, fo)) in a.iter().zip(&b) {
            w.write_record([t.to_string(), fi.to_string(), fo.to_string()]).map_err(HarnessError::csv(&path))?;
        }
        w.flush().map_err(HarnessError::io(&path))?;
        let svg = curve_plot(
            &format!("ADD threshold curve: {level}"),
            &[(format!("input (AUC {:.3})", input.auc), a), (format!("refined (AUC {:.3})", output.auc), b)],
        );
        let path = dir.join("plots").join(format!("{level}.svg"));
        std::fs::write(&path, svg).map_err(HarnessError::io(&path))?;
    }

    if report.ablations.is_empty() {
        return Ok(());
    }
    std::fs::create_dir_all(dir.join("ablations")).map_err(HarnessError::io(&dir.join("ablations")))?;
    let path = dir.join("ablation_table.csv");
    let mut w = writer(&path)?;
    w.write_record(["ablation", "variant", "level", "trials", "failures", "input_auc", "output_auc"]).map_err(HarnessError::csv(&path))?;
    for a in &report.ablations {
        write_auc_rows(&mut w, &path, &[a.ablation.clone(), a.variant.clone()], &a.auc)?;
    }
    w.flush().map_err(HarnessError::io(&path))?;

    let mut names: Vec<&str> = report.ablations.iter().map(|a| a.ablation.as_str()).collect();
    names.dedup();
    for name in names {
        let runs: Vec<_> = report.ablations.iter().filter(|a| a.ablation == name).collect();
        let path = dir.join("ablations").join(format!("{name}.csv"));
        let mut w = writer(&path)?;
        write_header(&mut w, &path, true)?;
        for run in &runs {
            write_records(&mut w, &path, &run.records, Some(&run.variant))?;
        }
        w.flush().map_err(HarnessError::io(&path))?;

        let series: Vec<(String, f64)> =
            runs.iter().map(|r| (r.variant.clone(), r.auc.iter().find(|x| x.level == ALL_LEVELS).map_or(f64::NAN, |x| x.output_auc))).collect();
        let path = dir.join("plots").join(format!("ablation_{name}.svg"));
        std::fs::write(&path, bar_plot(&format!("Ablation: {name} (AUC, all levels)"), &series)).map_err(HarnessError::io(&path))?;
    }
    Ok(())
}

/// Reads a results.csv written by [`write_report`].
pub fn read_results(path: &Path) -> Result<Vec<TrialRecord>, HarnessError> {
    let mut r = csv::Reader::from_path(path).map_err(HarnessError::csv(path))?;
    let parse = |s: &str| -> Result<f64, HarnessError> { s.parse().map_err(|_| HarnessError::Inconsistent(format!("{}: bad number {s:?}", path.display()))) };
    let parse_opt = |s: &str| if s.is_empty() { Ok(None) } else { parse(s).map(Some) };
    let mut out = Vec::new();
    for row in r.records() {
        let row = row.map_err(HarnessError::csv(path))?;
        let f = |i: usize| row.get(i).unwrap_or("");
        out.push(TrialRecord {
            scene: f(0).to_string(),
            level: f(1).to_string(),
            trial: f(2).parse().map_err(|_| HarnessError::Inconsistent(format!("bad trial index {:?}", f(2))))?,
            input_add: parse(f(3))?,
            output_add: parse_opt(f(4))?,
            winner_lr: parse(f(5))?,
            runtime_ms: parse(f(6))?,
            input_add_s: parse_opt(f(7))?,
            output_add_s: parse_opt(f(8))?,
            diameter: f64::NAN,
            error: Some(f(9).to_string()).filter(|s| !s.is_empty()),
        });
    }
    Ok(out)
}

/// Per-iteration trace of one optimizer instance.
pub fn write_trace(path: &Path, trace: &[TraceEntry]) -> Result<(), HarnessError> {
    let mut w = writer(path)?;
    w.write_record(["iteration", "alpha", "total", "color", "depth", "edge", "silhouette", "qw", "qx", "qy", "qz", "tx", "ty", "tz"])
        .map_err(HarnessError::csv(path))?;
    for e in trace {
        let q = e.pose.rotation.as_array();
        let t = e.pose.translation;
        let l = e.loss;
        let row = [e.iteration as f64, e.alpha, l.total, l.color, l.depth, l.edge, l.silhouette, q[0], q[1], q[2], q[3], t.x, t.y, t.z];
        w.write_record(row.iter().enumerate().map(|(i, v)| if i == 0 { e.iteration.to_string() } else { v.to_string() }))
            .map_err(HarnessError::csv(path))?;
    }
    w.flush().map_err(HarnessError::io(path))
}

const W: f64 = 480.0;
const H: f64 = 320.0;
const M: f64 = 48.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

fn svg_frame(title: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#);
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="18" text-anchor="middle" font-size="13">{}</text>"#, W / 2.0, xml_escape(title));
    let _ = writeln!(s, r#"<rect x="{M}" y="{M}" width="{}" height="{}" fill="none" stroke="black"/>"#, W - 2.0 * M, H - 2.0 * M);
    s
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Step curves of fraction against threshold.
pub fn curve_plot(title: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    let mut s = svg_frame(title);
    let (pw, ph) = (W - 2.0 * M, H - 2.0 * M);
    for i in 0..=5 {
        let f = i as f64 / 5.0;
        let y = M + ph * (1.0 - f);
        let x = M + pw * f;
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{f:.1}</text>"#, M - 4.0, y + 4.0);
        let _ = writeln!(s, r#"<text x="{x}" y="{}" text-anchor="middle">{:.0}</text>"#, H - M + 14.0, f * AUC_MAX_THRESHOLD * 100.0);
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">ADD threshold (cm)</text>"#, W / 2.0, H - 10.0);
    for (k, (label, pts)) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let mut d = String::new();
        for (i, (t, f)) in pts.iter().enumerate() {
            let x = M + pw * t / AUC_MAX_THRESHOLD;
            let y = M + ph * (1.0 - f);
            let _ = write!(d, "{}{x:.2},{y:.2} ", if i == 0 { "M" } else { "L" });
        }
        let _ = writeln!(s, r#"<path d="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#, d.trim_end());
        let ly = M + 14.0 + 14.0 * k as f64;
        let _ = writeln!(s, r#"<text x="{}" y="{ly}" text-anchor="end" fill="{color}">{}</text>"#, W - M - 6.0, xml_escape(label));
    }
    s.push_str("</svg>\n");
    s
}

/// One bar per variant, heights in [0, 1].
pub fn bar_plot(title: &str, bars: &[(String, f64)]) -> String {
    let mut s = svg_frame(title);
    let (pw, ph) = (W - 2.0 * M, H - 2.0 * M);
    let n = bars.len().max(1) as f64;
    let slot = pw / n;
    for (i, (label, v)) in bars.iter().enumerate() {
        let v = if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 };
        let x = M + slot * (i as f64 + 0.15);
        let h = ph * v;
        let _ = writeln!(s, r#"<rect x="{x:.2}" y="{:.2}" width="{:.2}" height="{h:.2}" fill="{}"/>"#, M + ph - h, slot * 0.7, PALETTE[0]);
        let cx = M + slot * (i as f64 + 0.5);
        let _ = writeln!(s, r#"<text x="{cx:.2}" y="{}" text-anchor="middle">{}</text>"#, H - M + 14.0, xml_escape(label));
        let _ = writeln!(s, r#"<text x="{cx:.2}" y="{:.2}" text-anchor="middle">{v:.3}</text>"#, M + ph - h - 4.0);
    }
    s.push_str("</svg>\n");
    s
}
