//! Summary tables and SVG line charts from finished run directories.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use plotters::prelude::*;

use crate::campaign::CampaignResult;
use crate::config::ParameterVector;
use crate::error::{Error, Result};
use crate::io::{experiment_file, read_summary, read_timeseries, SUMMARY_FILE};

const SIZE: (u32, u32) = (900, 540);

/// A loaded run directory.
pub struct RunReport {
    pub label: String,
    pub dir: PathBuf,
    pub result: CampaignResult,
}

pub fn load_run(dir: &Path) -> Result<RunReport> {
    let result = read_summary(&dir.join(SUMMARY_FILE))?;
    let label = serde_plain(&result.method);
    Ok(RunReport {
        label,
        dir: dir.to_path_buf(),
        result,
    })
}

fn serde_plain<T: serde::Serialize>(v: &T) -> String {
    #[derive(serde::Serialize)]
    struct W<'a, T> {
        v: &'a T,
    }
    let text = toml::to_string(&W { v }).unwrap_or_default();
    text.trim().trim_start_matches("v = ").trim_matches('"').to_string()
}

fn plot_error<E: std::fmt::Display>(e: E) -> Error {
    Error::Config(format!("chart rendering: {e}"))
}

/// Markdown table with one row per experiment and run.
pub fn summary_table(runs: &[RunReport]) -> String {
    let mut out = String::new();
    let names = ParameterVector::NAMES;
    let _ = writeln!(
        out,
        "| run | exp | status | distance | trace | kappa | gamma | {} |",
        names.map(|n| format!("var {n}")).join(" | ")
    );
    let _ = writeln!(out, "|{}", "---|".repeat(7 + names.len()));
    for run in runs {
        for e in &run.result.experiments {
            let (trace, kappa, gamma, vars) = match &e.metrics {
                Some(m) => (
                    format!("{:.3e}", m.trace),
                    format!("{:.1}", m.kappa),
                    format!("{:.1}", m.gamma),
                    m.variances.iter().map(|v| format!("{v:.2e}")).collect::<Vec<_>>(),
                ),
                None => ("-".into(), "-".into(), "-".into(), vec!["-".to_string(); names.len()]),
            };
            let _ = writeln!(
                out,
                "| {} | {} | {} | {:.4} | {trace} | {kappa} | {gamma} | {} |",
                run.label,
                e.index,
                serde_plain(&e.status),
                e.distance,
                vars.join(" | ")
            );
        }
    }
    out
}

fn distance_chart(path: &Path, runs: &[RunReport]) -> Result<()> {
    let root = SVGBackend::new(path, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(plot_error)?;
    let n = runs.iter().map(|r| r.result.experiments.len()).max().unwrap_or(1).max(1);
    let values: Vec<f64> = runs.iter().flat_map(|r| r.result.distances()).filter(|d| *d > 0.0).collect();
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min).min(1e-3);
    let hi = values.iter().cloned().fold(0.0, f64::max).max(1.0);
    let mut chart = ChartBuilder::on(&root)
        .caption("Scaled parameter distance", ("sans-serif", 22))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(70)
        .build_cartesian_2d(0f64..n as f64 + 0.5, (lo / 2.0..hi * 2.0).log_scale())
        .map_err(plot_error)?;
    chart
        .configure_mesh()
        .x_desc("experiment")
        .y_desc("distance to truth")
        .draw()
        .map_err(plot_error)?;
    for (i, run) in runs.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        let pts: Vec<(f64, f64)> = run
            .result
            .experiments
            .iter()
            .filter(|e| e.distance > 0.0)
            .map(|e| (e.index as f64, e.distance))
            .collect();
        chart
            .draw_series(LineSeries::new(pts.clone(), color.stroke_width(2)))
            .map_err(plot_error)?
            .label(run.label.clone())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color));
        chart
            .draw_series(pts.into_iter().map(|p| Circle::new(p, 3, color.filled())))
            .map_err(plot_error)?;
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(plot_error)?;
    root.present().map_err(plot_error)
}

fn variance_chart(path: &Path, run: &RunReport) -> Result<()> {
    let root = SVGBackend::new(path, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(plot_error)?;
    let exps: Vec<_> = run.result.experiments.iter().filter(|e| e.metrics.is_some()).collect();
    let values: Vec<f64> = exps
        .iter()
        .flat_map(|e| e.metrics.as_ref().unwrap().variances.clone())
        .filter(|v| *v > 0.0 && v.is_finite())
        .collect();
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min).min(1e-6);
    let hi = values.iter().cloned().fold(0.0, f64::max).max(1e-2);
    let n = run.result.experiments.len().max(1);
    let mut chart = ChartBuilder::on(&root)
        .caption(format!("Scaled variances, {}", run.label), ("sans-serif", 22))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(70)
        .build_cartesian_2d(0f64..n as f64 + 0.5, (lo / 2.0..hi * 2.0).log_scale())
        .map_err(plot_error)?;
    chart
        .configure_mesh()
        .x_desc("experiment")
        .y_desc("variance")
        .draw()
        .map_err(plot_error)?;
    for (j, name) in ParameterVector::NAMES.iter().enumerate() {
        let color = Palette99::pick(j).to_rgba();
        let pts: Vec<(f64, f64)> = exps
            .iter()
            .map(|e| (e.index as f64, e.metrics.as_ref().unwrap().variances[j]))
            .filter(|(_, v)| *v > 0.0 && v.is_finite())
            .collect();
        chart
            .draw_series(LineSeries::new(pts, color.stroke_width(2)))
            .map_err(plot_error)?
            .label(*name)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(plot_error)?;
    root.present().map_err(plot_error)
}

/// Current and voltage of every recorded experiment, end to end.
fn voltage_chart(path: &Path, run: &RunReport) -> Result<bool> {
    let mut t0 = 0.0;
    let mut voltage = Vec::new();
    let mut current = Vec::new();
    for e in &run.result.experiments {
        let file = run.dir.join(experiment_file(e.index));
        if !file.exists() {
            continue;
        }
        let ts = read_timeseries(&file)?;
        for k in 0..ts.current.len() {
            let t = t0 + (k + 1) as f64 * ts.t_s;
            voltage.push((t, ts.voltage[k]));
            current.push((t - ts.t_s, ts.current[k]));
            current.push((t, ts.current[k]));
        }
        t0 += ts.current.len() as f64 * ts.t_s;
    }
    if voltage.is_empty() {
        return Ok(false);
    }
    let root = SVGBackend::new(path, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(plot_error)?;
    let (upper, lower) = root.split_vertically(SIZE.1 / 2);
    let range = |v: &[(f64, f64)]| {
        let lo = v.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
        let hi = v.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
        let pad = ((hi - lo) * 0.05).max(1e-3);
        lo - pad..hi + pad
    };
    let mut top = ChartBuilder::on(&upper)
        .caption(format!("Applied experiments, {}", run.label), ("sans-serif", 22))
        .margin(10)
        .x_label_area_size(30)
        .y_label_area_size(70)
        .build_cartesian_2d(0.0..t0, range(&voltage))
        .map_err(plot_error)?;
    top.configure_mesh().y_desc("voltage [V]").draw().map_err(plot_error)?;
    top.draw_series(LineSeries::new(voltage, BLUE.stroke_width(1)))
        .map_err(plot_error)?;
    let mut bottom = ChartBuilder::on(&lower)
        .margin(10)
        .x_label_area_size(40)
        .y_label_area_size(70)
        .build_cartesian_2d(0.0..t0, range(&current))
        .map_err(plot_error)?;
    bottom
        .configure_mesh()
        .x_desc("time [s]")
        .y_desc("current [A]")
        .draw()
        .map_err(plot_error)?;
    bottom
        .draw_series(LineSeries::new(current, RED.stroke_width(1)))
        .map_err(plot_error)?;
    root.present().map_err(plot_error)?;
    Ok(true)
}

/// Writes report.md plus charts into `out` and returns the created files.
pub fn render_report(runs: &[RunReport], out: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out)?;
    let mut files = Vec::new();

    let mut md = String::from("# Campaign report\n\n");
    for run in runs {
        let r = &run.result;
        let _ = writeln!(
            md,
            "- {}: plant {}, seed {}, {} experiments, stop {}",
            run.label,
            serde_plain(&r.plant),
            r.rng_seed,
            r.experiments.len(),
            serde_plain(&r.stop)
        );
    }
    md.push('\n');
    md.push_str(&summary_table(runs));
    let path = out.join("report.md");
    fs::write(&path, md)?;
    files.push(path);

    let path = out.join("distance.svg");
    distance_chart(&path, runs)?;
    files.push(path);
    for (i, run) in runs.iter().enumerate() {
        let tag = format!("{}_{i}", run.label);
        let path = out.join(format!("variance_{tag}.svg"));
        variance_chart(&path, run)?;
        files.push(path);
        let path = out.join(format!("voltage_{tag}.svg"));
        if voltage_chart(&path, run)? {
            files.push(path);
        }
    }
    Ok(files)
}
