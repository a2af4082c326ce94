//! Run directories, time-series files and manifests.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::campaign::{CampaignResult, ExperimentTiming};
use crate::config::LoadedConfig;
use crate::error::{Error, Result};

pub const TIME_COLUMN: &str = "time_s";
pub const CURRENT_COLUMN: &str = "current_A";
pub const VOLTAGE_COLUMN: &str = "voltage_V";
pub const MEASURED_COLUMN: &str = "measured_V";

pub const CONFIG_FILE: &str = "config.toml";
pub const SUMMARY_FILE: &str = "summary.toml";
pub const TIMINGS_FILE: &str = "timings.toml";
pub const MANIFEST_FILE: &str = "manifest.toml";

/// One sampled trajectory. Row k holds the current applied over
/// [k t_s, (k+1) t_s) and the voltage sampled at the end of that interval.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeries {
    pub t_s: f64,
    pub current: Vec<f64>,
    pub voltage: Vec<f64>,
    pub measured: Option<Vec<f64>>,
}

impl TimeSeries {
    /// Noisy samples when present, otherwise the clean voltage.
    pub fn observations(&self) -> &[f64] {
        self.measured.as_deref().unwrap_or(&self.voltage)
    }
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::Config(format!("{}: {e}", path.display()))
}

pub fn write_timeseries(path: &Path, series: &TimeSeries) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut header = vec![TIME_COLUMN, CURRENT_COLUMN, VOLTAGE_COLUMN];
    if series.measured.is_some() {
        header.push(MEASURED_COLUMN);
    }
    w.write_record(&header).map_err(|e| csv_error(path, e))?;
    for k in 0..series.current.len() {
        let mut row = vec![
            ((k + 1) as f64 * series.t_s).to_string(),
            series.current[k].to_string(),
            series.voltage[k].to_string(),
        ];
        if let Some(m) = &series.measured {
            row.push(m[k].to_string());
        }
        w.write_record(&row).map_err(|e| csv_error(path, e))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_timeseries(path: &Path) -> Result<TimeSeries> {
    read_series(path, true)
}

/// An input profile: only the time and current columns are required and
/// `voltage` may come back empty.
pub fn read_currents(path: &Path) -> Result<TimeSeries> {
    read_series(path, false)
}

fn read_series(path: &Path, need_voltage: bool) -> Result<TimeSeries> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let header = r.headers().map_err(|e| csv_error(path, e))?.clone();
    let column = |name: &str| header.iter().position(|h| h == name);
    let missing = |name: &str| Error::Config(format!("{}: missing column {name}", path.display()));
    let ti = column(TIME_COLUMN).ok_or_else(|| missing(TIME_COLUMN))?;
    let ci = column(CURRENT_COLUMN).ok_or_else(|| missing(CURRENT_COLUMN))?;
    let vi = match column(VOLTAGE_COLUMN) {
        Some(i) => Some(i),
        None if need_voltage => return Err(missing(VOLTAGE_COLUMN)),
        None => None,
    };
    let mi = column(MEASURED_COLUMN);
    let (mut time, mut current, mut voltage, mut measured) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (row, record) in r.records().enumerate() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let field = |i: usize| -> Result<f64> {
            record.get(i).and_then(|s| s.trim().parse().ok()).ok_or_else(|| {
                Error::Config(format!(
                    "{}:{}: column {} is not a number",
                    path.display(),
                    row + 2,
                    header.get(i).unwrap_or("?")
                ))
            })
        };
        time.push(field(ti)?);
        current.push(field(ci)?);
        if let Some(vi) = vi {
            voltage.push(field(vi)?);
        }
        if let Some(mi) = mi {
            measured.push(field(mi)?);
        }
    }
    if time.is_empty() {
        return Err(Error::Config(format!("{}: no samples", path.display())));
    }
    let t_s = time[0];
    for (k, t) in time.iter().enumerate() {
        let expected = (k + 1) as f64 * t_s;
        if t_s <= 0.0 || (t - expected).abs() > 1e-9 * expected.max(1.0) {
            return Err(Error::Config(format!(
                "{}:{}: samples must be uniformly spaced starting at one period",
                path.display(),
                k + 2
            )));
        }
    }
    Ok(TimeSeries {
        t_s,
        current,
        voltage,
        measured: mi.map(|_| measured),
    })
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn write_summary(path: &Path, result: &CampaignResult) -> Result<()> {
    let text = toml::to_string(result).map_err(|e| Error::Config(format!("summary: {e}")))?;
    fs::write(path, text)?;
    Ok(())
}

pub fn read_summary(path: &Path) -> Result<CampaignResult> {
    let text = fs::read_to_string(path)?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {}", path.display(), e.message())))
}

#[derive(Serialize, Deserialize)]
struct Timings {
    experiments: Vec<ExperimentTiming>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub software_version: String,
    pub seed: u64,
    pub started: String,
    pub finished: String,
    /// The configuration exactly as written to config.toml.
    pub config: String,
    pub files: Vec<FileDigest>,
}

impl RunManifest {
    /// Checks every listed file against its digest.
    pub fn verify(&self, dir: &Path) -> Result<()> {
        for f in &self.files {
            let digest = sha256_file(&dir.join(&f.path))?;
            if digest != f.sha256 {
                return Err(Error::Config(format!("{}: digest mismatch", f.path)));
            }
        }
        let on_disk = fs::read_to_string(dir.join(CONFIG_FILE))?;
        if on_disk != self.config {
            return Err(Error::Config("config.toml differs from the manifest snapshot".into()));
        }
        Ok(())
    }
}

pub fn read_manifest(dir: &Path) -> Result<RunManifest> {
    let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{MANIFEST_FILE}: {}", e.message())))
}

pub fn now_rfc3339() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

/// Directory name derived from the configuration snapshot and the seed.
pub fn run_dir_name(config_toml: &str, seed: u64) -> String {
    let digest = hex::encode(Sha256::digest(config_toml.as_bytes()));
    format!("run-{}-seed{seed}", &digest[..12])
}

pub fn experiment_file(index: usize) -> String {
    format!("experiment_{index:02}.csv")
}

/// Writes a finished campaign under `root` and returns the run directory.
pub fn write_campaign_run(
    root: &Path,
    config: &LoadedConfig,
    result: &CampaignResult,
    started: &str,
    finished: &str,
) -> Result<PathBuf> {
    let snapshot = config.to_toml();
    let dir = root.join(run_dir_name(&snapshot, config.campaign.rng_seed));
    fs::create_dir_all(&dir)?;

    let mut written = vec![CONFIG_FILE.to_string(), SUMMARY_FILE.to_string()];
    fs::write(dir.join(CONFIG_FILE), &snapshot)?;
    write_summary(&dir.join(SUMMARY_FILE), result)?;
    for d in &result.data {
        let name = experiment_file(d.index);
        write_timeseries(
            &dir.join(&name),
            &TimeSeries {
                t_s: d.t_s,
                current: d.inputs.clone(),
                voltage: d.voltages.clone(),
                measured: Some(d.measured.clone()),
            },
        )?;
        written.push(name);
    }
    // Wall-clock timings vary between runs and live outside the summary.
    let timings = toml::to_string(&Timings {
        experiments: result.timings.clone(),
    })
    .map_err(|e| Error::Config(format!("timings: {e}")))?;
    fs::write(dir.join(TIMINGS_FILE), timings)?;
    written.push(TIMINGS_FILE.to_string());

    let files = written
        .into_iter()
        .map(|path| {
            let full = dir.join(&path);
            Ok(FileDigest {
                sha256: sha256_file(&full)?,
                bytes: fs::metadata(&full)?.len(),
                path,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = RunManifest {
        software_version: env!("CARGO_PKG_VERSION").to_string(),
        seed: config.campaign.rng_seed,
        started: started.to_string(),
        finished: finished.to_string(),
        config: snapshot,
        files,
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::Config(format!("manifest: {e}")))?;
    fs::write(dir.join(MANIFEST_FILE), text)?;
    Ok(dir)
}
