use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use spme_doe::io::{read_manifest, read_summary, read_timeseries, SUMMARY_FILE};

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spme-doe"))
        .args(args)
        .env_remove("SPME_DOE_CONFIG")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn arg(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn zero_current_simulation_is_flat() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("rest.csv");
    let o = cli(&["simulate", "--current", "0", "--duration", "500", "-o", arg(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let ts = read_timeseries(&out).unwrap();
    assert_eq!(ts.voltage.len(), 100);
    assert!(ts.voltage.iter().all(|v| (v - ts.voltage[0]).abs() < 1e-12));
}

#[test]
fn estimate_returns_generating_parameters() {
    let dir = tempfile::tempdir().unwrap();
    let rec = dir.path().join("ms.csv");
    let est = dir.path().join("est.toml");
    let o = cli(&["simulate", "--multisine", "--params", "truth", "-o", arg(&rec)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = cli(&["estimate", arg(&rec), "-o", arg(&est)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let value: toml::Value = toml::from_str(&fs::read_to_string(&est).unwrap()).unwrap();
    let scaled = value["scaled"].as_array().unwrap();
    assert_eq!(scaled.len(), 7);
    for s in scaled {
        let s = s.as_float().unwrap();
        assert!((s - 1.0).abs() < 1e-3, "{}", stdout(&o));
    }

    let o = cli(&["validate", "--params", arg(&est)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("validation RMS"));
}

#[test]
fn exit_codes() {
    assert_eq!(cli(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(cli(&["simulate"]).status.code(), Some(1));
    assert_eq!(cli(&["--help"]).status.code(), Some(0));

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "colour = 3\n").unwrap();
    let out = dir.path().join("x.csv");
    let o = cli(&["-c", arg(&bad), "simulate", "--current", "1", "-o", arg(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("bad.toml:1:1"), "{}", stderr(&o));

    let o = cli(&["-c", arg(&dir.path().join("missing.toml")), "design", "-o", arg(&out)]);
    assert_eq!(o.status.code(), Some(2));

    // Far beyond what the particles can deliver.
    let o = cli(&["simulate", "--current", "1e5", "--duration", "50", "-o", arg(&out)]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn campaign_run_directory_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let runs = dir.path().join("runs");
    let args = ["campaign", "--method", "cc-discharge", "--experiments", "2", "--seed", "7", "-o", arg(&runs)];
    let first = cli(&args);
    assert!(first.status.success(), "{}", stderr(&first));
    let text = stdout(&first);
    let run_line = text.lines().find(|l| l.starts_with("run directory: ")).unwrap();
    let run = Path::new(run_line.trim_start_matches("run directory: ")).to_path_buf();
    assert!(run.file_name().unwrap().to_str().unwrap().ends_with("-seed7"));
    let rows = text.lines().filter(|l| l.trim_start().starts_with(['1', '2'])).count();
    assert_eq!(rows, 2, "{text}");

    let manifest = read_manifest(&run).unwrap();
    manifest.verify(&run).unwrap();
    assert_eq!(manifest.seed, 7);
    let summary = read_summary(&run.join(SUMMARY_FILE)).unwrap();
    assert_eq!(summary.experiments.len(), 2);
    let before = fs::read(run.join(SUMMARY_FILE)).unwrap();

    let second = cli(&args);
    assert!(second.status.success(), "{}", stderr(&second));
    assert_eq!(fs::read(run.join(SUMMARY_FILE)).unwrap(), before);
    read_manifest(&run).unwrap().verify(&run).unwrap();

    let report = dir.path().join("report");
    let o = cli(&["report", arg(&run), "-o", arg(&report)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let md = fs::read_to_string(report.join("report.md")).unwrap();
    assert!(md.contains("| cc-discharge | 1 |"), "{md}");
    assert!(report.join("distance.svg").exists());
}
