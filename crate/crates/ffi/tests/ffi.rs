use std::ffi::{CStr, CString};
use std::path::PathBuf;
use std::process::Command;
use std::ptr;

use spme_doe_ffi::*;

fn last_error() -> String {
    let mut buf = vec![0 as std::ffi::c_char; 1024];
    unsafe {
        spme_doe_last_error(buf.as_mut_ptr(), buf.len());
        CStr::from_ptr(buf.as_ptr()).to_string_lossy().into_owned()
    }
}

fn builtin() -> *mut SpmeDoeConfig {
    let mut cfg = ptr::null_mut();
    assert_eq!(unsafe { spme_doe_config_builtin(&mut cfg) }, SpmeDoeStatus::Ok);
    cfg
}

#[test]
fn simulate_matches_core() {
    let cfg = builtin();
    let inputs = vec![20.0; 40];
    let mut v = vec![0.0; 40];
    let s = unsafe { spme_doe_simulate(cfg, SpmeDoeParams::Truth, inputs.as_ptr(), 40, v.as_mut_ptr()) };
    assert_eq!(s, SpmeDoeStatus::Ok, "{}", last_error());

    let c = spme_doe::config::LoadedConfig::builtin();
    let model = spme_doe::model::Spme::new(&c.cell, &c.truth).unwrap();
    let traj = spme_doe::model::simulate(&model, &c.x0, &inputs, c.campaign.t_s, &c.campaign.integrator).unwrap();
    assert_eq!(v, traj.outputs);
    unsafe { spme_doe_config_free(cfg) };
}

#[test]
fn errors_are_reported() {
    let mut cfg = ptr::null_mut();
    let path = CString::new("/nonexistent/config.toml").unwrap();
    assert_eq!(unsafe { spme_doe_config_load(path.as_ptr(), &mut cfg) }, SpmeDoeStatus::Config);
    assert!(cfg.is_null());
    assert!(last_error().contains("/nonexistent/config.toml"));

    let body = CString::new("[campaign]\nplant = \"p2d\"\n").unwrap();
    let name = CString::new("inline.toml").unwrap();
    assert_eq!(unsafe { spme_doe_config_parse(body.as_ptr(), name.as_ptr(), &mut cfg) }, SpmeDoeStatus::Config);
    assert!(last_error().starts_with("inline.toml:"), "{}", last_error());

    let cfg = builtin();
    let mut v = [0.0; 1];
    assert_eq!(
        unsafe { spme_doe_simulate(cfg, SpmeDoeParams::Truth, ptr::null(), 1, v.as_mut_ptr()) },
        SpmeDoeStatus::NullPointer
    );
    assert_eq!(
        unsafe { spme_doe_config_set_campaign(cfg, SpmeDoeMethod::OptimalDoe, 0, 0) },
        SpmeDoeStatus::InvalidArgument
    );
    // A current far beyond the cell's capacity drives the surface out of range.
    let u = [1e5; 10];
    let mut out = [0.0; 10];
    let s = unsafe { spme_doe_simulate(cfg, SpmeDoeParams::Truth, u.as_ptr(), 10, out.as_mut_ptr()) };
    assert_eq!(s, SpmeDoeStatus::Numerical, "{}", last_error());
    unsafe { spme_doe_config_free(cfg) };
    unsafe { spme_doe_config_free(ptr::null_mut()) };
}

#[test]
fn short_campaign_round_trip() {
    let cfg = builtin();
    assert_eq!(
        unsafe { spme_doe_config_set_campaign(cfg, SpmeDoeMethod::CcDischarge, 2, 7) },
        SpmeDoeStatus::Ok
    );
    let mut c = ptr::null_mut();
    assert_eq!(unsafe { spme_doe_campaign_run(cfg, &mut c) }, SpmeDoeStatus::Ok, "{}", last_error());
    let mut n = 0;
    assert_eq!(unsafe { spme_doe_campaign_len(c, &mut n) }, SpmeDoeStatus::Ok);
    assert_eq!(n, 2);
    let mut e = SpmeDoeExperiment::default();
    assert_eq!(unsafe { spme_doe_campaign_experiment(c, 1, &mut e) }, SpmeDoeStatus::Ok);
    assert_eq!(e.index, 2);
    assert_eq!(e.status, 0);
    assert!(e.distance.is_finite() && e.trace > 0.0);
    assert_eq!(
        unsafe { spme_doe_campaign_experiment(c, 2, &mut e) },
        SpmeDoeStatus::InvalidArgument
    );

    let mut need = 0;
    assert_eq!(
        unsafe { spme_doe_campaign_summary(c, ptr::null_mut(), 0, &mut need) },
        SpmeDoeStatus::BufferTooSmall
    );
    let mut buf = vec![0 as std::ffi::c_char; need];
    assert_eq!(unsafe { spme_doe_campaign_summary(c, buf.as_mut_ptr(), need, &mut need) }, SpmeDoeStatus::Ok);
    let text = unsafe { CStr::from_ptr(buf.as_ptr()) }.to_str().unwrap();
    assert!(text.contains("method = \"cc-discharge\""));
    assert!(text.contains("rng_seed = 7"));
    unsafe {
        spme_doe_campaign_free(c);
        spme_doe_config_free(cfg);
    }
}

#[test]
fn header_declares_the_interface() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/spme_doe.h")).unwrap();
    for name in [
        "spme_doe_config_load",
        "spme_doe_config_parse",
        "spme_doe_simulate",
        "spme_doe_campaign_run",
        "spme_doe_campaign_summary",
        "spme_doe_last_error",
        "typedef struct SpmeDoeConfig SpmeDoeConfig",
        "SPME_DOE_STATUS_BUFFER_TOO_SMALL",
    ] {
        assert!(header.contains(name), "{name} missing from header");
    }
}

/// Compiles the C smoke test against the header and the static library.
#[test]
fn c_program_links_and_runs() {
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    if Command::new(&cc).arg("--version").output().is_err() {
        eprintln!("SKIP: no C compiler ({cc})");
        return;
    }
    let manifest = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    // target/<profile>/deps/<test binary>
    let profile_dir = std::env::current_exe().unwrap().parent().unwrap().parent().unwrap().to_path_buf();
    let lib = profile_dir.join("libspme_doe_ffi.a");
    if !lib.exists() {
        eprintln!("SKIP: {} not built", lib.display());
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let exe = dir.path().join("smoke");
    let status = Command::new(&cc)
        .arg(manifest.join("tests/c/smoke.c"))
        .arg("-I")
        .arg(manifest.join("include"))
        .arg(&lib)
        .args(["-lm", "-lpthread", "-ldl", "-o"])
        .arg(&exe)
        .status()
        .unwrap();
    assert!(status.success(), "C compile failed");
    let out = Command::new(&exe).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("ok "));
}
