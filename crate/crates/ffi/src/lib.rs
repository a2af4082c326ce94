//! C interface. Every function returns an `SpmeDoeStatus`; on failure the
//! message is kept per thread and read back with `spme_doe_last_error`.
//! Handles are opaque and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use spme_doe::campaign::{run_campaign, CampaignResult, ExperimentStatus, Method};
use spme_doe::config::{load_config, parse_config, LoadedConfig, PARAMETER_COUNT};
use spme_doe::model::{simulate, Spme};
use spme_doe::Error;

/// Number of identifiable parameters.
pub const SPME_DOE_PARAMETER_COUNT: usize = 7;
const _: () = assert!(SPME_DOE_PARAMETER_COUNT == PARAMETER_COUNT);

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpmeDoeStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Numerical = 4,
    Safety = 5,
    Io = 6,
    BufferTooSmall = 7,
    Panic = 8,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpmeDoeMethod {
    OptimalDoe = 0,
    CcDischarge = 1,
    Multistep = 2,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpmeDoeParams {
    Truth = 0,
    Initial = 1,
}

/// Loaded configuration.
pub struct SpmeDoeConfig(LoadedConfig);

/// Finished campaign.
pub struct SpmeDoeCampaign(CampaignResult);

/// Per-experiment figures copied out of a campaign.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct SpmeDoeExperiment {
    pub index: usize,
    /// 0 completed, 1 failed, 2 estimation failed.
    pub status: i32,
    pub estimate: [f64; SPME_DOE_PARAMETER_COUNT],
    pub distance: f64,
    /// Scaled variances; NaN when no metrics were computed.
    pub variances: [f64; SPME_DOE_PARAMETER_COUNT],
    pub trace: f64,
    pub kappa: f64,
    pub gamma: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(e: &Error) -> SpmeDoeStatus {
    match e.root() {
        Error::Config(_) | Error::Invalid(_) | Error::Parse { .. } | Error::MissingP2dParameters(_) => {
            SpmeDoeStatus::Config
        }
        Error::Io(_) => SpmeDoeStatus::Io,
        Error::Safety { .. } => SpmeDoeStatus::Safety,
        _ => SpmeDoeStatus::Numerical,
    }
}

fn guard<F: FnOnce() -> Result<(), (SpmeDoeStatus, String)>>(f: F) -> SpmeDoeStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            SpmeDoeStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            SpmeDoeStatus::Panic
        }
    }
}

fn lib(e: Error) -> (SpmeDoeStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (SpmeDoeStatus, String) {
    (SpmeDoeStatus::NullPointer, format!("{what} is null"))
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, (SpmeDoeStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (SpmeDoeStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

/// Copies the last error message of this thread into `buf` (NUL-terminated,
/// truncated to `len`) and returns the full message length without the NUL.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn spme_doe_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn spme_doe_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// The built-in identification configuration.
///
/// # Safety
/// `out` must be a valid pointer to a handle slot.
#[no_mangle]
pub unsafe extern "C" fn spme_doe_config_builtin(out: *mut *mut SpmeDoeConfig) -> SpmeDoeStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = Box::into_raw(Box::new(SpmeDoeConfig(LoadedConfig::builtin())));
        Ok(())
    })
}

/// Loads and validates a TOML configuration file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn spme_doe_config_load(path: *const c_char, out: *mut *mut SpmeDoeConfig) -> SpmeDoeStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let path = text(path, "path")?;
        let cfg = load_config(Path::new(path)).map_err(lib)?;
        *out = Box::into_raw(Box::new(SpmeDoeConfig(cfg)));
        Ok(())
    })
}

/// Parses configuration text; `name` is used in diagnostics.
///
/// # Safety
/// `toml` and `name` must be NUL-terminated strings and `out` a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn spme_doe_config_parse(
    toml: *const c_char,
    name: *const c_char,
    out: *mut *mut SpmeDoeConfig,
) -> SpmeDoeStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let body = text(toml, "toml")?;
        let name = text(name, "name")?;
        let cfg = parse_config(body, name).map_err(lib)?;
        *out = Box::into_raw(Box::new(SpmeDoeConfig(cfg)));
        Ok(())
    })
}

/// # Safety
/// `cfg` must be null or a handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn spme_doe_config_free(cfg: *mut SpmeDoeConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Overrides the campaign method, experiment count and noise seed.
///
/// # Safety
/// `cfg` must be a live configuration handle.
#[no_mangle]
pub unsafe extern "C" fn spme_doe_config_set_campaign(
    cfg: *mut SpmeDoeConfig,
    method: SpmeDoeMethod,
    n_experiments: usize,
    seed: u64,
) -> SpmeDoeStatus {
    guard(|| {
        let cfg = cfg.as_mut().ok_or_else(|| null("cfg"))?;
        if n_experiments == 0 {
            return Err((SpmeDoeStatus::InvalidArgument, "n_experiments must be positive".into()));
        }
        let c = &mut cfg.0.campaign;
        c.method = match method {
            SpmeDoeMethod::OptimalDoe => Method::OptimalDoe,
            SpmeDoeMethod::CcDischarge => Method::CcDischarge,
            SpmeDoeMethod::Multistep => Method::Multistep,
        };
        c.n_experiments = n_experiments;
        c.rng_seed = seed;
        Ok(())
    })
}

/// Sample period of the configuration in s.
///
/// # Safety
/// `cfg` must be a live configuration handle and `t_s` writable.
#[no_mangle]
pub unsafe extern "C" fn spme_doe_config_sample_period(cfg: *const SpmeDoeConfig, t_s: *mut f64) -> SpmeDoeStatus {
    guard(|| {
        let cfg = cfg.as_ref().ok_or_else(|| null("cfg"))?;
        let t_s = t_s.as_mut().ok_or_else(|| null("t_s"))?;
        *t_s = cfg.0.campaign.t_s;
        Ok(())
    })
}

/// Simulates the SPMe from the configured initial state. Sample k of
/// `voltages` is the terminal voltage at the end of interval k.
///
/// # Safety
/// `inputs` and `voltages` must each point to `n` elements.
#[no_mangle]
pub unsafe extern "C" fn spme_doe_simulate(
    cfg: *const SpmeDoeConfig,
    params: SpmeDoeParams,
    inputs: *const f64,
    n: usize,
    voltages: *mut f64,
) -> SpmeDoeStatus {
    guard(|| {
        let cfg = &cfg.as_ref().ok_or_else(|| null("cfg"))?.0;
        if n == 0 {
            return Err((SpmeDoeStatus::InvalidArgument, "no inputs".into()));
        }
        if inputs.is_null() {
            return Err(null("inputs"));
        }
        if voltages.is_null() {
            return Err(null("voltages"));
        }
        let u = std::slice::from_raw_parts(inputs, n);
        let p = match params {
            SpmeDoeParams::Truth => cfg.truth,
            SpmeDoeParams::Initial => cfg.initial,
        };
        let model = Spme::new(&cfg.cell, &p).map_err(lib)?;
        let traj = simulate(&model, &cfg.x0, u, cfg.campaign.t_s, &cfg.campaign.integrator).map_err(lib)?;
        std::slice::from_raw_parts_mut(voltages, n).copy_from_slice(&traj.outputs);
        Ok(())
    })
}

/// Runs a campaign. Blocks until every experiment has finished.
///
/// # Safety
/// `cfg` must be a live configuration handle and `out` a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn spme_doe_campaign_run(
    cfg: *const SpmeDoeConfig,
    out: *mut *mut SpmeDoeCampaign,
) -> SpmeDoeStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let cfg = &cfg.as_ref().ok_or_else(|| null("cfg"))?.0;
        let result = run_campaign(&cfg.campaign, &cfg.setup()).map_err(lib)?;
        *out = Box::into_raw(Box::new(SpmeDoeCampaign(result)));
        Ok(())
    })
}

/// # Safety
/// `campaign` must be null or a handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn spme_doe_campaign_free(campaign: *mut SpmeDoeCampaign) {
    if !campaign.is_null() {
        drop(Box::from_raw(campaign));
    }
}

/// Number of experiments recorded, including failed ones.
///
/// # Safety
/// `campaign` must be a live handle and `count` writable.
#[no_mangle]
pub unsafe extern "C" fn spme_doe_campaign_len(campaign: *const SpmeDoeCampaign, count: *mut usize) -> SpmeDoeStatus {
    guard(|| {
        let c = campaign.as_ref().ok_or_else(|| null("campaign"))?;
        *count.as_mut().ok_or_else(|| null("count"))? = c.0.experiments.len();
        Ok(())
    })
}

/// Copies experiment `i` (0-based) into `out`.
///
/// # Safety
/// `campaign` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn spme_doe_campaign_experiment(
    campaign: *const SpmeDoeCampaign,
    i: usize,
    out: *mut SpmeDoeExperiment,
) -> SpmeDoeStatus {
    guard(|| {
        let c = campaign.as_ref().ok_or_else(|| null("campaign"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let e = c.0.experiments.get(i).ok_or_else(|| {
            (
                SpmeDoeStatus::InvalidArgument,
                format!("experiment {i} out of range ({} recorded)", c.0.experiments.len()),
            )
        })?;
        let mut x = SpmeDoeExperiment {
            index: e.index,
            status: match e.status {
                ExperimentStatus::Completed => 0,
                ExperimentStatus::Failed => 1,
                ExperimentStatus::EstimationFailed => 2,
            },
            estimate: e.estimate,
            distance: e.distance,
            variances: [f64::NAN; SPME_DOE_PARAMETER_COUNT],
            trace: f64::NAN,
            kappa: f64::NAN,
            gamma: f64::NAN,
        };
        if let Some(m) = &e.metrics {
            x.variances.copy_from_slice(&m.variances);
            x.trace = m.trace;
            x.kappa = m.kappa;
            x.gamma = m.gamma;
        }
        *out = x;
        Ok(())
    })
}

/// Writes the campaign summary as TOML into `buf`. `written` receives the
/// required size including the NUL; BUFFER_TOO_SMALL is returned when `len`
/// is short, so a null `buf` can be used to query the size.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes; `written` must be writable.
#[no_mangle]
pub unsafe extern "C" fn spme_doe_campaign_summary(
    campaign: *const SpmeDoeCampaign,
    buf: *mut c_char,
    len: usize,
    written: *mut usize,
) -> SpmeDoeStatus {
    guard(|| {
        let c = campaign.as_ref().ok_or_else(|| null("campaign"))?;
        let written = written.as_mut().ok_or_else(|| null("written"))?;
        let text = toml::to_string(&c.0).map_err(|e| (SpmeDoeStatus::Numerical, e.to_string()))?;
        *written = text.len() + 1;
        if buf.is_null() || len < text.len() + 1 {
            return Err((
                SpmeDoeStatus::BufferTooSmall,
                format!("summary needs {} bytes", text.len() + 1),
            ));
        }
        ptr::copy_nonoverlapping(text.as_ptr().cast::<c_char>(), buf, text.len());
        *buf.add(text.len()) = 0;
        Ok(())
    })
}
