use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use spme_doe::campaign::{
    add_noise, apply_inputs, build_plant, campaign_metrics, design_experiment, multisine_profile,
    run_campaign, validate, Method, Metrics, PlantKind,
};
use spme_doe::config::{load_config, LoadedConfig, ParameterVector, CONFIG_ENV};
use spme_doe::estimator::{estimate, scale, unscale, unscale_values, ExperimentRecord, ScaledParams};
use spme_doe::io::{self, TimeSeries};
use spme_doe::model::{simulate, Spme};
use spme_doe::report::{load_run, render_report};
use spme_doe::{Error, Result};

#[derive(Parser)]
#[command(name = "spme-doe", version, about = "SPMe parameter identification with optimal experiment design")]
struct Cli {
    /// Configuration file. Falls back to the built-in identification preset.
    #[arg(long, short, global = true, env = CONFIG_ENV)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one trajectory and write it as CSV.
    Simulate(SimulateArgs),
    /// Design an optimal input sequence.
    Design(DesignArgs),
    /// Fit the identifiable parameters to recorded trajectories.
    Estimate(EstimateArgs),
    /// Run a full identification campaign into a run directory.
    Campaign(CampaignArgs),
    /// Voltage RMS between the plant and the SPMe on a validation profile.
    Validate(ValidateArgs),
    /// Summary table and charts from campaign run directories.
    Report(ReportArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum ParamSet {
    Truth,
    Initial,
}

#[derive(Args, Clone)]
struct ProfileArgs {
    /// CSV with time_s and current_A columns.
    #[arg(long, conflicts_with_all = ["current", "multisine"])]
    profile: Option<PathBuf>,
    /// Constant current in A, positive on discharge.
    #[arg(long, allow_hyphen_values = true)]
    current: Option<f64>,
    /// Use the validation multisine instead of a constant current.
    #[arg(long, conflicts_with = "current")]
    multisine: bool,
    /// Length of a constant or multisine profile in s.
    #[arg(long, default_value_t = 1000.0)]
    duration: f64,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    profile: ProfileArgs,
    /// Simulate the plant from the configuration instead of the SPMe.
    #[arg(long)]
    plant: bool,
    /// Parameter set for the SPMe.
    #[arg(long, value_enum, default_value = "truth")]
    params: ParamSet,
    /// Add measurement noise with the configured variance and seed.
    #[arg(long)]
    noise: bool,
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Args)]
struct DesignArgs {
    /// Design at this parameter set.
    #[arg(long, value_enum, default_value = "initial")]
    params: ParamSet,
    /// Experiment index; shifts the start-sequence seed.
    #[arg(long, default_value_t = 1)]
    index: usize,
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Args)]
struct EstimateArgs {
    /// Record files, each starting from the configured initial state.
    #[arg(required = true)]
    records: Vec<PathBuf>,
    /// Write the estimate as TOML.
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CampaignArgs {
    /// Parent directory of the run directory.
    #[arg(long, short, default_value = "runs")]
    out: PathBuf,
    #[arg(long, value_enum)]
    method: Option<MethodArg>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    experiments: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    OptimalDoe,
    CcDischarge,
    Multistep,
}

#[derive(Args)]
struct ValidateArgs {
    #[command(flatten)]
    profile: ProfileArgs,
    /// Parameter set, or an estimate file written by `estimate`.
    #[arg(long, default_value = "initial")]
    params: String,
}

#[derive(Args)]
struct ReportArgs {
    /// Campaign run directories.
    #[arg(required = true)]
    runs: Vec<PathBuf>,
    #[arg(long, short, default_value = "report")]
    out: PathBuf,
}

#[derive(Serialize, Deserialize)]
struct EstimateFile {
    scaled: Vec<f64>,
    params: ParameterVector,
    distance: f64,
    cost: f64,
    iterations: usize,
    converged: bool,
    record_rms: Vec<f64>,
    metrics: Option<Metrics>,
}

fn config(path: Option<&Path>) -> Result<LoadedConfig> {
    match path {
        Some(p) => load_config(p),
        None => Ok(LoadedConfig::builtin()),
    }
}

fn params_of(cfg: &LoadedConfig, set: ParamSet) -> ParameterVector {
    match set {
        ParamSet::Truth => cfg.truth,
        ParamSet::Initial => cfg.initial,
    }
}

fn profile_inputs(cfg: &LoadedConfig, args: &ProfileArgs) -> Result<Vec<f64>> {
    let t_s = cfg.campaign.t_s;
    if let Some(path) = &args.profile {
        let series = io::read_currents(path)?;
        if (series.t_s - t_s).abs() > 1e-9 * t_s {
            return Err(Error::Config(format!(
                "{}: sample period {} s differs from the configured {t_s} s",
                path.display(),
                series.t_s
            )));
        }
        return Ok(series.current);
    }
    if args.multisine {
        return multisine_profile(args.duration, cfg.cell.one_c_current, t_s);
    }
    let n = (args.duration / t_s).round() as usize;
    if n == 0 || (n as f64 * t_s - args.duration).abs() > 1e-9 * args.duration {
        return Err(Error::Config(format!(
            "duration {} s is not a positive multiple of t_s = {t_s} s",
            args.duration
        )));
    }
    Ok(vec![args.current.unwrap_or(0.0); n])
}

fn plant_voltages(cfg: &LoadedConfig, inputs: &[f64]) -> Result<Vec<f64>> {
    let mut plant = build_plant(&cfg.campaign, &cfg.setup())?;
    apply_inputs(plant.as_mut(), inputs, cfg.campaign.t_s, (f64::NEG_INFINITY, f64::INFINITY), &mut 0.0)
}

fn spme_voltages(cfg: &LoadedConfig, params: &ParameterVector, inputs: &[f64]) -> Result<Vec<f64>> {
    let model = Spme::new(&cfg.cell, params)?;
    Ok(simulate(&model, &cfg.x0, inputs, cfg.campaign.t_s, &cfg.campaign.integrator)?.outputs)
}

fn cmd_simulate(cfg: &LoadedConfig, args: &SimulateArgs) -> Result<()> {
    let inputs = profile_inputs(cfg, &args.profile)?;
    let voltage = if args.plant {
        plant_voltages(cfg, &inputs)?
    } else {
        spme_voltages(cfg, &params_of(cfg, args.params), &inputs)?
    };
    let measured = if args.noise {
        Some(add_noise(&voltage, cfg.campaign.sigma_y2, cfg.campaign.rng_seed, 0)?)
    } else {
        None
    };
    io::write_timeseries(
        &args.out,
        &TimeSeries {
            t_s: cfg.campaign.t_s,
            current: inputs,
            voltage,
            measured,
        },
    )?;
    println!("wrote {}", args.out.display());
    Ok(())
}

fn cmd_design(cfg: &LoadedConfig, args: &DesignArgs) -> Result<()> {
    let phi = scale(&params_of(cfg, args.params), &cfg.truth)?;
    let design = design_experiment(&cfg.campaign, &cfg.setup(), &phi, args.index.max(1))?;
    io::write_timeseries(
        &args.out,
        &TimeSeries {
            t_s: cfg.campaign.t_s,
            current: design.inputs.clone(),
            voltage: design.voltages.clone(),
            measured: None,
        },
    )?;
    println!("predicted trace {:.6e}", design.predicted_trace);
    for b in &design.blocks {
        println!("block {}: trace {:.6e}", b.block, b.trace);
    }
    println!("wrote {}", args.out.display());
    Ok(())
}

fn cmd_estimate(cfg: &LoadedConfig, args: &EstimateArgs) -> Result<()> {
    let records = args
        .records
        .iter()
        .map(|p| {
            let s = io::read_timeseries(p)?;
            Ok(ExperimentRecord {
                measured: s.observations().to_vec(),
                inputs: s.current,
                x0: cfg.x0.clone(),
                t_s: s.t_s,
                noise_seed: 0,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    if let Some(r) = records.iter().find(|r| (r.t_s - records[0].t_s).abs() > 1e-12) {
        return Err(Error::Config(format!(
            "records mix sample periods {} s and {} s",
            records[0].t_s, r.t_s
        )));
    }
    let init = scale(&cfg.initial, &cfg.truth)?;
    let est = estimate(&records, &cfg.cell, &cfg.campaign.integrator, &init, &cfg.campaign.estimator)?;
    let mut campaign = cfg.campaign.clone();
    campaign.t_s = records[0].t_s;
    let metrics = campaign_metrics(&records, &cfg.cell, &est.params, &campaign).ok();
    let out = EstimateFile {
        scaled: est.params.values.to_vec(),
        params: unscale(&est.params),
        distance: est.params.distance_to_reference(),
        cost: est.cost,
        iterations: est.iterations,
        converged: est.converged,
        record_rms: est.record_rms.clone(),
        metrics,
    };
    for (name, (s, raw)) in ParameterVector::NAMES
        .iter()
        .zip(out.scaled.iter().zip(out.params.to_array()))
    {
        println!("{name:>6}  scaled {s:.6}  value {raw:.6e}");
    }
    println!("cost {:.6e} V^2 after {} iterations (converged: {})", out.cost, out.iterations, out.converged);
    if let Some(path) = &args.out {
        let text = toml::to_string(&out).map_err(|e| Error::Config(e.to_string()))?;
        std::fs::write(path, text)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn cmd_campaign(mut cfg: LoadedConfig, args: &CampaignArgs) -> Result<()> {
    if let Some(m) = args.method {
        cfg.campaign.method = match m {
            MethodArg::OptimalDoe => Method::OptimalDoe,
            MethodArg::CcDischarge => Method::CcDischarge,
            MethodArg::Multistep => Method::Multistep,
        };
    }
    if let Some(seed) = args.seed {
        cfg.campaign.rng_seed = seed;
    }
    if let Some(n) = args.experiments {
        cfg.campaign.n_experiments = n;
    }
    if cfg.campaign.plant == PlantKind::P2d && cfg.p2d_placeholder {
        eprintln!("warning: the [p2d] section is marked as placeholder values");
    }
    let started = io::now_rfc3339();
    let result = run_campaign(&cfg.campaign, &cfg.setup())?;
    let finished = io::now_rfc3339();
    let dir = io::write_campaign_run(&args.out, &cfg, &result, &started, &finished)?;
    println!("{:>3}  {:<16} {:>10} {:>12} {:>10} {:>10}", "exp", "status", "distance", "trace", "kappa", "gamma");
    for e in &result.experiments {
        let (trace, kappa, gamma) = e
            .metrics
            .as_ref()
            .map_or((f64::NAN, f64::NAN, f64::NAN), |m| (m.trace, m.kappa, m.gamma));
        println!(
            "{:>3}  {:<16} {:>10.4} {:>12.4e} {:>10.1} {:>10.1}",
            e.index,
            format!("{:?}", e.status),
            e.distance,
            trace,
            kappa,
            gamma
        );
    }
    println!("stop: {:?}", result.stop);
    println!("run directory: {}", dir.display());
    Ok(())
}

fn cmd_validate(cfg: &LoadedConfig, args: &ValidateArgs) -> Result<()> {
    let phi: ScaledParams = match args.params.as_str() {
        "truth" => ScaledParams::ones(cfg.truth),
        "initial" => scale(&cfg.initial, &cfg.truth)?,
        path => {
            let text = std::fs::read_to_string(path)?;
            let file: EstimateFile = toml::from_str(&text)
                .map_err(|e| Error::Config(format!("{path}: {}", e.message())))?;
            scale(&unscale_values(&file.scaled, &cfg.truth), &cfg.truth)?
        }
    };
    let mut profile = args.profile.clone();
    if profile.profile.is_none() && profile.current.is_none() {
        profile.multisine = true;
    }
    let inputs = profile_inputs(cfg, &profile)?;
    let reference = plant_voltages(cfg, &inputs)?;
    let rms = validate(&phi, &cfg.cell, &cfg.x0, &inputs, cfg.campaign.t_s, &cfg.campaign.integrator, &reference)?;
    println!("validation RMS {:.6e} V ({:.3} mV) over {} samples", rms, rms * 1e3, inputs.len());
    Ok(())
}

fn cmd_report(args: &ReportArgs) -> Result<()> {
    let runs = args.runs.iter().map(|d| load_run(d)).collect::<Result<Vec<_>>>()?;
    for run in &runs {
        if let Ok(m) = io::read_manifest(&run.dir) {
            if let Err(e) = m.verify(&run.dir) {
                eprintln!("warning: {}: {e}", run.dir.display());
            }
        }
    }
    for f in render_report(&runs, &args.out)? {
        println!("wrote {}", f.display());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let cfg = || config(cli.config.as_deref());
    match &cli.command {
        Command::Simulate(a) => cmd_simulate(&cfg()?, a),
        Command::Design(a) => cmd_design(&cfg()?, a),
        Command::Estimate(a) => cmd_estimate(&cfg()?, a),
        Command::Campaign(a) => cmd_campaign(cfg()?, a),
        Command::Validate(a) => cmd_validate(&cfg()?, a),
        Command::Report(a) => cmd_report(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
