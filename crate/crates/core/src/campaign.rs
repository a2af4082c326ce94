//! Identification campaigns: pick an input, apply it to a plant, add
//! measurement noise, re-estimate over everything measured so far, reset the
//! plant and go again.

use std::time::Instant;

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::config::{CellConfig, ParameterVector, PARAMETER_COUNT};
use crate::doe::{
    campaign_stopping, design_suboptimal, BlockDiagnostics, DesignConfig, DesignConstraints,
    SpmeDesignModel, StopDecision, StoppingRule,
};
use crate::error::{Error, FieldError, Result};
use crate::estimator::{estimate, scale, EstimatorConfig, ExperimentRecord, ScaledParams, SpmeResponse};
use crate::model::{simulate, IntegratorConfig, Spme, StateVector};
use crate::p2d::P2dConfig;
use crate::plant::{reset_plant, P2dPlant, Plant, ResetConfig, ResetReport, SpmePlant};
use crate::sensitivity::{
    collinearity_index, condition_number, covariance_approx, fisher_matrix, sensitivity_matrix,
    SensitivityConfig,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PlantKind {
    Spme,
    P2d,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    OptimalDoe,
    CcDischarge,
    Multistep,
}

pub const MULTISTEP_PULSE: f64 = 600.0;
pub const MULTISTEP_REST: f64 = 1400.0;
pub const MULTISTEP_STEPS: usize = 5;

/// Hz
pub const MULTISINE_FREQUENCIES: [f64; 2] = [20e-3, 5e-3];
/// C-rates
pub const MULTISINE_BIAS: f64 = 0.5;
pub const MULTISINE_AMPLITUDE: f64 = 0.25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CampaignConfig {
    pub plant: PlantKind,
    pub method: Method,
    pub n_experiments: usize,
    /// s
    pub experiment_duration: f64,
    pub t_s: f64,
    /// Sub-optimal design blocks per experiment.
    pub blocks: usize,
    /// Measurement noise variance, V^2.
    pub sigma_y2: f64,
    /// Noise variance assumed by the design and the reported covariances
    /// when `sigma_y2` is zero, V^2.
    pub nominal_sigma_y2: f64,
    /// Design current bound, C-rate.
    pub i_max_rate: f64,
    /// V
    pub v_min: f64,
    pub v_max: f64,
    /// The plant aborts an experiment once the voltage leaves the window
    /// widened by this much, V.
    pub safety_margin: f64,
    /// C-rate of the constant-current baseline.
    pub cc_rate: f64,
    pub reset: ResetConfig,
    pub rng_seed: u64,
    /// Length of the multisine validation profile, s; zero disables it.
    pub validation_duration: f64,
    pub variance_threshold: Option<f64>,
    pub plateau_epsilon: Option<f64>,
    /// Largest internal step of the P2D plant, s.
    pub p2d_max_step: f64,
    pub design: DesignConfig,
    pub estimator: EstimatorConfig,
    pub sensitivity: SensitivityConfig,
    pub integrator: IntegratorConfig,
}

impl Default for CampaignConfig {
    fn default() -> Self {
        CampaignConfig {
            plant: PlantKind::Spme,
            method: Method::OptimalDoe,
            n_experiments: 10,
            experiment_duration: 1000.0,
            t_s: 5.0,
            blocks: 4,
            sigma_y2: 0.09e-6,
            nominal_sigma_y2: 0.09e-6,
            i_max_rate: 1.0,
            v_min: 2.5,
            v_max: 4.35,
            safety_margin: 0.05,
            cc_rate: 1.0,
            reset: ResetConfig::default(),
            rng_seed: 0,
            validation_duration: 1000.0,
            variance_threshold: None,
            plateau_epsilon: None,
            p2d_max_step: 1.0,
            design: DesignConfig::default(),
            estimator: EstimatorConfig::default(),
            sensitivity: SensitivityConfig::default(),
            integrator: IntegratorConfig::default(),
        }
    }
}

fn divides(step: f64, span: f64) -> bool {
    let n = span / step;
    n >= 1.0 - 1e-9 && (n - n.round()).abs() < 1e-9
}

impl CampaignConfig {
    /// Every violated invariant, with `campaign.`-prefixed field names.
    pub fn validate(&self) -> Vec<FieldError> {
        let mut errors = Vec::new();
        let mut fail = |field: &str, message: String| {
            errors.push(FieldError {
                field: format!("campaign.{field}"),
                message,
            })
        };
        if self.n_experiments == 0 {
            fail("n_experiments", "must be at least 1".into());
        }
        if !(self.sigma_y2 >= 0.0 && self.sigma_y2.is_finite()) {
            fail("sigma_y2", format!("must be non-negative, got {}", self.sigma_y2));
        }
        if !(self.nominal_sigma_y2 > 0.0 && self.nominal_sigma_y2.is_finite()) {
            fail("nominal_sigma_y2", format!("must be positive, got {}", self.nominal_sigma_y2));
        }
        if !(self.t_s > 0.0 && self.t_s.is_finite()) {
            fail("t_s", format!("must be positive, got {}", self.t_s));
        } else if !(self.experiment_duration > 0.0) {
            fail("experiment_duration", format!("must be positive, got {}", self.experiment_duration));
        } else if !divides(self.t_s, self.experiment_duration) {
            fail(
                "experiment_duration",
                format!("{} s is not a multiple of t_s = {} s", self.experiment_duration, self.t_s),
            );
        } else {
            let samples = (self.experiment_duration / self.t_s).round() as usize;
            if self.method == Method::OptimalDoe && (self.blocks == 0 || !samples.is_multiple_of(self.blocks)) {
                fail("blocks", format!("{samples} samples cannot be split into {} blocks", self.blocks));
            }
            if self.method == Method::Multistep {
                if !divides(self.t_s, MULTISTEP_PULSE) || !divides(self.t_s, MULTISTEP_REST) {
                    fail("t_s", format!("must divide {MULTISTEP_PULSE} s and {MULTISTEP_REST} s for the multistep profile"));
                }
                let total = MULTISTEP_STEPS as f64 * (MULTISTEP_PULSE + MULTISTEP_REST);
                if self.n_experiments as f64 * self.experiment_duration > total + 1e-9 {
                    fail(
                        "n_experiments",
                        format!("{} segments of {} s exceed the {total} s multistep profile", self.n_experiments, self.experiment_duration),
                    );
                }
            }
        }
        if !(self.i_max_rate > 0.0) {
            fail("i_max_rate", format!("must be positive, got {}", self.i_max_rate));
        }
        if !(self.v_min < self.v_max) {
            fail("v_min", format!("{} must be below v_max {}", self.v_min, self.v_max));
        }
        if !(self.safety_margin >= 0.0) {
            fail("safety_margin", format!("must be non-negative, got {}", self.safety_margin));
        }
        if !(self.cc_rate > 0.0) {
            fail("cc_rate", format!("must be positive, got {}", self.cc_rate));
        }
        if !(self.validation_duration >= 0.0) {
            fail("validation_duration", format!("must be non-negative, got {}", self.validation_duration));
        }
        if !(self.p2d_max_step > 0.0) {
            fail("p2d_max_step", format!("must be positive, got {}", self.p2d_max_step));
        }
        for (field, result) in [
            ("reset", self.reset.validate()),
            ("estimator", self.estimator.validate()),
            ("sensitivity", self.sensitivity.validate()),
            ("integrator", self.integrator.validate()),
        ] {
            if let Err(e) = result {
                fail(field, e.to_string());
            }
        }
        errors
    }

    pub fn samples_per_experiment(&self) -> usize {
        (self.experiment_duration / self.t_s).round() as usize
    }

    /// Noise variance used for Fisher information.
    pub fn information_sigma_y2(&self) -> f64 {
        if self.sigma_y2 > 0.0 {
            self.sigma_y2
        } else {
            self.nominal_sigma_y2
        }
    }

    pub fn design_constraints(&self, cell: &CellConfig) -> DesignConstraints {
        DesignConstraints {
            i_max: self.i_max_rate * cell.one_c_current,
            v_min: self.v_min,
            v_max: self.v_max,
            horizon: self.experiment_duration,
            t_s: self.t_s,
            blocks: self.blocks,
        }
    }

    fn safety_window(&self) -> (f64, f64) {
        (self.v_min - self.safety_margin, self.v_max + self.safety_margin)
    }
}

/// Everything about the cell a campaign needs besides the protocol.
#[derive(Debug, Clone, PartialEq)]
pub struct CampaignSetup {
    pub cell: CellConfig,
    /// φ*: the plant's parameters and the scaling reference.
    pub truth: ParameterVector,
    /// φ0
    pub initial: ParameterVector,
    pub x0: StateVector,
    pub p2d: Option<P2dConfig>,
}

fn sample_count(duration: f64, t_s: f64) -> Result<usize> {
    if !(duration > 0.0) || !(t_s > 0.0) {
        return Err(Error::Config(format!(
            "profile needs positive duration and t_s, got {duration} s and {t_s} s"
        )));
    }
    if !divides(t_s, duration) {
        return Err(Error::Config(format!(
            "profile duration {duration} s is not a multiple of t_s = {t_s} s"
        )));
    }
    Ok((duration / t_s).round() as usize)
}

/// Constant discharge at `rate`·1C.
pub fn cc_profile(duration: f64, rate: f64, one_c: f64, t_s: f64) -> Result<Vec<f64>> {
    if !(rate > 0.0) {
        return Err(Error::Config(format!("CC rate must be positive, got {rate}")));
    }
    Ok(vec![rate * one_c; sample_count(duration, t_s)?])
}

/// Five repetitions of a 600 s 1C pulse followed by 1400 s of rest.
pub fn multistep_profile(one_c: f64, t_s: f64) -> Result<Vec<f64>> {
    if !(t_s > 0.0) || !divides(t_s, MULTISTEP_PULSE) || !divides(t_s, MULTISTEP_REST) {
        return Err(Error::Config(format!(
            "t_s = {t_s} s must divide {MULTISTEP_PULSE} s and {MULTISTEP_REST} s"
        )));
    }
    let pulse = vec![one_c; sample_count(MULTISTEP_PULSE, t_s)?];
    let rest = vec![0.0; sample_count(MULTISTEP_REST, t_s)?];
    Ok([pulse, rest].concat().repeat(MULTISTEP_STEPS))
}

/// Validation current at time t, A.
pub fn multisine_current(t: f64, one_c: f64) -> f64 {
    let waves: f64 = MULTISINE_FREQUENCIES
        .iter()
        .map(|f| (2.0 * std::f64::consts::PI * f * t).sin())
        .sum();
    one_c * (MULTISINE_AMPLITUDE * waves + MULTISINE_BIAS)
}

/// The multisine sampled at the start of each interval and held.
pub fn multisine_profile(duration: f64, one_c: f64, t_s: f64) -> Result<Vec<f64>> {
    let n = sample_count(duration, t_s)?;
    Ok((0..n).map(|k| multisine_current(k as f64 * t_s, one_c)).collect())
}

/// Adds i.i.d. N(0, σ²) noise drawn from substream `stream` of `seed`.
pub fn add_noise(outputs: &[f64], sigma_y2: f64, seed: u64, stream: u64) -> Result<Vec<f64>> {
    if !(sigma_y2 >= 0.0 && sigma_y2.is_finite()) {
        return Err(Error::Config(format!("noise variance must be non-negative, got {sigma_y2}")));
    }
    if sigma_y2 == 0.0 {
        return Ok(outputs.to_vec());
    }
    let normal = Normal::new(0.0, sigma_y2.sqrt()).expect("positive finite deviation");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    Ok(outputs.iter().map(|y| y + normal.sample(&mut rng)).collect())
}

/// Applies the inputs one sample at a time and returns the voltages. Stops
/// with a safety error at the first voltage outside `window`. `peak` tracks
/// the largest derivative norm seen.
pub fn apply_inputs(
    plant: &mut dyn Plant,
    inputs: &[f64],
    t_s: f64,
    window: (f64, f64),
    peak: &mut f64,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(inputs.len());
    for &u in inputs {
        let v = plant.apply(u, t_s)?;
        *peak = peak.max(plant.derivative_norm()?);
        if !(v >= window.0 && v <= window.1) {
            return Err(Error::Safety {
                time: plant.time(),
                voltage: v,
            });
        }
        out.push(v);
    }
    Ok(out)
}

/// RMS of plant minus SPMe voltage along a profile. `plant_voltages` is the
/// noiseless plant response to `profile` from `x0`.
pub fn validate(
    params: &ScaledParams,
    cell: &CellConfig,
    x0: &StateVector,
    profile: &[f64],
    t_s: f64,
    integrator: &IntegratorConfig,
    plant_voltages: &[f64],
) -> Result<f64> {
    if profile.len() != plant_voltages.len() || profile.is_empty() {
        return Err(Error::Config(format!(
            "validation profile has {} samples, plant response {}",
            profile.len(),
            plant_voltages.len()
        )));
    }
    let model = Spme::new(cell, &crate::estimator::unscale(params))?;
    let traj = simulate(&model, x0, profile, t_s, integrator)?;
    let ss: f64 = traj
        .outputs
        .iter()
        .zip(plant_voltages)
        .map(|(a, b)| (a - b).powi(2))
        .sum();
    Ok((ss / profile.len() as f64).sqrt())
}

pub fn build_plant(cfg: &CampaignConfig, setup: &CampaignSetup) -> Result<Box<dyn Plant>> {
    Ok(match cfg.plant {
        PlantKind::Spme => Box::new(SpmePlant::new(
            Spme::new(&setup.cell, &setup.truth)?,
            &setup.x0,
            cfg.integrator,
        )?),
        PlantKind::P2d => {
            let p2d = setup.p2d.as_ref().ok_or_else(|| {
                Error::MissingP2dParameters(
                    "solid conductivities and meshes are needed; add a [p2d] section".into(),
                )
            })?;
            let errors = p2d.validate();
            if !errors.is_empty() {
                return Err(Error::Invalid(errors));
            }
            Box::new(P2dPlant::new(p2d, &setup.x0, cfg.p2d_max_step)?)
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentStatus {
    Completed,
    /// Design or plant failure; nothing was recorded.
    Failed,
    /// Data recorded, the estimate kept from the previous experiment.
    EstimationFailed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Diagonal of the scaled covariance.
    pub variances: Vec<f64>,
    pub trace: f64,
    pub kappa: f64,
    pub gamma: f64,
    pub regularized: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignSummary {
    pub predicted_trace: f64,
    pub converged: bool,
    pub blocks: Vec<BlockDiagnostics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub index: usize,
    pub status: ExperimentStatus,
    pub message: Option<String>,
    /// Scaled estimate after this experiment.
    pub estimate: [f64; PARAMETER_COUNT],
    pub estimate_raw: ParameterVector,
    /// ‖φ̂ − φ*‖ on scaled values.
    pub distance: f64,
    pub cost: Option<f64>,
    pub iterations: Option<usize>,
    pub estimator_converged: Option<bool>,
    pub metrics: Option<Metrics>,
    pub validation_rms: Option<f64>,
    pub design: Option<DesignSummary>,
    pub reset: Option<ResetReport>,
    pub decision: StopDecision,
}

/// Applied inputs and plant voltages of one experiment.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ExperimentData {
    pub index: usize,
    pub t_s: f64,
    pub inputs: Vec<f64>,
    pub voltages: Vec<f64>,
    pub measured: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ExperimentTiming {
    pub index: usize,
    pub seconds: f64,
    pub design_seconds: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignResult {
    pub method: Method,
    pub plant: PlantKind,
    pub rng_seed: u64,
    pub truth: ParameterVector,
    pub initial: ParameterVector,
    /// Validation RMS of the SPMe at φ0 and at φ*, V.
    pub initial_validation_rms: Option<f64>,
    pub truth_validation_rms: Option<f64>,
    pub experiments: Vec<ExperimentSummary>,
    pub stop: StopDecision,
    #[serde(skip)]
    pub data: Vec<ExperimentData>,
    #[serde(skip)]
    pub timings: Vec<ExperimentTiming>,
}

impl CampaignResult {
    pub fn distances(&self) -> Vec<f64> {
        self.experiments.iter().map(|e| e.distance).collect()
    }

    pub fn final_estimate(&self) -> Option<[f64; PARAMETER_COUNT]> {
        self.experiments.last().map(|e| e.estimate)
    }
}

/// Sensitivity diagnostics of all records at `phi`.
pub fn campaign_metrics(
    records: &[ExperimentRecord],
    cell: &CellConfig,
    phi: &ScaledParams,
    cfg: &CampaignConfig,
) -> Result<Metrics> {
    let response = SpmeResponse::for_records(cell, phi.reference, cfg.integrator, records);
    let s = sensitivity_matrix(&response, &phi.values, &cfg.sensitivity)?;
    let f = fisher_matrix(&s, cfg.information_sigma_y2())?;
    let c = covariance_approx(&f)?;
    Ok(Metrics {
        variances: c.variances(),
        trace: c.trace(),
        kappa: condition_number(&s)?,
        gamma: collinearity_index(&s)?,
        regularized: c.regularized,
    })
}

/// The optimal input sequence for experiment `index` (1-based) at `phi`.
pub fn design_experiment(
    cfg: &CampaignConfig,
    setup: &CampaignSetup,
    phi: &ScaledParams,
    index: usize,
) -> Result<crate::doe::DesignResult> {
    let model = SpmeDesignModel::new(&setup.cell, phi, &cfg.sensitivity, cfg.t_s, &cfg.integrator)?;
    let design = DesignConfig {
        seed: cfg.design.seed.wrapping_add(index as u64 - 1),
        ..cfg.design
    };
    design_suboptimal(
        &model,
        &DVector::from_vec(setup.x0.to_vec()),
        &cfg.design_constraints(&setup.cell),
        cfg.information_sigma_y2(),
        &[],
        &design,
    )
}

/// Runs the whole design → apply → estimate → reset loop.
pub fn run_campaign(cfg: &CampaignConfig, setup: &CampaignSetup) -> Result<CampaignResult> {
    let errors = cfg.validate();
    if !errors.is_empty() {
        return Err(Error::Invalid(errors));
    }
    let one_c = setup.cell.one_c_current;
    let t_s = cfg.t_s;
    let window = cfg.safety_window();
    let mut plant = build_plant(cfg, setup)?;
    let soc0 = plant.soc()?;
    let truth = ScaledParams::ones(setup.truth);
    let mut phi = scale(&setup.initial, &setup.truth)?;

    let validation = if cfg.validation_duration > 0.0 {
        let profile = multisine_profile(cfg.validation_duration, one_c, t_s)?;
        let mut reference = build_plant(cfg, setup)?;
        let voltages = apply_inputs(reference.as_mut(), &profile, t_s, window, &mut 0.0)?;
        Some((profile, voltages))
    } else {
        None
    };
    let validation_rms = |params: &ScaledParams| -> Option<f64> {
        let (profile, voltages) = validation.as_ref()?;
        validate(params, &setup.cell, &setup.x0, profile, t_s, &cfg.integrator, voltages).ok()
    };
    let multistep = match cfg.method {
        Method::Multistep => Some(multistep_profile(one_c, t_s)?),
        _ => None,
    };
    let rule = StoppingRule {
        max_experiments: cfg.n_experiments,
        variance_threshold: cfg.variance_threshold,
        plateau_epsilon: cfg.plateau_epsilon,
    };

    let mut result = CampaignResult {
        method: cfg.method,
        plant: cfg.plant,
        rng_seed: cfg.rng_seed,
        truth: setup.truth,
        initial: setup.initial,
        initial_validation_rms: validation_rms(&phi),
        truth_validation_rms: validation_rms(&truth),
        experiments: Vec::new(),
        stop: StopDecision::Continue,
        data: Vec::new(),
        timings: Vec::new(),
    };
    let mut records: Vec<ExperimentRecord> = Vec::new();
    let mut traces = Vec::new();
    let mut variances = Vec::new();
    let n = cfg.samples_per_experiment();

    for index in 1..=cfg.n_experiments {
        let started = Instant::now();
        let mut summary = ExperimentSummary {
            index,
            status: ExperimentStatus::Completed,
            message: None,
            estimate: phi.values,
            estimate_raw: crate::estimator::unscale(&phi),
            distance: phi.distance_to_reference(),
            cost: None,
            iterations: None,
            estimator_converged: None,
            metrics: None,
            validation_rms: None,
            design: None,
            reset: None,
            decision: StopDecision::Continue,
        };
        let mut timing = ExperimentTiming {
            index,
            ..Default::default()
        };

        let inputs = match cfg.method {
            Method::OptimalDoe => match design_experiment(cfg, setup, &phi, index) {
                Ok(d) => {
                    timing.design_seconds = Some(d.solve_time);
                    summary.design = Some(DesignSummary {
                        predicted_trace: d.predicted_trace,
                        converged: d.converged(),
                        blocks: d.blocks,
                    });
                    Ok(d.inputs)
                }
                Err(e) => Err(e),
            },
            Method::CcDischarge => cc_profile(cfg.experiment_duration, cfg.cc_rate, one_c, t_s),
            Method::Multistep => {
                let profile = multistep.as_ref().expect("built above");
                Ok(profile[(index - 1) * n..index * n].to_vec())
            }
        };

        let mut peak = 0.0;
        let applied = inputs.and_then(|u| {
            let v = apply_inputs(plant.as_mut(), &u, t_s, window, &mut peak)?;
            Ok((u, v))
        });
        match applied {
            Err(e) => {
                summary.status = ExperimentStatus::Failed;
                summary.message = Some(e.to_string());
            }
            Ok((inputs, voltages)) => {
                let measured = add_noise(&voltages, cfg.sigma_y2, cfg.rng_seed, index as u64)?;
                match (cfg.method, records.first_mut()) {
                    (Method::Multistep, Some(r)) => {
                        r.inputs.extend_from_slice(&inputs);
                        r.measured.extend_from_slice(&measured);
                    }
                    _ => records.push(ExperimentRecord {
                        inputs: inputs.clone(),
                        measured: measured.clone(),
                        x0: setup.x0.clone(),
                        t_s,
                        noise_seed: cfg.rng_seed,
                    }),
                }
                result.data.push(ExperimentData {
                    index,
                    t_s,
                    inputs,
                    voltages,
                    measured,
                });
                match estimate(&records, &setup.cell, &cfg.integrator, &phi, &cfg.estimator) {
                    Ok(est) => {
                        phi = est.params;
                        summary.cost = Some(est.cost);
                        summary.iterations = Some(est.iterations);
                        summary.estimator_converged = Some(est.converged);
                        summary.estimate = phi.values;
                        summary.estimate_raw = crate::estimator::unscale(&phi);
                        summary.distance = phi.distance_to_reference();
                    }
                    Err(e) => {
                        summary.status = ExperimentStatus::EstimationFailed;
                        summary.message = Some(e.to_string());
                    }
                }
            }
        }

        if !records.is_empty() {
            match campaign_metrics(&records, &setup.cell, &phi, cfg) {
                Ok(m) => summary.metrics = Some(m),
                Err(e) => {
                    let note = format!("metrics unavailable: {e}");
                    summary.message = Some(match summary.message.take() {
                        Some(m) => format!("{m}; {note}"),
                        None => note,
                    });
                }
            }
        }
        summary.validation_rms = validation_rms(&phi);

        let last = index == cfg.n_experiments;
        let failed_segment = cfg.method == Method::Multistep && summary.status == ExperimentStatus::Failed;
        if cfg.method != Method::Multistep && !last {
            summary.reset = Some(reset_plant(plant.as_mut(), soc0, peak, t_s, &cfg.reset)?);
        }

        if let Some(m) = &summary.metrics {
            traces.push(m.trace);
            variances.push(m.variances.clone());
        } else {
            traces.push(f64::INFINITY);
            variances.push(Vec::new());
        }
        summary.decision = if summary.status == ExperimentStatus::Failed {
            if index >= cfg.n_experiments || failed_segment {
                StopDecision::StopMaxExperiments
            } else {
                StopDecision::Continue
            }
        } else {
            campaign_stopping(&traces, &variances, &rule)
        };
        let decision = summary.decision;
        timing.seconds = started.elapsed().as_secs_f64();
        result.experiments.push(summary);
        result.timings.push(timing);
        if decision != StopDecision::Continue {
            result.stop = decision;
            break;
        }
    }
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::presets::{full_charge_state, identification_cell, initial_guess, true_parameters};

    fn setup() -> CampaignSetup {
        let cell = identification_cell();
        CampaignSetup {
            x0: full_charge_state(&cell),
            cell,
            truth: true_parameters(),
            initial: initial_guess(),
            p2d: None,
        }
    }

    #[test]
    fn cc_profile_values() {
        let u = cc_profile(1000.0, 1.0, 66.35, 5.0).unwrap();
        assert_eq!(u.len(), 200);
        assert!(u.iter().all(|v| *v == 66.35));
        let u = cc_profile(1000.0, 2.0, 66.35, 5.0).unwrap();
        assert!(u.iter().all(|v| *v == 2.0 * 66.35));
        assert!(cc_profile(0.0, 1.0, 66.35, 5.0).is_err());
        assert!(cc_profile(1000.0, 0.0, 66.35, 5.0).is_err());
    }

    #[test]
    fn multistep_shape() {
        let u = multistep_profile(10.0, 5.0).unwrap();
        assert_eq!(u.len(), 2000);
        assert!(u[..120].iter().all(|v| *v == 10.0));
        assert!(u[120..400].iter().all(|v| *v == 0.0));
        assert_eq!(u[400], 10.0);
        assert_eq!(u.iter().filter(|v| **v > 0.0).count(), 600);
        assert!(matches!(multistep_profile(10.0, 7.0), Err(Error::Config(_))));
    }

    #[test]
    fn multisine_values() {
        let one_c = 66.35;
        assert_eq!(multisine_current(0.0, one_c), 0.5 * one_c);
        // sin(0.5π) + sin(0.125π) at t = 12.5 s.
        let want = one_c * (0.25 * (1.0 + 0.382_683_432_365_089_8) + 0.5);
        assert!((multisine_current(12.5, one_c) - want).abs() < 1e-12);
        let u = multisine_profile(1000.0, one_c, 2.5).unwrap();
        assert_eq!(u.len(), 400);
        assert_eq!(u[5], multisine_current(12.5, one_c));
        assert!(u.iter().all(|v| *v <= one_c + 1e-12 && *v >= -1e-12));
    }

    #[test]
    fn noise_statistics() {
        let y = vec![3.7; 100_000];
        assert_eq!(add_noise(&y, 0.0, 1, 1).unwrap(), y);
        let a = add_noise(&y, 0.09e-6, 7, 3).unwrap();
        assert_eq!(a, add_noise(&y, 0.09e-6, 7, 3).unwrap());
        assert_ne!(a, add_noise(&y, 0.09e-6, 7, 4).unwrap());
        let n = a.len() as f64;
        let mean = a.iter().map(|v| v - 3.7).sum::<f64>() / n;
        let var = a.iter().map(|v| (v - 3.7 - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((var / 0.09e-6 - 1.0).abs() < 0.02, "{var}");
        assert!(add_noise(&y, -1.0, 0, 0).is_err());
    }

    #[test]
    fn validate_identical_model_is_zero() {
        let s = setup();
        let cfg = CampaignConfig::default();
        let profile = multisine_profile(200.0, s.cell.one_c_current, 5.0).unwrap();
        let mut plant = build_plant(&cfg, &s).unwrap();
        let v = apply_inputs(plant.as_mut(), &profile, 5.0, (0.0, 10.0), &mut 0.0).unwrap();
        let rms = validate(&ScaledParams::ones(s.truth), &s.cell, &s.x0, &profile, 5.0, &cfg.integrator, &v).unwrap();
        assert!(rms < 1e-12, "{rms}");
        let phi0 = scale(&s.initial, &s.truth).unwrap();
        assert!(validate(&phi0, &s.cell, &s.x0, &profile, 5.0, &cfg.integrator, &v).unwrap() > 1e-4);
    }

    #[test]
    fn safety_violation_is_reported_with_time() {
        let s = setup();
        let mut plant = build_plant(&CampaignConfig::default(), &s).unwrap();
        let u = vec![s.cell.one_c_current; 10];
        match apply_inputs(plant.as_mut(), &u, 5.0, (4.2, 4.35), &mut 0.0) {
            Err(Error::Safety { time, voltage }) => {
                assert!(time > 0.0);
                assert!(voltage < 4.2);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn missing_p2d_section() {
        let cfg = CampaignConfig {
            plant: PlantKind::P2d,
            ..Default::default()
        };
        assert!(matches!(build_plant(&cfg, &setup()), Err(Error::MissingP2dParameters(_))));
    }

    #[test]
    fn config_errors_are_collected() {
        let cfg = CampaignConfig {
            n_experiments: 0,
            sigma_y2: -1.0,
            blocks: 3,
            v_min: 5.0,
            ..Default::default()
        };
        let fields: Vec<String> = cfg.validate().into_iter().map(|e| e.field).collect();
        for f in ["campaign.n_experiments", "campaign.sigma_y2", "campaign.blocks", "campaign.v_min"] {
            assert!(fields.iter().any(|x| x == f), "{f} missing from {fields:?}");
        }
        let multistep = CampaignConfig {
            method: Method::Multistep,
            t_s: 3.0,
            experiment_duration: 999.0,
            ..Default::default()
        };
        assert!(!multistep.validate().is_empty());
    }

    #[test]
    fn short_cc_campaign_is_deterministic() {
        let s = setup();
        let cfg = CampaignConfig {
            method: Method::CcDischarge,
            n_experiments: 2,
            experiment_duration: 200.0,
            validation_duration: 100.0,
            ..Default::default()
        };
        let a = run_campaign(&cfg, &s).unwrap();
        let b = run_campaign(&cfg, &s).unwrap();
        assert_eq!(a.experiments, b.experiments);
        assert_eq!(a.data, b.data);
        assert_eq!(a.experiments.len(), 2);
        assert_eq!(a.stop, StopDecision::StopMaxExperiments);
        let reset = a.experiments[0].reset.unwrap();
        assert!(reset.settled && reset.current < 0.0, "{reset:?}");
        assert!(a.experiments[1].reset.is_none());
        assert!(a.data[0].measured != a.data[0].voltages);
        // The reset brings the plant back close enough that the second
        // experiment sees the same voltages to well below the noise level.
        for (x, y) in a.data[0].voltages.iter().zip(&a.data[1].voltages) {
            assert!((x - y).abs() < 1e-6, "{x} vs {y}");
        }
    }
}
