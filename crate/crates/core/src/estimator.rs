//! Box-bounded least-squares estimation of the scaled parameter vector.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::config::{CellConfig, ParameterVector, PARAMETER_COUNT};
use crate::error::{Error, Result};
use crate::model::{IntegratorConfig, Propagator, Spme, StateVector};
use crate::sensitivity::{sensitivity_matrix, Response, Scheme, SensitivityConfig, StepMode};

/// Parameters divided elementwise by a reference vector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaledParams {
    pub values: [f64; PARAMETER_COUNT],
    pub reference: ParameterVector,
}

fn check_reference(reference: &ParameterVector) -> Result<()> {
    for (name, v) in ParameterVector::NAMES.iter().zip(reference.to_array()) {
        if !(v > 0.0 && v.is_finite()) {
            return Err(Error::Config(format!(
                "scaling reference {name} must be positive, got {v}"
            )));
        }
    }
    Ok(())
}

pub fn scale(raw: &ParameterVector, reference: &ParameterVector) -> Result<ScaledParams> {
    check_reference(reference)?;
    let r = reference.to_array();
    let x = raw.to_array();
    Ok(ScaledParams {
        values: std::array::from_fn(|i| x[i] / r[i]),
        reference: *reference,
    })
}

pub fn unscale(scaled: &ScaledParams) -> ParameterVector {
    unscale_values(&scaled.values, &scaled.reference)
}

pub fn unscale_values(values: &[f64], reference: &ParameterVector) -> ParameterVector {
    let r = reference.to_array();
    ParameterVector::from_array(std::array::from_fn(|i| values[i] * r[i]))
}

impl ScaledParams {
    pub fn ones(reference: ParameterVector) -> Self {
        ScaledParams {
            values: [1.0; PARAMETER_COUNT],
            reference,
        }
    }

    pub fn with_values(&self, values: &[f64]) -> Self {
        ScaledParams {
            values: std::array::from_fn(|i| values[i]),
            reference: self.reference,
        }
    }

    /// Euclidean distance to the all-ones vector, i.e. to the reference itself.
    pub fn distance_to_reference(&self) -> f64 {
        self.values.iter().map(|v| (v - 1.0).powi(2)).sum::<f64>().sqrt()
    }
}

/// One applied experiment: inputs, measured voltages and its start state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub inputs: Vec<f64>,
    pub measured: Vec<f64>,
    pub x0: StateVector,
    pub t_s: f64,
    pub noise_seed: u64,
}

impl ExperimentRecord {
    pub fn validate(&self) -> Result<()> {
        if self.inputs.len() != self.measured.len() {
            return Err(Error::Config(format!(
                "record has {} inputs but {} outputs",
                self.inputs.len(),
                self.measured.len()
            )));
        }
        if !(self.t_s > 0.0) {
            return Err(Error::Config(format!("record t_s must be positive, got {}", self.t_s)));
        }
        Ok(())
    }
}

/// Stacked SPMe outputs of several experiments as a function of the scaled
/// parameters.
pub struct SpmeResponse<'a> {
    pub cell: &'a CellConfig,
    pub reference: ParameterVector,
    pub integrator: IntegratorConfig,
    pub experiments: Vec<(&'a StateVector, &'a [f64], f64)>,
}

impl<'a> SpmeResponse<'a> {
    pub fn for_records(
        cell: &'a CellConfig,
        reference: ParameterVector,
        integrator: IntegratorConfig,
        records: &'a [ExperimentRecord],
    ) -> Self {
        SpmeResponse {
            cell,
            reference,
            integrator,
            experiments: records
                .iter()
                .map(|r| (&r.x0, r.inputs.as_slice(), r.t_s))
                .collect(),
        }
    }

    /// Per-experiment outputs at a scaled parameter vector.
    pub fn outputs(&self, scaled: &[f64]) -> Result<Vec<Vec<f64>>> {
        let model = Spme::new(self.cell, &unscale_values(scaled, &self.reference))?;
        let mut prop: Option<Propagator> = None;
        let mut out = Vec::with_capacity(self.experiments.len());
        for (x0, inputs, t_s) in &self.experiments {
            if prop.as_ref().is_none_or(|p| p.t_s != *t_s) {
                prop = Some(Propagator::new(&model, *t_s, &self.integrator)?);
            }
            let p = prop.as_ref().expect("propagator built above");
            model.validate_state(x0)?;
            out.push(p.outputs(&model, &DVector::from_vec(x0.to_vec()), inputs)?);
        }
        Ok(out)
    }
}

impl Response for SpmeResponse<'_> {
    fn response(&self, scaled: &[f64]) -> Result<Vec<f64>> {
        Ok(self.outputs(scaled)?.concat())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimatorConfig {
    pub lower: f64,
    pub upper: f64,
    pub max_iterations: usize,
    pub cost_rtol: f64,
    pub gradient_tol: f64,
    /// Forward-difference step of the residual Jacobian, on scaled values.
    pub jacobian_step: f64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        EstimatorConfig {
            lower: 0.1,
            upper: 10.0,
            max_iterations: 500,
            cost_rtol: 1e-10,
            gradient_tol: 1e-8,
            jacobian_step: 1e-7,
        }
    }
}

impl EstimatorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lower > 0.0 && self.lower < self.upper && self.upper.is_finite()) {
            return Err(Error::Config(format!(
                "estimator bounds must satisfy 0 < lower < upper, got [{}, {}]",
                self.lower, self.upper
            )));
        }
        if self.max_iterations == 0 || !(self.jacobian_step > 0.0) {
            return Err(Error::Config(
                "estimator iteration cap and jacobian_step must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub params: ScaledParams,
    /// Σ (ȳ − y)² at the returned point, V².
    pub cost: f64,
    pub initial_cost: f64,
    pub iterations: usize,
    pub converged: bool,
    /// RMS residual of each record, V.
    pub record_rms: Vec<f64>,
}

/// Generic bounded least squares on a residual map; see [`estimate`].
pub fn least_squares<R>(
    residual: &R,
    init: &[f64],
    lower: &[f64],
    upper: &[f64],
    cfg: &EstimatorConfig,
) -> Result<(Vec<f64>, f64, f64, usize, bool)>
where
    R: Response + ?Sized,
{
    let n = init.len();
    let clamp = |x: &mut [f64]| {
        for i in 0..n {
            x[i] = x[i].clamp(lower[i], upper[i]);
        }
    };
    let cost_of = |x: &[f64]| -> Option<(f64, Vec<f64>)> {
        let r = residual.response(x).ok()?;
        let c: f64 = r.iter().map(|v| v * v).sum();
        c.is_finite().then_some((c, r))
    };
    let jac_cfg = SensitivityConfig {
        h: cfg.jacobian_step,
        mode: StepMode::Absolute,
        scheme: Scheme::Forward,
    };

    let mut x = init.to_vec();
    clamp(&mut x);
    let (mut cost, mut r) = match cost_of(&x) {
        Some(v) => v,
        None => {
            // Surface the underlying failure.
            residual.response(&x)?;
            return Err(Error::ModelValidity("non-finite initial cost".into()));
        }
    };
    let initial_cost = cost;
    let mut lambda = 1e-3;
    let mut converged = false;
    let mut iterations = 0;

    while iterations < cfg.max_iterations {
        iterations += 1;
        // Step back inside the box if a forward difference would leave it.
        let mut probe = x.clone();
        let mut flip = vec![false; n];
        for i in 0..n {
            if probe[i] + cfg.jacobian_step > upper[i] {
                probe[i] -= cfg.jacobian_step;
                flip[i] = true;
            }
        }
        let mut jac = sensitivity_matrix(residual, &probe, &jac_cfg)?;
        if flip.iter().any(|f| *f) {
            // Columns at the upper bound were evaluated one step lower; the
            // base point shifts with them, so recompute those columns from x.
            let rx = DVector::from_vec(r.clone());
            for j in (0..n).filter(|j| flip[*j]) {
                let mut p = x.clone();
                p[j] -= cfg.jacobian_step;
                let rm = residual.response(&p).map_err(|e| Error::Perturbation {
                    index: j,
                    source: Box::new(e),
                })?;
                let col = (&rx - DVector::from_vec(rm)) / cfg.jacobian_step;
                jac.set_column(j, &col);
            }
        }
        let rv = DVector::from_vec(r.clone());
        let grad = 2.0 * jac.transpose() * &rv;
        // Coordinates pinned at a bound with the gradient pushing outward.
        let free: Vec<usize> = (0..n)
            .filter(|&i| {
                !((x[i] <= lower[i] && grad[i] > 0.0) || (x[i] >= upper[i] && grad[i] < 0.0))
            })
            .collect();
        let pg = free.iter().map(|&i| grad[i] * grad[i]).sum::<f64>().sqrt();
        if pg < cfg.gradient_tol {
            converged = true;
            break;
        }
        let jf = DMatrix::from_fn(jac.nrows(), free.len(), |i, k| jac[(i, free[k])]);
        let jtj = jf.transpose() * &jf;
        let jtr = jf.transpose() * &rv;

        let mut accepted = false;
        let mut relative_drop = 0.0;
        while lambda < 1e16 {
            let mut a = jtj.clone();
            for d in 0..free.len() {
                a[(d, d)] += lambda * jtj[(d, d)].max(1e-12);
            }
            let Some(step) = a.cholesky().map(|c| c.solve(&(-&jtr))) else {
                lambda *= 10.0;
                continue;
            };
            let mut trial = x.clone();
            for (k, &i) in free.iter().enumerate() {
                trial[i] += step[k];
            }
            clamp(&mut trial);
            match cost_of(&trial) {
                Some((c, rt)) if c < cost => {
                    relative_drop = (cost - c) / cost.max(f64::MIN_POSITIVE);
                    x = trial;
                    cost = c;
                    r = rt;
                    lambda = (lambda / 3.0).max(1e-12);
                    accepted = true;
                    break;
                }
                _ => lambda *= 4.0,
            }
        }
        if !accepted {
            // No descent possible at machine precision: stationary point.
            converged = true;
            break;
        }
        if relative_drop < cfg.cost_rtol {
            converged = true;
            break;
        }
    }
    Ok((x, cost, initial_cost, iterations, converged))
}

/// Fits the SPMe to every record at once: min Σ_records ‖ȳ − y(φ)‖² over
/// lower ≤ φ ≤ upper.
pub fn estimate(
    records: &[ExperimentRecord],
    cell: &CellConfig,
    integrator: &IntegratorConfig,
    init: &ScaledParams,
    cfg: &EstimatorConfig,
) -> Result<Estimate> {
    if records.is_empty() {
        return Err(Error::Config("estimation needs at least one record".into()));
    }
    cfg.validate()?;
    for r in records {
        r.validate()?;
    }
    let model = SpmeResponse::for_records(cell, init.reference, *integrator, records);
    let measured: Vec<f64> = records.iter().flat_map(|r| r.measured.iter().copied()).collect();
    let residual = |phi: &[f64]| -> Result<Vec<f64>> {
        let y = model.response(phi)?;
        Ok(measured.iter().zip(&y).map(|(m, v)| m - v).collect())
    };
    let lower = [cfg.lower; PARAMETER_COUNT];
    let upper = [cfg.upper; PARAMETER_COUNT];
    let (x, cost, initial_cost, iterations, converged) =
        least_squares(&residual, &init.values, &lower, &upper, cfg)?;

    let fitted = model.outputs(&x)?;
    let record_rms = records
        .iter()
        .zip(&fitted)
        .map(|(r, y)| {
            let ss: f64 = r.measured.iter().zip(y).map(|(m, v)| (m - v).powi(2)).sum();
            (ss / y.len().max(1) as f64).sqrt()
        })
        .collect();
    Ok(Estimate {
        params: init.with_values(&x),
        cost,
        initial_cost,
        iterations,
        converged,
        record_rms,
    })
}
