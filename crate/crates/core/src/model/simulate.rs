//! Sampled simulation under piecewise-constant input.
//!
//! Sample k is taken at the end of interval k, t = (k + 1) t_s, with the
//! input of that interval applied to the output map.

use nalgebra::{DMatrix, DVector};

use super::integrator::{integrate, IntegratorConfig, OdeSystem};
use super::spme::Spme;
use super::state::StateVector;
use crate::error::{Error, Result};

impl OdeSystem for Spme {
    fn dim(&self) -> usize {
        self.state_len()
    }

    fn rhs(&self, x: &[f64], u: f64, out: &mut [f64]) {
        Spme::rhs(self, x, u, out)
    }

    fn jacobian(&self, _x: &[f64], _u: f64) -> DMatrix<f64> {
        self.linear_system().0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<StateVector>,
    pub outputs: Vec<f64>,
    pub inputs: Vec<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

/// One-interval discrete map x⁺ = Φ x + Γ u of the SPMe under the
/// configured BDF scheme.
#[derive(Debug, Clone)]
pub struct Propagator {
    pub phi: DMatrix<f64>,
    pub gamma: DVector<f64>,
    pub t_s: f64,
}

impl Propagator {
    /// Builds Φ and Γ by running the BDF recursion on the identity basis.
    /// The arithmetic is that of [`integrate`] with exact linear solves.
    pub fn new(model: &Spme, t_s: f64, cfg: &IntegratorConfig) -> Result<Self> {
        if !(t_s > 0.0) {
            return Err(Error::Config(format!("t_s must be positive, got {t_s}")));
        }
        cfg.validate()?;
        let (a, b) = model.linear_system();
        let n = a.nrows();
        let steps = cfg.substeps(t_s);
        let h = t_s / steps as f64;
        let identity = DMatrix::<f64>::identity(n, n);
        let singular = || Error::Numerical {
            step: 0,
            detail: "singular BDF iteration matrix".into(),
        };
        let lu1 = (&identity - &a * h).lu();
        let lu2 = (&identity - &a * (2.0 / 3.0 * h)).lu();

        // Columns 0..n carry Φ, column n carries Γ.
        let mut cur = DMatrix::<f64>::zeros(n, n + 1);
        cur.view_mut((0, 0), (n, n)).copy_from(&identity);
        let mut prev = cur.clone();
        for step in 0..steps {
            let bdf2 = cfg.order == 2 && step > 0;
            let (gamma, lu) = if bdf2 { (2.0 / 3.0 * h, &lu2) } else { (h, &lu1) };
            let mut rhs = if bdf2 {
                &cur * (4.0 / 3.0) - &prev * (1.0 / 3.0)
            } else {
                cur.clone()
            };
            let mut last = rhs.column_mut(n);
            last += &b * gamma;
            let next = lu.solve(&rhs).ok_or_else(singular)?;
            prev = std::mem::replace(&mut cur, next);
        }
        Ok(Propagator {
            phi: cur.columns(0, n).into_owned(),
            gamma: cur.column(n).into_owned(),
            t_s,
        })
    }

    pub fn dim(&self) -> usize {
        self.gamma.len()
    }

    pub fn step(&self, x: &DVector<f64>, u: f64) -> DVector<f64> {
        &self.phi * x + &self.gamma * u
    }

    /// Ψ_i = Φ^i Γ for i < count: the state response at the end of interval
    /// m + i to a unit change of the input on interval m.
    pub fn impulse_response(&self, count: usize) -> Vec<DVector<f64>> {
        let mut out = Vec::with_capacity(count);
        let mut psi = self.gamma.clone();
        for _ in 0..count {
            let next = &self.phi * &psi;
            out.push(std::mem::replace(&mut psi, next));
        }
        out
    }

    /// States x_1..x_N after each interval.
    pub fn states(&self, x0: &DVector<f64>, inputs: &[f64]) -> Vec<DVector<f64>> {
        let mut x = x0.clone();
        inputs
            .iter()
            .map(|&u| {
                x = self.step(&x, u);
                x.clone()
            })
            .collect()
    }

    /// Sampled voltages only; the hot path of sensitivity and design.
    pub fn outputs(&self, model: &Spme, x0: &DVector<f64>, inputs: &[f64]) -> Result<Vec<f64>> {
        let mut x = x0.clone();
        let mut y = Vec::with_capacity(inputs.len());
        for (k, &u) in inputs.iter().enumerate() {
            x = self.step(&x, u);
            y.push(
                model
                    .output_voltage(x.as_slice(), u)
                    .map_err(|e| e.at_time((k + 1) as f64 * self.t_s))?,
            );
        }
        Ok(y)
    }
}

fn check_inputs(inputs: &[f64]) -> Result<()> {
    if let Some(bad) = inputs.iter().find(|u| !u.is_finite()) {
        return Err(Error::Config(format!("non-finite input current {bad}")));
    }
    Ok(())
}

/// Simulates with the precomputed interval map.
pub fn simulate(
    model: &Spme,
    x0: &StateVector,
    inputs: &[f64],
    t_s: f64,
    cfg: &IntegratorConfig,
) -> Result<Trajectory> {
    model.validate_state(x0)?;
    check_inputs(inputs)?;
    let prop = Propagator::new(model, t_s, cfg)?;
    simulate_with(model, &prop, x0, inputs)
}

pub fn simulate_with(
    model: &Spme,
    prop: &Propagator,
    x0: &StateVector,
    inputs: &[f64],
) -> Result<Trajectory> {
    let states = prop.states(&DVector::from_vec(x0.to_vec()), inputs);
    assemble(model, prop.t_s, states, inputs)
}

/// Simulates by stepping the integrator interval by interval. Used as an
/// oracle for [`Propagator`] and by plants that need arbitrary durations.
pub fn simulate_direct(
    model: &Spme,
    x0: &StateVector,
    inputs: &[f64],
    t_s: f64,
    cfg: &IntegratorConfig,
) -> Result<Trajectory> {
    model.validate_state(x0)?;
    check_inputs(inputs)?;
    cfg.validate()?;
    let mut x = x0.to_vec();
    let mut states = Vec::with_capacity(inputs.len());
    for (k, &u) in inputs.iter().enumerate() {
        x = integrate(model, &x, u, t_s, cfg).map_err(|e| match e {
            Error::Numerical { detail, .. } => Error::Numerical { step: k, detail },
            other => other,
        })?;
        states.push(DVector::from_column_slice(&x));
    }
    assemble(model, t_s, states, inputs)
}

fn assemble(model: &Spme, t_s: f64, states: Vec<DVector<f64>>, inputs: &[f64]) -> Result<Trajectory> {
    let mut traj = Trajectory {
        times: Vec::with_capacity(inputs.len()),
        states: Vec::with_capacity(inputs.len()),
        outputs: Vec::with_capacity(inputs.len()),
        inputs: inputs.to_vec(),
    };
    for (k, (x, &u)) in states.iter().zip(inputs).enumerate() {
        let t = (k + 1) as f64 * t_s;
        let v = model
            .output_voltage(x.as_slice(), u)
            .map_err(|e| e.at_time(t))?;
        traj.times.push(t);
        traj.outputs.push(v);
        traj.states.push(StateVector::from_slice(x.as_slice())?);
    }
    Ok(traj)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::presets::{
        companion_cell, identification_cell, true_parameters, INITIAL_ELECTROLYTE,
        NEGATIVE_THETA_AT_FULL,
    };
    use crate::config::CellConfig;

    fn full_state(cell: &CellConfig) -> StateVector {
        StateVector::rest(
            cell.theta_pos_max * cell.positive.max_concentration,
            NEGATIVE_THETA_AT_FULL * cell.negative.max_concentration,
            INITIAL_ELECTROLYTE,
            cell.total_volumes(),
        )
    }

    fn rms(a: &[f64], b: &[f64]) -> f64 {
        (a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64).sqrt()
    }

    #[test]
    fn zero_input_keeps_equilibrium() {
        let cell = companion_cell();
        let m = Spme::new(&cell, &true_parameters()).unwrap();
        let x0 = full_state(&cell);
        let traj = simulate(&m, &x0, &[0.0; 50], 5.0, &IntegratorConfig::default()).unwrap();
        let v0 = m.output_voltage(&x0.to_vec(), 0.0).unwrap();
        assert_eq!(traj.len(), 50);
        for (k, v) in traj.outputs.iter().enumerate() {
            assert!((v - v0).abs() < 1e-12, "{k}: {v} vs {v0}");
        }
        assert!((traj.times[0] - 5.0).abs() < 1e-15);
        assert!((traj.times[49] - 250.0).abs() < 1e-12);
    }

    #[test]
    fn cathode_average_integrates_charge() {
        let cell = identification_cell();
        let m = Spme::new(&cell, &true_parameters()).unwrap();
        let x0 = full_state(&cell);
        let inputs: Vec<f64> = (0..120).map(|k| 40.0 * (0.1 * k as f64).sin() + 10.0).collect();
        let traj = simulate(&m, &x0, &inputs, 5.0, &IntegratorConfig::default()).unwrap();
        let charge: f64 = inputs.iter().sum::<f64>() * 5.0;
        let e = &cell.positive;
        let gain = 3.0
            / (e.particle_radius
                * cell.faraday_constant
                * cell.electrode_area
                * e.thickness
                * e.specific_area());
        let moved = traj.states.last().unwrap().cavg_p - x0.cavg_p;
        assert!((moved - gain * charge).abs() < 1e-9 * moved.abs(), "{moved} {}", gain * charge);
    }

    #[test]
    fn propagator_matches_stepwise_integration() {
        let cell = identification_cell();
        let m = Spme::new(&cell, &true_parameters()).unwrap();
        let x0 = full_state(&cell);
        let inputs: Vec<f64> = (0..40).map(|k| if k % 7 < 4 { 66.0 } else { -20.0 }).collect();
        let cfg = IntegratorConfig::default();
        let a = simulate(&m, &x0, &inputs, 5.0, &cfg).unwrap();
        let b = simulate_direct(&m, &x0, &inputs, 5.0, &cfg).unwrap();
        assert!(rms(&a.outputs, &b.outputs) < 1e-10);
    }

    #[test]
    fn one_c_discharge_self_convergence() {
        for cell in [companion_cell(), identification_cell()] {
            let m = Spme::new(&cell, &true_parameters()).unwrap();
            let x0 = full_state(&cell);
            let inputs = vec![cell.one_c_current; 200];
            let cfg = IntegratorConfig::default();
            let fine = IntegratorConfig {
                max_step: cfg.max_step / 10.0,
                ..cfg
            };
            let a = simulate(&m, &x0, &inputs, 5.0, &cfg).unwrap();
            let b = simulate(&m, &x0, &inputs, 5.0, &fine).unwrap();
            let err = rms(&a.outputs, &b.outputs);
            assert!(err < 1e-6, "RMS {err}");
        }
    }

    #[test]
    fn halving_step_converges_at_scheme_order() {
        let cell = identification_cell();
        let m = Spme::new(&cell, &true_parameters()).unwrap();
        let x0 = full_state(&cell);
        let inputs: Vec<f64> = (0..60).map(|k| if k % 5 < 2 { 66.0 } else { 0.0 }).collect();
        let run = |h: f64| {
            let cfg = IntegratorConfig {
                max_step: h,
                ..Default::default()
            };
            simulate(&m, &x0, &inputs, 5.0, &cfg).unwrap().outputs
        };
        let reference = run(1.0 / 128.0);
        let e1 = rms(&run(0.5), &reference);
        let e2 = rms(&run(0.25), &reference);
        let order = (e1 / e2).log2();
        assert!(order >= 1.0, "observed order {order} ({e1} -> {e2})");
    }

    #[test]
    fn errors_carry_timestamp() {
        let cell = companion_cell();
        let m = Spme::new(&cell, &true_parameters()).unwrap();
        let x0 = full_state(&cell);
        // Charging from full drives the cathode surface out of its window.
        let err = simulate(&m, &x0, &[-2000.0; 400], 5.0, &IntegratorConfig::default())
            .unwrap_err();
        assert!(matches!(err, Error::AtTime { .. }), "{err}");
    }

    #[test]
    fn impulse_response_matches_state_difference() {
        let cell = identification_cell();
        let m = Spme::new(&cell, &true_parameters()).unwrap();
        let p = Propagator::new(&m, 5.0, &IntegratorConfig::default()).unwrap();
        let x0 = DVector::from_vec(full_state(&cell).to_vec());
        let mut u = vec![10.0; 12];
        let base = p.states(&x0, &u);
        u[3] += 1.0;
        let bumped = p.states(&x0, &u);
        let psi = p.impulse_response(9);
        for i in 0..9 {
            let d = &bumped[3 + i] - &base[3 + i];
            assert!((d - &psi[i]).norm() <= 1e-9 * psi[i].norm().max(1e-12));
        }
    }
}
