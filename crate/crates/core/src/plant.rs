//! Simulated cells that experiments are applied to, and the charge + rest
//! protocol that returns them to their starting state.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::config::CellConfig;
use crate::error::{Error, Result};
use crate::model::state::ELECTROLYTE_OFFSET;
use crate::model::{soc_of, IntegratorConfig, Propagator, Spme, StateVector};
use crate::p2d::{P2d, P2dConfig, P2dState};

pub trait Plant {
    fn cell(&self) -> &CellConfig;

    /// Holds `current` for `duration` seconds and returns the terminal
    /// voltage at the end of the interval.
    fn apply(&mut self, current: f64, duration: f64) -> Result<f64>;

    fn soc(&self) -> Result<f64>;

    /// RMS of the differential-state time derivative, each component divided
    /// by its natural concentration scale. 1/s
    fn derivative_norm(&self) -> Result<f64>;

    /// Seconds simulated since construction.
    fn time(&self) -> f64;
}

/// SOC change per second and per ampere, %/(A s). Identical for both plants
/// since the cathode solid inventory only moves with the applied current.
pub fn soc_rate_per_amp(cell: &CellConfig) -> f64 {
    let p = &cell.positive;
    let dc = 1.0 / (cell.faraday_constant * cell.electrode_area * p.thickness * p.active_fraction());
    100.0 / p.max_concentration * dc / (cell.theta_pos_max - cell.theta_pos_min)
}

fn rms(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v * v, n + 1));
    (sum / n.max(1) as f64).sqrt()
}

pub struct SpmePlant {
    model: Spme,
    integrator: IntegratorConfig,
    propagators: Vec<Propagator>,
    x: DVector<f64>,
    current: f64,
    time: f64,
}

impl SpmePlant {
    pub fn new(model: Spme, x0: &StateVector, integrator: IntegratorConfig) -> Result<Self> {
        model.validate_state(x0)?;
        integrator.validate()?;
        Ok(SpmePlant {
            model,
            integrator,
            propagators: Vec::new(),
            x: DVector::from_vec(x0.to_vec()),
            current: 0.0,
            time: 0.0,
        })
    }

    pub fn state(&self) -> StateVector {
        StateVector::from_slice(self.x.as_slice()).expect("plant state has model layout")
    }

    fn propagator(&mut self, duration: f64) -> Result<usize> {
        Ok(match self.propagators.iter().position(|p| p.t_s == duration) {
            Some(i) => i,
            None => {
                self.propagators
                    .push(Propagator::new(&self.model, duration, &self.integrator)?);
                self.propagators.len() - 1
            }
        })
    }
}

impl Plant for SpmePlant {
    fn cell(&self) -> &CellConfig {
        self.model.cell()
    }

    fn apply(&mut self, current: f64, duration: f64) -> Result<f64> {
        if !current.is_finite() {
            return Err(Error::Config(format!("non-finite plant current {current}")));
        }
        let idx = self.propagator(duration)?;
        let next = self.propagators[idx].step(&self.x, current);
        let v = self
            .model
            .output_voltage(next.as_slice(), current)
            .map_err(|e| e.at_time(self.time + duration))?;
        self.x = next;
        self.current = current;
        self.time += duration;
        Ok(v)
    }

    fn soc(&self) -> Result<f64> {
        self.model.soc(self.x.as_slice())
    }

    fn derivative_norm(&self) -> Result<f64> {
        let c = self.model.cell();
        let mut dx = vec![0.0; self.x.len()];
        self.model.rhs(self.x.as_slice(), self.current, &mut dx);
        let cp = c.positive.max_concentration;
        let cn = c.negative.max_concentration;
        let ce = &self.x.as_slice()[ELECTROLYTE_OFFSET..];
        let ce_mean = ce.iter().sum::<f64>() / ce.len() as f64;
        let scales = [
            cp,
            cn,
            cp / c.positive.particle_radius,
            cn / c.negative.particle_radius,
        ];
        Ok(rms(dx.iter().enumerate().map(|(i, d)| {
            d / scales.get(i).copied().unwrap_or(ce_mean)
        })))
    }

    fn time(&self) -> f64 {
        self.time
    }
}

pub struct P2dPlant {
    model: P2d,
    state: P2dState,
    max_step: f64,
    time: f64,
}

impl P2dPlant {
    /// Starts at rest with uniform concentrations taken from an SPMe state.
    pub fn new(cfg: &P2dConfig, x0: &StateVector, max_step: f64) -> Result<Self> {
        if !(max_step > 0.0) {
            return Err(Error::Config(format!("p2d max_step must be positive, got {max_step}")));
        }
        let model = P2d::new(cfg)?;
        let ce = x0.ce.iter().sum::<f64>() / x0.ce.len().max(1) as f64;
        let state = model.equilibrium(x0.cavg_p, x0.cavg_n, ce)?;
        Ok(P2dPlant {
            model,
            state,
            max_step,
            time: 0.0,
        })
    }

    pub fn state(&self) -> &P2dState {
        &self.state
    }
}

impl Plant for P2dPlant {
    fn cell(&self) -> &CellConfig {
        &self.model.config().cell
    }

    fn apply(&mut self, current: f64, duration: f64) -> Result<f64> {
        if !current.is_finite() {
            return Err(Error::Config(format!("non-finite plant current {current}")));
        }
        self.state = self
            .model
            .advance(&self.state, current, duration, self.max_step)
            .map_err(|e| e.at_time(self.time + duration))?;
        self.time += duration;
        Ok(self.model.voltage(&self.state))
    }

    fn soc(&self) -> Result<f64> {
        soc_of(self.cell(), self.model.cathode_average(&self.state))
    }

    fn derivative_norm(&self) -> Result<f64> {
        let diff = self.state.differential();
        let r = self
            .model
            .residual(&diff, &self.state.algebraic(), self.state.current)?;
        let c = self.cell();
        let nr = self.model.config().radial_shells;
        let np = self.model.config().mesh[0];
        let solid = self.state.cs.len();
        let ce_mean = self.state.ce.iter().sum::<f64>() / self.state.ce.len() as f64;
        Ok(rms(r[..diff.len()].iter().enumerate().map(|(i, d)| {
            let scale = if i >= solid {
                ce_mean
            } else if i / nr < np {
                c.positive.max_concentration
            } else {
                c.negative.max_concentration
            };
            d / scale
        })))
    }

    fn time(&self) -> f64 {
        self.time
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ResetConfig {
    /// C-rate of the constant-current phase.
    pub charge_rate: f64,
    /// Minimum rest, s.
    pub rest: f64,
    /// The rest continues until the derivative norm falls below this
    /// fraction of its peak during the experiment.
    pub settle_ratio: f64,
    /// Upper bound on the whole rest, s.
    pub max_rest: f64,
}

impl Default for ResetConfig {
    fn default() -> Self {
        ResetConfig {
            charge_rate: 1.0,
            rest: 400.0,
            settle_ratio: 1e-6,
            max_rest: 20000.0,
        }
    }
}

impl ResetConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.charge_rate > 0.0
            && self.rest >= 0.0
            && self.settle_ratio >= 0.0
            && self.max_rest >= self.rest
            && self.max_rest.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "reset needs charge_rate > 0 and 0 <= rest <= max_rest, got {self:?}"
            )))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResetReport {
    /// Signed current of the constant-current phase, A (negative charges).
    pub current: f64,
    pub charge_time: f64,
    pub rest_time: f64,
    /// Derivative norm at the end over the experiment peak.
    pub ratio: f64,
    pub settled: bool,
}

/// Constant current until the SOC is back at `target_soc`, then rest. The
/// current charges unless the experiment left the cell above the target.
pub fn reset_plant(
    plant: &mut dyn Plant,
    target_soc: f64,
    peak_norm: f64,
    chunk: f64,
    cfg: &ResetConfig,
) -> Result<ResetReport> {
    cfg.validate()?;
    if !(chunk > 0.0) {
        return Err(Error::Config(format!("reset chunk must be positive, got {chunk}")));
    }
    let rate = soc_rate_per_amp(plant.cell());
    let magnitude = cfg.charge_rate * plant.cell().one_c_current;
    let delta = target_soc - plant.soc()?;
    let current = if delta / rate > 0.0 { magnitude } else { -magnitude };
    let charge_time = delta / (rate * current);

    let mut left = charge_time;
    while left > 1e-9 {
        let dt = left.min(chunk);
        plant.apply(current, dt)?;
        left -= dt;
    }

    let ratio_of = |norm: f64| if peak_norm > 0.0 { norm / peak_norm } else { 0.0 };
    let mut rest_time = 0.0;
    let mut ratio = ratio_of(plant.derivative_norm()?);
    while rest_time < cfg.max_rest - 1e-9 && (rest_time < cfg.rest - 1e-9 || ratio > cfg.settle_ratio) {
        let dt = chunk.min(cfg.max_rest - rest_time);
        plant.apply(0.0, dt)?;
        rest_time += dt;
        ratio = ratio_of(plant.derivative_norm()?);
    }
    Ok(ResetReport {
        current,
        charge_time,
        rest_time,
        ratio,
        settled: ratio <= cfg.settle_ratio,
    })
}
