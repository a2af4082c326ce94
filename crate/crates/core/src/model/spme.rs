//! Single particle model with electrolyte dynamics.
//!
//! Solid diffusion in each electrode is reduced to the volume-averaged
//! concentration and flux of a fourth-order polynomial profile; the
//! electrolyte is resolved with `n_el` finite volumes per layer. Every
//! differential equation is affine in (state, current), so `rhs` is exactly
//! `A x + B I`; [`Spme::linear_system`] exposes that pair.
//!
//! Sign convention: a positive applied current discharges the cell.

use nalgebra::{DMatrix, DVector};

use super::ocp::{kappa_electrolyte, ocp_negative, ocp_positive};
use super::state::{StateVector, ELECTROLYTE_OFFSET};
use crate::config::{CellConfig, ParameterVector};
use crate::error::{Electrode, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layer {
    Positive,
    Separator,
    Negative,
}

/// Model instance bound to one cell and one parameter vector.
#[derive(Debug, Clone)]
pub struct Spme {
    cell: CellConfig,
    params: ParameterVector,
    n_el: usize,
    area_p: f64,
    area_n: f64,
    /// Interface conductances D/Δx between neighbouring volumes, m/s.
    conductance: Vec<f64>,
    /// ε Δx of each volume.
    capacity: Vec<f64>,
    /// dc_e/dt contribution per ampere, for each volume.
    source: Vec<f64>,
}

impl Spme {
    pub fn new(cell: &CellConfig, params: &ParameterVector) -> Result<Self> {
        let errors: Vec<_> = cell
            .validate()
            .into_iter()
            .chain(params.validate("parameters"))
            .collect();
        if !errors.is_empty() {
            return Err(Error::Invalid(errors));
        }
        let n = cell.volumes_per_layer;
        let f = cell.faraday_constant;
        let area = cell.electrode_area;
        let t_plus = params.transference;
        let p = params.bruggeman;

        let layers = [
            (cell.positive.thickness, cell.positive.porosity),
            (cell.separator.thickness, cell.separator.porosity),
            (cell.negative.thickness, cell.negative.porosity),
        ];
        let mut porosity = Vec::with_capacity(3 * n);
        let mut dx = Vec::with_capacity(3 * n);
        let mut diffusivity = Vec::with_capacity(3 * n);
        let mut source = Vec::with_capacity(3 * n);
        for (i, (thickness, eps)) in layers.iter().enumerate() {
            let s = match i {
                0 => -(1.0 - t_plus) / (f * area * thickness * eps),
                2 => (1.0 - t_plus) / (f * area * thickness * eps),
                _ => 0.0,
            };
            for _ in 0..n {
                porosity.push(*eps);
                dx.push(thickness / n as f64);
                diffusivity.push(eps.powf(p) * params.electrolyte_diffusivity);
                source.push(s);
            }
        }
        // Series combination of the two half cells: the distance-weighted
        // harmonic mean of the neighbouring effective diffusivities.
        let conductance = (0..3 * n - 1)
            .map(|k| 1.0 / (dx[k] / (2.0 * diffusivity[k]) + dx[k + 1] / (2.0 * diffusivity[k + 1])))
            .collect();
        let capacity = porosity.iter().zip(&dx).map(|(e, d)| e * d).collect();

        Ok(Spme {
            cell: cell.clone(),
            params: *params,
            n_el: n,
            area_p: cell.positive.specific_area(),
            area_n: cell.negative.specific_area(),
            conductance,
            capacity,
            source,
        })
    }

    pub fn cell(&self) -> &CellConfig {
        &self.cell
    }

    pub fn params(&self) -> &ParameterVector {
        &self.params
    }

    pub fn state_len(&self) -> usize {
        ELECTROLYTE_OFFSET + 3 * self.n_el
    }

    /// a_p L_p F A and a_n L_n F A: current-to-molar-flux scale of each electrode.
    fn charge_scale(&self, electrode: Electrode) -> f64 {
        let c = &self.cell;
        match electrode {
            Electrode::Positive => {
                c.faraday_constant * c.electrode_area * c.positive.thickness * self.area_p
            }
            Electrode::Negative => {
                c.faraday_constant * c.electrode_area * c.negative.thickness * self.area_n
            }
        }
    }

    /// Time derivative of the flat state.
    pub fn rhs(&self, x: &[f64], current: f64, out: &mut [f64]) {
        let c = &self.cell;
        let rp = c.positive.particle_radius;
        let rn = c.negative.particle_radius;
        let dp = self.params.solid_diffusivity_pos;
        let dn = self.params.solid_diffusivity_neg;
        let sp = current / self.charge_scale(Electrode::Positive);
        let sn = current / self.charge_scale(Electrode::Negative);

        out[0] = 3.0 / rp * sp;
        out[1] = -3.0 / rn * sn;
        out[2] = -30.0 * dp / (rp * rp) * x[2] + 45.0 / (2.0 * rp * rp) * sp;
        out[3] = -30.0 * dn / (rn * rn) * x[3] - 45.0 / (2.0 * rn * rn) * sn;

        let ce = &x[ELECTROLYTE_OFFSET..];
        let dce = &mut out[ELECTROLYTE_OFFSET..];
        let m = ce.len();
        for k in 0..m {
            let mut flux = 0.0;
            if k > 0 {
                flux -= self.conductance[k - 1] * (ce[k] - ce[k - 1]);
            }
            if k + 1 < m {
                flux += self.conductance[k] * (ce[k + 1] - ce[k]);
            }
            dce[k] = flux / self.capacity[k] + self.source[k] * current;
        }
    }

    /// The (A, B) pair with rhs(x, I) = A x + B I.
    pub fn linear_system(&self) -> (DMatrix<f64>, DVector<f64>) {
        let n = self.state_len();
        let mut a = DMatrix::zeros(n, n);
        let mut b = DVector::zeros(n);
        let zero = vec![0.0; n];
        let mut out = vec![0.0; n];
        self.rhs(&zero, 1.0, &mut out);
        b.copy_from_slice(&out);

        let c = &self.cell;
        let rp = c.positive.particle_radius;
        let rn = c.negative.particle_radius;
        a[(2, 2)] = -30.0 * self.params.solid_diffusivity_pos / (rp * rp);
        a[(3, 3)] = -30.0 * self.params.solid_diffusivity_neg / (rn * rn);
        let m = 3 * self.n_el;
        let o = ELECTROLYTE_OFFSET;
        for k in 0..m {
            if k > 0 {
                let g = self.conductance[k - 1] / self.capacity[k];
                a[(o + k, o + k - 1)] += g;
                a[(o + k, o + k)] -= g;
            }
            if k + 1 < m {
                let g = self.conductance[k] / self.capacity[k];
                a[(o + k, o + k + 1)] += g;
                a[(o + k, o + k)] -= g;
            }
        }
        (a, b)
    }

    /// Moles of lithium in the electrolyte per unit electrode area, Σ ε c Δx.
    pub fn electrolyte_inventory(&self, x: &[f64]) -> f64 {
        x[ELECTROLYTE_OFFSET..]
            .iter()
            .zip(&self.capacity)
            .map(|(c, w)| c * w)
            .sum()
    }

    /// Net rate of change of [`Self::electrolyte_inventory`] from the reaction
    /// source terms, per ampere.
    pub fn inventory_source_per_amp(&self) -> f64 {
        self.source.iter().zip(&self.capacity).map(|(s, w)| s * w).sum()
    }

    pub fn surface_concentration(&self, x: &[f64], current: f64, electrode: Electrode) -> Result<f64> {
        let c = &self.cell;
        let (cavg, q, radius, d, cmax, sign) = match electrode {
            Electrode::Positive => (
                x[0],
                x[2],
                c.positive.particle_radius,
                self.params.solid_diffusivity_pos,
                c.positive.max_concentration,
                1.0,
            ),
            Electrode::Negative => (
                x[1],
                x[3],
                c.negative.particle_radius,
                self.params.solid_diffusivity_neg,
                c.negative.max_concentration,
                -1.0,
            ),
        };
        let surface = cavg
            + 8.0 * radius / 35.0 * q
            + sign * radius / (35.0 * d) * current / self.charge_scale(electrode);
        if surface > 0.0 && surface < cmax {
            Ok(surface)
        } else {
            Err(Error::Saturation {
                electrode,
                value: surface,
            })
        }
    }

    fn layer_range(&self, layer: Layer) -> std::ops::Range<usize> {
        let n = self.n_el;
        let o = ELECTROLYTE_OFFSET;
        match layer {
            Layer::Positive => o..o + n,
            Layer::Separator => o + n..o + 2 * n,
            Layer::Negative => o + 2 * n..o + 3 * n,
        }
    }

    /// Mean electrolyte concentration of a layer (volumes share one width).
    pub fn layer_average(&self, x: &[f64], layer: Layer) -> f64 {
        let r = self.layer_range(layer);
        let n = r.len() as f64;
        x[r].iter().sum::<f64>() / n
    }

    /// c_e at the two current-collector faces, extrapolated linearly from the
    /// two outermost volume centres.
    pub fn collector_concentrations(&self, x: &[f64]) -> (f64, f64) {
        let ce = &x[ELECTROLYTE_OFFSET..];
        let m = ce.len();
        (
            1.5 * ce[0] - 0.5 * ce[1],
            1.5 * ce[m - 1] - 0.5 * ce[m - 2],
        )
    }

    pub fn electrolyte_potential_drop(&self, x: &[f64], current: f64) -> Result<f64> {
        let c = &self.cell;
        let p = self.params.bruggeman;
        let mut resistance = 0.0;
        for (layer, thickness, eps, weight) in [
            (Layer::Positive, c.positive.thickness, c.positive.porosity, 1.0),
            (Layer::Separator, c.separator.thickness, c.separator.porosity, 2.0),
            (Layer::Negative, c.negative.thickness, c.negative.porosity, 1.0),
        ] {
            let kappa = kappa_electrolyte(self.layer_average(x, layer), &c.kappa_coeffs)?;
            resistance += weight * thickness / (eps.powf(p) * kappa);
        }
        let (c0p, c0n) = self.collector_concentrations(x);
        if !(c0p > 0.0) {
            return Err(Error::Singularity {
                what: "cathode collector electrolyte concentration",
                value: c0p,
            });
        }
        if !(c0n > 0.0) {
            return Err(Error::Singularity {
                what: "anode collector electrolyte concentration",
                value: c0n,
            });
        }
        Ok(-current / (2.0 * c.electrode_area) * resistance
            + c.beta() * (1.0 - self.params.transference) * (c0p / c0n).ln())
    }

    /// Average overpotential of one electrode at a given surface concentration.
    pub fn overpotential(&self, x: &[f64], current: f64, electrode: Electrode, surface: f64) -> Result<f64> {
        let c = &self.cell;
        let (layer, k, cmax, sign) = match electrode {
            Electrode::Positive => (
                Layer::Positive,
                self.params.rate_constant_pos,
                c.positive.max_concentration,
                -1.0,
            ),
            Electrode::Negative => (
                Layer::Negative,
                self.params.rate_constant_neg,
                c.negative.max_concentration,
                1.0,
            ),
        };
        let radicand = self.layer_average(x, layer) * surface * (cmax - surface);
        if !(radicand > 0.0) {
            return Err(Error::Singularity {
                what: "exchange current density",
                value: radicand,
            });
        }
        let i0 = k * radicand.sqrt();
        let arg = sign * current / (2.0 * self.charge_scale(electrode) * i0);
        Ok(c.beta() * arg.asinh())
    }

    /// Terminal voltage V = U_p − U_n + ΔΦ_e + η_p − η_n.
    pub fn output_voltage(&self, x: &[f64], current: f64) -> Result<f64> {
        let c = &self.cell;
        let csp = self.surface_concentration(x, current, Electrode::Positive)?;
        let csn = self.surface_concentration(x, current, Electrode::Negative)?;
        let up = ocp_positive(csp / c.positive.max_concentration, &c.ocp_positive)?;
        let un = ocp_negative(csn / c.negative.max_concentration, &c.ocp_negative)?;
        let drop = self.electrolyte_potential_drop(x, current)?;
        let eta_p = self.overpotential(x, current, Electrode::Positive, csp)?;
        let eta_n = self.overpotential(x, current, Electrode::Negative, csn)?;
        Ok(up - un + drop + eta_p - eta_n)
    }

    pub fn soc(&self, x: &[f64]) -> Result<f64> {
        soc_of(&self.cell, x[0])
    }

    pub fn validate_state(&self, state: &StateVector) -> Result<()> {
        let c = &self.cell;
        if state.ce.len() != 3 * self.n_el {
            return Err(Error::Config(format!(
                "state has {} electrolyte volumes, model expects {}",
                state.ce.len(),
                3 * self.n_el
            )));
        }
        if !(state.cavg_p > 0.0 && state.cavg_p < c.positive.max_concentration) {
            return Err(Error::Domain {
                what: "cathode average concentration",
                value: state.cavg_p,
            });
        }
        if !(state.cavg_n > 0.0 && state.cavg_n < c.negative.max_concentration) {
            return Err(Error::Domain {
                what: "anode average concentration",
                value: state.cavg_n,
            });
        }
        if let Some(bad) = state.ce.iter().find(|c| !(**c > 0.0)) {
            return Err(Error::Domain {
                what: "electrolyte concentration",
                value: *bad,
            });
        }
        Ok(())
    }
}

/// State of charge in percent from the cathode average concentration; not clamped.
pub fn soc_of(cell: &CellConfig, cavg_p: f64) -> Result<f64> {
    let span = cell.theta_pos_max - cell.theta_pos_min;
    if span == 0.0 {
        return Err(Error::Config(
            "theta_pos_max equals theta_pos_min; state of charge undefined".into(),
        ));
    }
    let cmax = cell.positive.max_concentration;
    Ok(100.0 / cmax * (cavg_p - cell.theta_pos_min * cmax) / span)
}

/// Cathode average concentration at a given state of charge.
pub fn cavg_p_at_soc(cell: &CellConfig, soc: f64) -> f64 {
    let cmax = cell.positive.max_concentration;
    cmax * (cell.theta_pos_min + soc / 100.0 * (cell.theta_pos_max - cell.theta_pos_min))
}
