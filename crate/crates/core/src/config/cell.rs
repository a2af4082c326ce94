use serde::{Deserialize, Serialize};

use crate::error::FieldError;
use crate::model::ocp::{NegativeOcp, PositiveOcp};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElectrodeConfig {
    /// m
    pub thickness: f64,
    /// m
    pub particle_radius: f64,
    /// electrolyte volume fraction
    pub porosity: f64,
    pub filler_fraction: f64,
    /// mol/m^3
    pub max_concentration: f64,
}

impl ElectrodeConfig {
    /// Active-material volume fraction 1 − ε_f − ε.
    pub fn active_fraction(&self) -> f64 {
        1.0 - self.filler_fraction - self.porosity
    }

    /// Specific active surface area a = 3 (1 − ε_f − ε) / R_p, 1/m.
    pub fn specific_area(&self) -> f64 {
        3.0 * self.active_fraction() / self.particle_radius
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeparatorConfig {
    pub thickness: f64,
    pub porosity: f64,
}

/// Fixed physical constants, geometry and material curves of a cell.
/// All values SI.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellConfig {
    /// C/mol
    pub faraday_constant: f64,
    /// J/(mol K)
    pub gas_constant: f64,
    /// K
    pub temperature: f64,
    /// m^2
    pub electrode_area: f64,
    pub positive: ElectrodeConfig,
    pub separator: SeparatorConfig,
    pub negative: ElectrodeConfig,
    /// Cathode stoichiometry at 0 % state of charge.
    pub theta_pos_min: f64,
    /// Cathode stoichiometry at 100 % state of charge.
    pub theta_pos_max: f64,
    pub ocp_positive: PositiveOcp,
    pub ocp_negative: NegativeOcp,
    /// h1..h5 of κ(c_e), S/m
    pub kappa_coeffs: [f64; 5],
    /// Finite volumes per layer (cathode, separator, anode each).
    pub volumes_per_layer: usize,
    /// A
    pub one_c_current: f64,
}

pub(crate) fn positive(errors: &mut Vec<FieldError>, field: &str, value: f64) {
    if !(value > 0.0 && value.is_finite()) {
        errors.push(FieldError {
            field: field.to_string(),
            message: format!("must be strictly positive, got {value}"),
        });
    }
}

pub(crate) fn open_unit(errors: &mut Vec<FieldError>, field: &str, value: f64) {
    if !(value > 0.0 && value < 1.0) {
        errors.push(FieldError {
            field: field.to_string(),
            message: format!("must lie in (0, 1), got {value}"),
        });
    }
}

impl CellConfig {
    /// Collects every invariant violation instead of stopping at the first.
    pub fn validate(&self) -> Vec<FieldError> {
        let mut errors = Vec::new();
        positive(&mut errors, "faraday_constant", self.faraday_constant);
        positive(&mut errors, "gas_constant", self.gas_constant);
        positive(&mut errors, "temperature", self.temperature);
        positive(&mut errors, "electrode_area", self.electrode_area);
        positive(&mut errors, "one_c_current", self.one_c_current);
        for (name, e) in [("positive", &self.positive), ("negative", &self.negative)] {
            positive(&mut errors, &format!("{name}.thickness"), e.thickness);
            positive(&mut errors, &format!("{name}.particle_radius"), e.particle_radius);
            positive(
                &mut errors,
                &format!("{name}.max_concentration"),
                e.max_concentration,
            );
            open_unit(&mut errors, &format!("{name}.porosity"), e.porosity);
            if !(e.filler_fraction >= 0.0 && e.filler_fraction < 1.0) {
                errors.push(FieldError {
                    field: format!("{name}.filler_fraction"),
                    message: format!("must lie in [0, 1), got {}", e.filler_fraction),
                });
            }
            if e.active_fraction() <= 0.0 {
                errors.push(FieldError {
                    field: name.to_string(),
                    message: "porosity + filler_fraction leaves no active material".into(),
                });
            }
        }
        positive(&mut errors, "separator.thickness", self.separator.thickness);
        open_unit(&mut errors, "separator.porosity", self.separator.porosity);
        open_unit(&mut errors, "theta_pos_min", self.theta_pos_min);
        open_unit(&mut errors, "theta_pos_max", self.theta_pos_max);
        if self.theta_pos_min == self.theta_pos_max {
            errors.push(FieldError {
                field: "theta_pos_max".into(),
                message: "must differ from theta_pos_min".into(),
            });
        }
        if self.volumes_per_layer < 2 {
            errors.push(FieldError {
                field: "volumes_per_layer".into(),
                message: format!("must be at least 2, got {}", self.volumes_per_layer),
            });
        }
        errors
    }

    /// 2RT/F, V.
    pub fn beta(&self) -> f64 {
        2.0 * self.gas_constant * self.temperature / self.faraday_constant
    }

    pub fn total_volumes(&self) -> usize {
        3 * self.volumes_per_layer
    }
}

pub const PARAMETER_COUNT: usize = 7;

/// The identifiable parameters, in the fixed order used for every
/// sensitivity column and estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParameterVector {
    /// Bruggeman exponent p
    pub bruggeman: f64,
    /// cationic transference number t+
    pub transference: f64,
    /// D_e, m^2/s
    pub electrolyte_diffusivity: f64,
    /// D_s,p, m^2/s
    pub solid_diffusivity_pos: f64,
    /// D_s,n, m^2/s
    pub solid_diffusivity_neg: f64,
    /// k_p, m^2.5 mol^-0.5 s^-1
    pub rate_constant_pos: f64,
    /// k_n, m^2.5 mol^-0.5 s^-1
    pub rate_constant_neg: f64,
}

impl ParameterVector {
    pub const NAMES: [&'static str; PARAMETER_COUNT] =
        ["p", "t_plus", "D_e", "D_s_p", "D_s_n", "k_p", "k_n"];

    pub fn to_array(&self) -> [f64; PARAMETER_COUNT] {
        [
            self.bruggeman,
            self.transference,
            self.electrolyte_diffusivity,
            self.solid_diffusivity_pos,
            self.solid_diffusivity_neg,
            self.rate_constant_pos,
            self.rate_constant_neg,
        ]
    }

    pub fn from_array(v: [f64; PARAMETER_COUNT]) -> Self {
        ParameterVector {
            bruggeman: v[0],
            transference: v[1],
            electrolyte_diffusivity: v[2],
            solid_diffusivity_pos: v[3],
            solid_diffusivity_neg: v[4],
            rate_constant_pos: v[5],
            rate_constant_neg: v[6],
        }
    }

    pub fn validate(&self, prefix: &str) -> Vec<FieldError> {
        let mut errors = Vec::new();
        for (name, value) in Self::NAMES.iter().zip(self.to_array()) {
            positive(&mut errors, &format!("{prefix}.{name}"), value);
        }
        if self.transference >= 1.0 {
            errors.push(FieldError {
                field: format!("{prefix}.t_plus"),
                message: format!("must be below 1, got {}", self.transference),
            });
        }
        errors
    }
}
