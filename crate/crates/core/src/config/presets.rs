//! Built-in parameter sets.
//!
//! The OCP coefficient tables, the constants block (F, R, T, A, particle
//! radii, maximum concentrations, stoichiometry window) and the two
//! identifiable-parameter vectors are published values. Layer thicknesses,
//! porosities, filler fractions, conductivity coefficients and the 1C current
//! are NOT published alongside them; the values below are placeholders taken
//! from the widely used LiCoO2/graphite data set the OCP tables belong to, and
//! are marked as such in the shipped preset files.

use super::cell::{CellConfig, ElectrodeConfig, ParameterVector, SeparatorConfig};
use crate::model::ocp::{NegativeOcp, PositiveOcp};
use crate::model::StateVector;

pub fn companion_positive_ocp() -> PositiveOcp {
    PositiveOcp::Rational([
        -4.656, 88.669, -401.119, 342.909, -462.471, 433.434, -1.0, 18.933, -79.532, 37.311,
        -73.083, 95.96,
    ])
}

pub fn companion_negative_ocp() -> NegativeOcp {
    NegativeOcp::PowerExp([
        0.722, 0.138, 0.029, -0.0172, 0.0019, 0.2808, 0.9, -15.0, -0.798, 0.4465, -0.4108,
    ])
}

/// Placeholder κ(c_e) coefficients (LiPF6 in EC:DMC fit), S/m.
pub const PLACEHOLDER_KAPPA: [f64; 5] = [0.041253, 0.5007, -0.47212, 0.15094, -0.016018];

/// Particle radii used by the identification preset. With the published
/// solid diffusivities a 2 µm particle relaxes in well under one sampling
/// period and neither D_s leaves a trace in the sampled voltage.
pub const IDENTIFICATION_POSITIVE_RADIUS: f64 = 100e-6;
pub const IDENTIFICATION_NEGATIVE_RADIUS: f64 = 13.7e-6;

/// Constants block in SI, with the published 2 µm radii.
pub fn companion_cell() -> CellConfig {
    let mut cell = CellConfig {
        faraday_constant: 96487.0,
        gas_constant: 8.314,
        temperature: 298.15,
        electrode_area: 2.05,
        positive: ElectrodeConfig {
            thickness: 80e-6,
            particle_radius: 2e-6,
            porosity: 0.385,
            filler_fraction: 0.025,
            max_concentration: 51554.0,
        },
        separator: SeparatorConfig {
            thickness: 25e-6,
            porosity: 0.724,
        },
        negative: ElectrodeConfig {
            thickness: 88e-6,
            particle_radius: 2e-6,
            porosity: 0.485,
            filler_fraction: 0.0326,
            max_concentration: 30555.0,
        },
        theta_pos_min: 0.99174,
        theta_pos_max: 0.49550,
        ocp_positive: companion_positive_ocp(),
        ocp_negative: companion_negative_ocp(),
        kappa_coeffs: PLACEHOLDER_KAPPA,
        volumes_per_layer: 10,
        one_c_current: 0.0,
    };
    cell.one_c_current = nominal_one_c_current(&cell);
    cell
}

/// The cell used for identification campaigns: the companion constants with
/// enlarged particles.
pub fn identification_cell() -> CellConfig {
    let mut cell = companion_cell();
    cell.positive.particle_radius = IDENTIFICATION_POSITIVE_RADIUS;
    cell.negative.particle_radius = IDENTIFICATION_NEGATIVE_RADIUS;
    cell
}

/// Current that moves the cathode across its full stoichiometry window in
/// one hour, rounded to 10 mA.
pub fn nominal_one_c_current(cell: &CellConfig) -> f64 {
    let e = &cell.positive;
    let coulombs = cell.faraday_constant
        * cell.electrode_area
        * e.thickness
        * e.active_fraction()
        * e.max_concentration
        * (cell.theta_pos_max - cell.theta_pos_min).abs();
    (coulombs / 3600.0 * 100.0).round() / 100.0
}

/// Initial guess φ0.
pub fn initial_guess() -> ParameterVector {
    ParameterVector {
        bruggeman: 1.6613,
        transference: 0.4975,
        electrolyte_diffusivity: 1.3376e-10,
        solid_diffusivity_pos: 7.98e-11,
        solid_diffusivity_neg: 1.17e-13,
        rate_constant_pos: 1.8266e-11,
        rate_constant_neg: 1.4769e-11,
    }
}

/// True value φ*, also the scaling reference.
pub fn true_parameters() -> ParameterVector {
    ParameterVector {
        bruggeman: 1.5,
        transference: 0.363,
        electrolyte_diffusivity: 2.44e-10,
        solid_diffusivity_pos: 7.5e-11,
        solid_diffusivity_neg: 1e-13,
        rate_constant_pos: 2e-11,
        rate_constant_neg: 2e-11,
    }
}

/// Electrolyte concentration of the campaign initial state, mol/m^3.
pub const INITIAL_ELECTROLYTE: f64 = 2000.0;

/// Anode stoichiometry at full charge for the placeholder cell balance.
pub const NEGATIVE_THETA_AT_FULL: f64 = 0.8551;

/// Rest state at 100 % SOC with uniform electrolyte.
pub fn full_charge_state(cell: &CellConfig) -> StateVector {
    StateVector::rest(
        cell.theta_pos_max * cell.positive.max_concentration,
        NEGATIVE_THETA_AT_FULL * cell.negative.max_concentration,
        INITIAL_ELECTROLYTE,
        cell.total_volumes(),
    )
}
