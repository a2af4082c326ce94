//! TOML configuration files.
//!
//! Every physical quantity may be written as a bare number in SI or as
//! `{ value = .., unit = ".." }`. Syntax and type errors stop at the first
//! problem and carry file:line:column; invariant violations are collected
//! in full.

use std::collections::HashMap;
use std::fmt;
use std::ops::Range;
use std::path::Path;

use serde::de::{self, MapAccess, Visitor};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use toml::Spanned;

use super::cell::{CellConfig, ElectrodeConfig, ParameterVector, SeparatorConfig};
use super::presets::full_charge_state;
use crate::campaign::{CampaignConfig, CampaignSetup, Method, PlantKind};
use crate::doe::DesignConfig;
use crate::error::{Error, FieldError, Result};
use crate::estimator::EstimatorConfig;
use crate::model::ocp::{NegativeOcp, PositiveOcp};
use crate::model::{IntegratorConfig, StateVector};
use crate::p2d::P2dConfig;
use crate::plant::ResetConfig;
use crate::sensitivity::SensitivityConfig;
use crate::units::{parse_unit, Dimension};

/// Environment variable naming the config file used when none is given.
pub const CONFIG_ENV: &str = "SPME_DOE_CONFIG";

#[derive(Debug, Clone, PartialEq)]
pub enum Quantity {
    Si(f64),
    Annotated { value: f64, unit: String },
}

impl Serialize for Quantity {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Quantity::Si(v) => s.serialize_f64(*v),
            Quantity::Annotated { value, unit } => {
                use serde::ser::SerializeMap;
                let mut m = s.serialize_map(Some(2))?;
                m.serialize_entry("value", value)?;
                m.serialize_entry("unit", unit)?;
                m.end()
            }
        }
    }
}

impl<'de> Deserialize<'de> for Quantity {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct V;
        impl<'de> Visitor<'de> for V {
            type Value = Quantity;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a number or { value = <number>, unit = \"<unit>\" }")
            }
            fn visit_f64<E: de::Error>(self, v: f64) -> std::result::Result<Quantity, E> {
                Ok(Quantity::Si(v))
            }
            fn visit_i64<E: de::Error>(self, v: i64) -> std::result::Result<Quantity, E> {
                Ok(Quantity::Si(v as f64))
            }
            fn visit_u64<E: de::Error>(self, v: u64) -> std::result::Result<Quantity, E> {
                Ok(Quantity::Si(v as f64))
            }
            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> std::result::Result<Quantity, A::Error> {
                let mut value = None;
                let mut unit = None;
                while let Some(key) = map.next_key::<String>()? {
                    match key.as_str() {
                        "value" => value = Some(map.next_value::<f64>()?),
                        "unit" => unit = Some(map.next_value::<String>()?),
                        other => return Err(de::Error::unknown_field(other, &["value", "unit"])),
                    }
                }
                Ok(Quantity::Annotated {
                    value: value.ok_or_else(|| de::Error::missing_field("value"))?,
                    unit: unit.ok_or_else(|| de::Error::missing_field("unit"))?,
                })
            }
        }
        d.deserialize_any(V)
    }
}

type Q = Spanned<Quantity>;

fn si(v: f64) -> Q {
    Spanned::new(0..0, Quantity::Si(v))
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ElectrodeFile {
    thickness: Q,
    particle_radius: Q,
    porosity: Q,
    filler_fraction: Q,
    max_concentration: Q,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SeparatorFile {
    thickness: Q,
    porosity: Q,
}

fn default_volumes() -> usize {
    10
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CellFile {
    faraday_constant: Q,
    gas_constant: Q,
    temperature: Q,
    electrode_area: Q,
    theta_pos_min: Q,
    theta_pos_max: Q,
    one_c_current: Q,
    kappa_coeffs: [f64; 5],
    #[serde(default = "default_volumes")]
    volumes_per_layer: usize,
    positive: ElectrodeFile,
    separator: SeparatorFile,
    negative: ElectrodeFile,
    ocp_positive: PositiveOcp,
    ocp_negative: NegativeOcp,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamFile {
    p: Q,
    t_plus: Q,
    #[serde(rename = "D_e")]
    d_e: Q,
    #[serde(rename = "D_s_p")]
    d_s_p: Q,
    #[serde(rename = "D_s_n")]
    d_s_n: Q,
    k_p: Q,
    k_n: Q,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParametersFile {
    truth: ParamFile,
    initial: ParamFile,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StateFile {
    cavg_p: Q,
    cavg_n: Q,
    qavg_p: Option<Q>,
    qavg_n: Option<Q>,
    /// Uniform electrolyte concentration.
    ce: Option<Q>,
    /// Explicit per-volume electrolyte concentrations, mol/m^3.
    ce_profile: Option<Vec<f64>>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CampaignFile {
    plant: Option<PlantKind>,
    method: Option<Method>,
    n_experiments: Option<usize>,
    experiment_duration: Option<Q>,
    t_s: Option<Q>,
    blocks: Option<usize>,
    sigma_y2: Option<Q>,
    nominal_sigma_y2: Option<Q>,
    i_max_rate: Option<f64>,
    v_min: Option<Q>,
    v_max: Option<Q>,
    safety_margin: Option<Q>,
    cc_rate: Option<f64>,
    rng_seed: Option<u64>,
    validation_duration: Option<Q>,
    variance_threshold: Option<f64>,
    plateau_epsilon: Option<f64>,
    p2d_max_step: Option<Q>,
    reset: Option<ResetConfig>,
    design: Option<DesignConfig>,
    estimator: Option<EstimatorConfig>,
    sensitivity: Option<SensitivityConfig>,
    integrator: Option<IntegratorConfig>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct P2dFile {
    solid_conductivity_pos: Q,
    solid_conductivity_neg: Q,
    mesh: [usize; 3],
    radial_shells: usize,
    /// Marks values that are stand-ins rather than measured parameters.
    #[serde(default)]
    placeholder: bool,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    cell: CellFile,
    parameters: ParametersFile,
    initial_state: Option<StateFile>,
    #[serde(default)]
    campaign: CampaignFile,
    p2d: Option<P2dFile>,
}

/// A fully validated configuration file.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedConfig {
    pub cell: CellConfig,
    pub truth: ParameterVector,
    pub initial: ParameterVector,
    pub x0: StateVector,
    pub campaign: CampaignConfig,
    pub p2d: Option<P2dConfig>,
    /// The [p2d] section declares itself a placeholder.
    pub p2d_placeholder: bool,
}

impl LoadedConfig {
    /// The identification preset with default campaign settings.
    pub fn builtin() -> Self {
        let cell = super::presets::identification_cell();
        LoadedConfig {
            x0: full_charge_state(&cell),
            cell,
            truth: super::presets::true_parameters(),
            initial: super::presets::initial_guess(),
            campaign: CampaignConfig::default(),
            p2d: None,
            p2d_placeholder: false,
        }
    }

    pub fn setup(&self) -> CampaignSetup {
        CampaignSetup {
            cell: self.cell.clone(),
            truth: self.truth,
            initial: self.initial,
            x0: self.x0.clone(),
            p2d: self.p2d.clone(),
        }
    }

    /// The configuration as TOML with every quantity in bare SI.
    pub fn to_toml(&self) -> String {
        let c = &self.cell;
        let electrode = |e: &ElectrodeConfig| ElectrodeFile {
            thickness: si(e.thickness),
            particle_radius: si(e.particle_radius),
            porosity: si(e.porosity),
            filler_fraction: si(e.filler_fraction),
            max_concentration: si(e.max_concentration),
        };
        let params = |p: &ParameterVector| ParamFile {
            p: si(p.bruggeman),
            t_plus: si(p.transference),
            d_e: si(p.electrolyte_diffusivity),
            d_s_p: si(p.solid_diffusivity_pos),
            d_s_n: si(p.solid_diffusivity_neg),
            k_p: si(p.rate_constant_pos),
            k_n: si(p.rate_constant_neg),
        };
        let k = &self.campaign;
        let file = FileConfig {
            cell: CellFile {
                faraday_constant: si(c.faraday_constant),
                gas_constant: si(c.gas_constant),
                temperature: si(c.temperature),
                electrode_area: si(c.electrode_area),
                theta_pos_min: si(c.theta_pos_min),
                theta_pos_max: si(c.theta_pos_max),
                one_c_current: si(c.one_c_current),
                kappa_coeffs: c.kappa_coeffs,
                volumes_per_layer: c.volumes_per_layer,
                positive: electrode(&c.positive),
                separator: SeparatorFile {
                    thickness: si(c.separator.thickness),
                    porosity: si(c.separator.porosity),
                },
                negative: electrode(&c.negative),
                ocp_positive: c.ocp_positive.clone(),
                ocp_negative: c.ocp_negative.clone(),
            },
            parameters: ParametersFile {
                truth: params(&self.truth),
                initial: params(&self.initial),
            },
            initial_state: Some(StateFile {
                cavg_p: si(self.x0.cavg_p),
                cavg_n: si(self.x0.cavg_n),
                qavg_p: Some(si(self.x0.qavg_p)),
                qavg_n: Some(si(self.x0.qavg_n)),
                ce: None,
                ce_profile: Some(self.x0.ce.clone()),
            }),
            campaign: CampaignFile {
                plant: Some(k.plant),
                method: Some(k.method),
                n_experiments: Some(k.n_experiments),
                experiment_duration: Some(si(k.experiment_duration)),
                t_s: Some(si(k.t_s)),
                blocks: Some(k.blocks),
                sigma_y2: Some(si(k.sigma_y2)),
                nominal_sigma_y2: Some(si(k.nominal_sigma_y2)),
                i_max_rate: Some(k.i_max_rate),
                v_min: Some(si(k.v_min)),
                v_max: Some(si(k.v_max)),
                safety_margin: Some(si(k.safety_margin)),
                cc_rate: Some(k.cc_rate),
                rng_seed: Some(k.rng_seed),
                validation_duration: Some(si(k.validation_duration)),
                variance_threshold: k.variance_threshold,
                plateau_epsilon: k.plateau_epsilon,
                p2d_max_step: Some(si(k.p2d_max_step)),
                reset: Some(k.reset),
                design: Some(k.design),
                estimator: Some(k.estimator),
                sensitivity: Some(k.sensitivity),
                integrator: Some(k.integrator),
            },
            p2d: self.p2d.as_ref().map(|p| P2dFile {
                solid_conductivity_pos: si(p.solid_conductivity_pos),
                solid_conductivity_neg: si(p.solid_conductivity_neg),
                mesh: p.mesh,
                radial_shells: p.radial_shells,
                placeholder: self.p2d_placeholder,
            }),
        };
        toml::to_string(&file).expect("configuration serializes")
    }
}

/// Byte offset → 1-based (line, column).
fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let col = before.rsplit('\n').next().map_or(0, |l| l.chars().count()) + 1;
    (line, col)
}

struct Converter<'a> {
    file: &'a str,
    text: &'a str,
    errors: Vec<FieldError>,
    spans: HashMap<String, Range<usize>>,
}

impl Converter<'_> {
    fn location(&self, span: &Range<usize>) -> String {
        let (line, col) = line_col(self.text, span.start);
        format!("{}:{line}:{col}", self.file)
    }

    fn quantity(&mut self, field: &str, q: &Q, expected: Dimension) -> f64 {
        self.spans.insert(field.to_string(), q.span());
        match q.get_ref() {
            Quantity::Si(v) => *v,
            Quantity::Annotated { value, unit } => match parse_unit(unit) {
                Ok(u) if u.dimension == expected => value * u.factor,
                Ok(u) => {
                    let message = format!(
                        "{}: unit \"{unit}\" has dimension {}, expected {expected}",
                        self.location(&q.span()),
                        u.dimension
                    );
                    self.errors.push(FieldError {
                        field: field.to_string(),
                        message,
                    });
                    f64::NAN
                }
                Err(e) => {
                    let message = format!("{}: {e}", self.location(&q.span()));
                    self.errors.push(FieldError {
                        field: field.to_string(),
                        message,
                    });
                    f64::NAN
                }
            },
        }
    }

    fn optional(&mut self, field: &str, q: &Option<Q>, expected: Dimension, default: f64) -> f64 {
        match q {
            Some(q) => self.quantity(field, q, expected),
            None => default,
        }
    }

    fn electrode(&mut self, prefix: &str, e: &ElectrodeFile) -> ElectrodeConfig {
        ElectrodeConfig {
            thickness: self.quantity(&format!("{prefix}.thickness"), &e.thickness, Dimension::LENGTH),
            particle_radius: self.quantity(&format!("{prefix}.particle_radius"), &e.particle_radius, Dimension::LENGTH),
            porosity: self.quantity(&format!("{prefix}.porosity"), &e.porosity, Dimension::NONE),
            filler_fraction: self.quantity(&format!("{prefix}.filler_fraction"), &e.filler_fraction, Dimension::NONE),
            max_concentration: self.quantity(&format!("{prefix}.max_concentration"), &e.max_concentration, Dimension::CONCENTRATION),
        }
    }

    fn params(&mut self, prefix: &str, p: &ParamFile) -> ParameterVector {
        ParameterVector {
            bruggeman: self.quantity(&format!("{prefix}.p"), &p.p, Dimension::NONE),
            transference: self.quantity(&format!("{prefix}.t_plus"), &p.t_plus, Dimension::NONE),
            electrolyte_diffusivity: self.quantity(&format!("{prefix}.D_e"), &p.d_e, Dimension::DIFFUSIVITY),
            solid_diffusivity_pos: self.quantity(&format!("{prefix}.D_s_p"), &p.d_s_p, Dimension::DIFFUSIVITY),
            solid_diffusivity_neg: self.quantity(&format!("{prefix}.D_s_n"), &p.d_s_n, Dimension::DIFFUSIVITY),
            rate_constant_pos: self.quantity(&format!("{prefix}.k_p"), &p.k_p, Dimension::RATE_CONSTANT),
            rate_constant_neg: self.quantity(&format!("{prefix}.k_n"), &p.k_n, Dimension::RATE_CONSTANT),
        }
    }

    /// Adds a location to invariant errors whose field was read from the file.
    fn push_invariants(&mut self, prefix: &str, errors: Vec<FieldError>) {
        for e in errors {
            let field = if prefix.is_empty() || e.field.starts_with(prefix) {
                e.field
            } else {
                format!("{prefix}{}", e.field)
            };
            let message = match self.spans.get(&field) {
                Some(span) => format!("{}: {}", self.location(span), e.message),
                None => format!("{}: {}", self.file, e.message),
            };
            self.errors.push(FieldError { field, message });
        }
    }
}

/// Parses and validates configuration text. `file` is only used in messages.
pub fn parse_config(text: &str, file: &str) -> Result<LoadedConfig> {
    let raw: FileConfig = toml::from_str(text).map_err(|e| {
        let (line, column) = e.span().map_or((1, 1), |s| line_col(text, s.start));
        Error::Parse {
            file: file.to_string(),
            line,
            column,
            message: e.message().trim().to_string(),
        }
    })?;
    let mut cv = Converter {
        file,
        text,
        errors: Vec::new(),
        spans: HashMap::new(),
    };

    let c = &raw.cell;
    let cell = CellConfig {
        faraday_constant: cv.quantity("cell.faraday_constant", &c.faraday_constant, Dimension::CHARGE_PER_MOLE),
        gas_constant: cv.quantity("cell.gas_constant", &c.gas_constant, Dimension::ENERGY_PER_MOLE_KELVIN),
        temperature: cv.quantity("cell.temperature", &c.temperature, Dimension::TEMPERATURE),
        electrode_area: cv.quantity("cell.electrode_area", &c.electrode_area, Dimension::AREA),
        positive: cv.electrode("cell.positive", &c.positive),
        separator: SeparatorConfig {
            thickness: cv.quantity("cell.separator.thickness", &c.separator.thickness, Dimension::LENGTH),
            porosity: cv.quantity("cell.separator.porosity", &c.separator.porosity, Dimension::NONE),
        },
        negative: cv.electrode("cell.negative", &c.negative),
        theta_pos_min: cv.quantity("cell.theta_pos_min", &c.theta_pos_min, Dimension::NONE),
        theta_pos_max: cv.quantity("cell.theta_pos_max", &c.theta_pos_max, Dimension::NONE),
        ocp_positive: c.ocp_positive.clone(),
        ocp_negative: c.ocp_negative.clone(),
        kappa_coeffs: c.kappa_coeffs,
        volumes_per_layer: c.volumes_per_layer,
        one_c_current: cv.quantity("cell.one_c_current", &c.one_c_current, Dimension::CURRENT),
    };
    let truth = cv.params("parameters.truth", &raw.parameters.truth);
    let initial = cv.params("parameters.initial", &raw.parameters.initial);

    let x0 = match &raw.initial_state {
        None => full_charge_state(&cell),
        Some(s) => {
            let conc = Dimension::CONCENTRATION;
            let flux = parse_unit("mol/m^4").expect("flux unit").dimension;
            let cavg_p = cv.quantity("initial_state.cavg_p", &s.cavg_p, conc);
            let cavg_n = cv.quantity("initial_state.cavg_n", &s.cavg_n, conc);
            let qavg_p = cv.optional("initial_state.qavg_p", &s.qavg_p, flux, 0.0);
            let qavg_n = cv.optional("initial_state.qavg_n", &s.qavg_n, flux, 0.0);
            let ce = match (&s.ce, &s.ce_profile) {
                (Some(q), None) => vec![cv.quantity("initial_state.ce", q, conc); cell.total_volumes()],
                (None, Some(profile)) => profile.clone(),
                _ => {
                    cv.errors.push(FieldError {
                        field: "initial_state.ce".into(),
                        message: format!("{file}: give exactly one of ce and ce_profile"),
                    });
                    vec![f64::NAN; cell.total_volumes()]
                }
            };
            StateVector {
                cavg_p,
                cavg_n,
                qavg_p,
                qavg_n,
                ce,
            }
        }
    };

    let k = &raw.campaign;
    let d = CampaignConfig::default();
    let time = Dimension::TIME;
    let volt = Dimension::VOLTAGE;
    let campaign = CampaignConfig {
        plant: k.plant.unwrap_or(d.plant),
        method: k.method.unwrap_or(d.method),
        n_experiments: k.n_experiments.unwrap_or(d.n_experiments),
        experiment_duration: cv.optional("campaign.experiment_duration", &k.experiment_duration, time, d.experiment_duration),
        t_s: cv.optional("campaign.t_s", &k.t_s, time, d.t_s),
        blocks: k.blocks.unwrap_or(d.blocks),
        sigma_y2: cv.optional("campaign.sigma_y2", &k.sigma_y2, Dimension::VOLTAGE_SQUARED, d.sigma_y2),
        nominal_sigma_y2: cv.optional("campaign.nominal_sigma_y2", &k.nominal_sigma_y2, Dimension::VOLTAGE_SQUARED, d.nominal_sigma_y2),
        i_max_rate: k.i_max_rate.unwrap_or(d.i_max_rate),
        v_min: cv.optional("campaign.v_min", &k.v_min, volt, d.v_min),
        v_max: cv.optional("campaign.v_max", &k.v_max, volt, d.v_max),
        safety_margin: cv.optional("campaign.safety_margin", &k.safety_margin, volt, d.safety_margin),
        cc_rate: k.cc_rate.unwrap_or(d.cc_rate),
        reset: k.reset.unwrap_or(d.reset),
        rng_seed: k.rng_seed.unwrap_or(d.rng_seed),
        validation_duration: cv.optional("campaign.validation_duration", &k.validation_duration, time, d.validation_duration),
        variance_threshold: k.variance_threshold,
        plateau_epsilon: k.plateau_epsilon,
        p2d_max_step: cv.optional("campaign.p2d_max_step", &k.p2d_max_step, time, d.p2d_max_step),
        design: k.design.unwrap_or(d.design),
        estimator: k.estimator.unwrap_or(d.estimator),
        sensitivity: k.sensitivity.unwrap_or(d.sensitivity),
        integrator: k.integrator.unwrap_or(d.integrator),
    };

    let p2d = raw.p2d.as_ref().map(|p| P2dConfig {
        cell: cell.clone(),
        params: truth,
        solid_conductivity_pos: cv.quantity("p2d.solid_conductivity_pos", &p.solid_conductivity_pos, Dimension::CONDUCTIVITY),
        solid_conductivity_neg: cv.quantity("p2d.solid_conductivity_neg", &p.solid_conductivity_neg, Dimension::CONDUCTIVITY),
        mesh: p.mesh,
        radial_shells: p.radial_shells,
    });

    // Unit errors first: invariants on NaN placeholders would only repeat them.
    if !cv.errors.is_empty() {
        return Err(Error::Invalid(cv.errors));
    }
    cv.push_invariants("cell.", cell.validate());
    cv.push_invariants("", truth.validate("parameters.truth"));
    cv.push_invariants("", initial.validate("parameters.initial"));
    cv.push_invariants("", campaign.validate());
    if let Some(p) = &p2d {
        let own: Vec<FieldError> = p.validate().into_iter().filter(|e| e.field.starts_with("p2d.")).collect();
        cv.push_invariants("", own);
    }
    if x0.ce.len() != cell.total_volumes() {
        cv.errors.push(FieldError {
            field: "initial_state.ce_profile".into(),
            message: format!(
                "{file}: {} electrolyte volumes, the cell has {}",
                x0.ce.len(),
                cell.total_volumes()
            ),
        });
    } else if cv.errors.is_empty() {
        let model = crate::model::Spme::new(&cell, &truth);
        if let Err(e) = model.and_then(|m| m.validate_state(&x0)) {
            cv.errors.push(FieldError {
                field: "initial_state".into(),
                message: format!("{file}: {e}"),
            });
        }
    }
    if !cv.errors.is_empty() {
        return Err(Error::Invalid(cv.errors));
    }
    if campaign.plant == PlantKind::P2d && p2d.is_none() {
        return Err(Error::MissingP2dParameters(format!(
            "{file} selects the P2D plant but has no [p2d] section with solid conductivities, meshes and radial shells"
        )));
    }
    Ok(LoadedConfig {
        cell,
        truth,
        initial,
        x0,
        campaign,
        p2d,
        p2d_placeholder: raw.p2d.as_ref().is_some_and(|p| p.placeholder),
    })
}

pub fn load_config(path: &Path) -> Result<LoadedConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        Error::Config(format!("cannot read {}: {e}", path.display()))
    })?;
    parse_config(&text, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::presets::{companion_cell, identification_cell, initial_guess, true_parameters};

    const PRESETS: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../../presets");

    fn preset(name: &str) -> String {
        std::fs::read_to_string(format!("{PRESETS}/{name}")).unwrap()
    }

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() <= 1e-12 * b.abs().max(1e-300)
    }

    fn cells_close(a: &CellConfig, b: &CellConfig) {
        let pairs = [
            (a.faraday_constant, b.faraday_constant),
            (a.gas_constant, b.gas_constant),
            (a.temperature, b.temperature),
            (a.electrode_area, b.electrode_area),
            (a.positive.thickness, b.positive.thickness),
            (a.positive.particle_radius, b.positive.particle_radius),
            (a.positive.max_concentration, b.positive.max_concentration),
            (a.negative.thickness, b.negative.thickness),
            (a.negative.particle_radius, b.negative.particle_radius),
            (a.negative.max_concentration, b.negative.max_concentration),
            (a.separator.thickness, b.separator.thickness),
            (a.one_c_current, b.one_c_current),
            (a.theta_pos_min, b.theta_pos_min),
            (a.theta_pos_max, b.theta_pos_max),
        ];
        for (i, (x, y)) in pairs.iter().enumerate() {
            assert!(close(*x, *y), "entry {i}: {x} vs {y}");
        }
        assert_eq!(a.ocp_positive, b.ocp_positive);
        assert_eq!(a.ocp_negative, b.ocp_negative);
        assert_eq!(a.kappa_coeffs, b.kappa_coeffs);
        assert_eq!(a.positive.porosity, b.positive.porosity);
        assert_eq!(a.negative.filler_fraction, b.negative.filler_fraction);
    }

    fn params_close(a: &ParameterVector, b: &ParameterVector) {
        for (x, y) in a.to_array().iter().zip(b.to_array()) {
            assert!(close(*x, y), "{x} vs {y}");
        }
    }

    #[test]
    fn companion_preset_loads_published_values() {
        let cfg = parse_config(&preset("companion.toml"), "companion.toml").unwrap();
        cells_close(&cfg.cell, &companion_cell());
        params_close(&cfg.truth, &true_parameters());
        params_close(&cfg.initial, &initial_guess());
        assert!(cfg.p2d.is_none());
    }

    #[test]
    fn identification_preset_matches_builtin() {
        let cfg = parse_config(&preset("identification.toml"), "identification.toml").unwrap();
        cells_close(&cfg.cell, &identification_cell());
        assert_eq!(cfg.campaign, CampaignConfig::default());
        assert_eq!(cfg.x0, full_charge_state(&identification_cell()));
    }

    #[test]
    fn builtin_round_trips() {
        let b = LoadedConfig::builtin();
        assert_eq!(parse_config(&b.to_toml(), "builtin.toml").unwrap(), b);
    }

    #[test]
    fn p2d_example_is_flagged() {
        let cfg = parse_config(&preset("p2d_example.toml"), "p2d_example.toml").unwrap();
        assert!(cfg.p2d_placeholder);
        let p2d = cfg.p2d.unwrap();
        assert_eq!(p2d.params, cfg.truth);
        assert_eq!(cfg.campaign.plant, PlantKind::P2d);
    }

    #[test]
    fn round_trip_is_value_identical() {
        for name in ["companion.toml", "identification.toml", "p2d_example.toml"] {
            let a = parse_config(&preset(name), name).unwrap();
            let text = a.to_toml();
            let b = parse_config(&text, "roundtrip.toml").unwrap();
            assert_eq!(a, b, "{name}");
            assert_eq!(text, b.to_toml());
        }
    }

    #[test]
    fn missing_one_c_current_reports_location() {
        let text = preset("identification.toml");
        let cut: String = text
            .lines()
            .filter(|l| !l.trim_start().starts_with("one_c_current"))
            .map(|l| format!("{l}\n"))
            .collect();
        match parse_config(&cut, "cut.toml") {
            Err(Error::Parse { file, line, message, .. }) => {
                assert_eq!(file, "cut.toml");
                assert!(line >= 1);
                assert!(message.contains("one_c_current"), "{message}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn all_invariant_failures_are_listed() {
        let text = preset("identification.toml")
            .replacen("porosity = 0.385", "porosity = 1.5", 1)
            .replacen("n_experiments = 10", "n_experiments = 0", 1);
        match parse_config(&text, "bad.toml") {
            Err(Error::Invalid(errors)) => {
                let fields: Vec<&str> = errors.iter().map(|e| e.field.as_str()).collect();
                assert!(fields.contains(&"cell.positive.porosity"), "{fields:?}");
                assert!(fields.contains(&"campaign.n_experiments"), "{fields:?}");
                let porosity = errors.iter().find(|e| e.field == "cell.positive.porosity").unwrap();
                assert!(porosity.message.starts_with("bad.toml:"), "{}", porosity.message);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn wrong_unit_dimension() {
        let text = preset("identification.toml").replacen(
            "thickness = { value = 80, unit = \"um\" }",
            "thickness = { value = 80, unit = \"s\" }",
            1,
        );
        match parse_config(&text, "units.toml") {
            Err(Error::Invalid(errors)) => {
                assert_eq!(errors.len(), 1, "{errors:?}");
                assert_eq!(errors[0].field, "cell.positive.thickness");
                assert!(errors[0].message.contains("expected m"), "{}", errors[0].message);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn syntax_error_location() {
        let err = parse_config("[cell]\nfaraday_constant = = 3\n", "syntax.toml").unwrap_err();
        match err {
            Error::Parse { line, column, .. } => {
                assert_eq!(line, 2);
                assert!(column > 1);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn p2d_plant_without_section() {
        let text = preset("identification.toml").replacen("plant = \"spme\"", "plant = \"p2d\"", 1);
        let err = parse_config(&text, "p2d.toml").unwrap_err();
        assert!(matches!(err, Error::MissingP2dParameters(_)));
        assert!(err.to_string().contains("Supporting-Information"));
    }

    #[test]
    fn unknown_key_is_rejected() {
        let text = preset("identification.toml").replacen("[campaign]", "[campaign]\nbogus = 1", 1);
        assert!(matches!(parse_config(&text, "x.toml"), Err(Error::Parse { .. })));
    }
}
