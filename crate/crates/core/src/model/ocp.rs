//! Open-circuit potential curves and electrolyte conductivity.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Distance to the tanh-form pole below which evaluation is refused.
pub const POLE_TOLERANCE: f64 = 1e-9;

/// Positive-electrode open-circuit potential U_p(θ).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "form", content = "coeffs", rename_all = "kebab-case")]
pub enum PositiveOcp {
    /// Ratio of two even polynomials in θ up to θ^10, coefficients f1..f12.
    Rational([f64; 12]),
    /// f1 + f2 tanh(f3 θ + f4) + f5/(f6 − θ)^f7 + f5 f8 + f9 exp(f10 θ^f11)
    /// + f12 exp(f13 (θ + f14)).
    Tanh([f64; 14]),
}

/// Negative-electrode open-circuit potential U_n(θ).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "form", content = "coeffs", rename_all = "kebab-case")]
pub enum NegativeOcp {
    /// g1 + g2 θ + g3 θ^0.5 + g4/θ + g5/θ^1.5 + g6 e^(g7 + g8 θ) + g9 e^(g10 θ + g11).
    PowerExp([f64; 11]),
    /// g1 + g2 e^(g3 θ) + g4 e^(g5 θ).
    Exponential([f64; 5]),
}

fn check_unit_interval(what: &'static str, theta: f64) -> Result<()> {
    if theta > 0.0 && theta < 1.0 {
        Ok(())
    } else {
        Err(Error::Domain { what, value: theta })
    }
}

pub fn ocp_positive(theta: f64, ocp: &PositiveOcp) -> Result<f64> {
    check_unit_interval("positive OCP stoichiometry", theta)?;
    match ocp {
        PositiveOcp::Rational(f) => {
            let t2 = theta * theta;
            // Horner in θ².
            let num = horner(t2, &[f[0], f[1], f[2], f[3], f[4], f[5]]);
            let den = horner(t2, &[f[6], f[7], f[8], f[9], f[10], f[11]]);
            if den == 0.0 {
                return Err(Error::Singularity {
                    what: "positive OCP denominator",
                    value: theta,
                });
            }
            Ok(num / den)
        }
        PositiveOcp::Tanh(f) => {
            let gap = f[5] - theta;
            if gap.abs() < POLE_TOLERANCE {
                return Err(Error::Singularity {
                    what: "positive OCP pole",
                    value: theta,
                });
            }
            Ok(f[0]
                + f[1] * (f[2] * theta + f[3]).tanh()
                + f[4] / gap.powf(f[6])
                + f[4] * f[7]
                + f[8] * (f[9] * theta.powf(f[10])).exp()
                + f[11] * (f[12] * (theta + f[13])).exp())
        }
    }
}

pub fn ocp_negative(theta: f64, ocp: &NegativeOcp) -> Result<f64> {
    check_unit_interval("negative OCP stoichiometry", theta)?;
    match ocp {
        NegativeOcp::PowerExp(g) => {
            let sqrt = theta.sqrt();
            Ok(g[0]
                + g[1] * theta
                + g[2] * sqrt
                + g[3] / theta
                + g[4] / (theta * sqrt)
                + g[5] * (g[6] + g[7] * theta).exp()
                + g[8] * (g[9] * theta + g[10]).exp())
        }
        NegativeOcp::Exponential(g) => {
            Ok(g[0] + g[1] * (g[2] * theta).exp() + g[3] * (g[4] * theta).exp())
        }
    }
}

/// Ascending-power polynomial evaluated by Horner's rule.
fn horner(x: f64, coeffs: &[f64]) -> f64 {
    coeffs.iter().rev().fold(0.0, |acc, c| acc * x + c)
}

/// Electrolyte conductivity κ(c_e) = h1 + h2 s + h3 s² + h4 s³ + h5 s⁴, s = 10⁻³ c_e.
pub fn kappa_electrolyte(ce: f64, h: &[f64; 5]) -> Result<f64> {
    if !(ce > 0.0) {
        return Err(Error::Domain {
            what: "electrolyte concentration",
            value: ce,
        });
    }
    let kappa = horner(1e-3 * ce, h);
    if !(kappa > 0.0) {
        return Err(Error::ModelValidity(format!(
            "electrolyte conductivity {kappa} S/m at c_e = {ce} mol/m^3 is not positive"
        )));
    }
    Ok(kappa)
}
