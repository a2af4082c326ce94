use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Index of the first electrolyte entry in the flat state layout.
pub const ELECTROLYTE_OFFSET: usize = 4;

/// SPMe differential state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateVector {
    /// Volume-averaged cathode concentration, mol/m^3.
    pub cavg_p: f64,
    /// Volume-averaged anode concentration, mol/m^3.
    pub cavg_n: f64,
    /// Volume-averaged concentration flux, mol/m^4.
    pub qavg_p: f64,
    pub qavg_n: f64,
    /// Electrolyte concentration per finite volume, cathode to anode, mol/m^3.
    pub ce: Vec<f64>,
}

impl StateVector {
    /// A rest state: zero fluxes and a uniform electrolyte.
    pub fn rest(cavg_p: f64, cavg_n: f64, ce: f64, volumes: usize) -> Self {
        StateVector {
            cavg_p,
            cavg_n,
            qavg_p: 0.0,
            qavg_n: 0.0,
            ce: vec![ce; volumes],
        }
    }

    pub fn len(&self) -> usize {
        ELECTROLYTE_OFFSET + self.ce.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.len());
        v.extend_from_slice(&[self.cavg_p, self.cavg_n, self.qavg_p, self.qavg_n]);
        v.extend_from_slice(&self.ce);
        v
    }

    pub fn from_slice(v: &[f64]) -> Result<Self> {
        if v.len() < ELECTROLYTE_OFFSET + 6 || !(v.len() - ELECTROLYTE_OFFSET).is_multiple_of(3) {
            return Err(Error::Config(format!(
                "state vector of length {} does not match 4 + 3 n_el",
                v.len()
            )));
        }
        Ok(StateVector {
            cavg_p: v[0],
            cavg_n: v[1],
            qavg_p: v[2],
            qavg_n: v[3],
            ce: v[ELECTROLYTE_OFFSET..].to_vec(),
        })
    }

    pub fn volumes_per_layer(&self) -> usize {
        self.ce.len() / 3
    }
}
