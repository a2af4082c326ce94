//! Fixed-step BDF (orders 1 and 2) with modified Newton iterations.
//!
//! Every call to [`integrate`] starts a fresh multistep history, so an
//! interval of given length and input always maps the initial state through
//! the same discrete operator. For affine systems this makes the sampled
//! map exactly linear and time invariant.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub trait OdeSystem {
    fn dim(&self) -> usize;
    fn rhs(&self, x: &[f64], u: f64, out: &mut [f64]);
    fn jacobian(&self, x: &[f64], u: f64) -> DMatrix<f64>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IntegratorConfig {
    /// Upper bound on the internal step, s.
    pub max_step: f64,
    /// 1 or 2.
    pub order: u8,
    pub rtol: f64,
    pub atol: f64,
    pub max_newton: usize,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        IntegratorConfig {
            max_step: 0.25,
            order: 2,
            rtol: 1e-12,
            atol: 1e-10,
            max_newton: 8,
        }
    }
}

impl IntegratorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.max_step > 0.0 && self.max_step <= 1.0) {
            return Err(Error::Config(format!(
                "integrator.max_step must lie in (0, 1] s, got {}",
                self.max_step
            )));
        }
        if !(self.order == 1 || self.order == 2) {
            return Err(Error::Config(format!(
                "integrator.order must be 1 or 2, got {}",
                self.order
            )));
        }
        if self.max_newton == 0 {
            return Err(Error::Config("integrator.max_newton must be positive".into()));
        }
        Ok(())
    }

    /// Number of equal internal steps covering `duration`.
    pub fn substeps(&self, duration: f64) -> usize {
        ((duration / self.max_step) - 1e-9).ceil().max(1.0) as usize
    }
}

/// Integrates `sys` over `duration` at constant input `u`.
pub fn integrate<S: OdeSystem + ?Sized>(
    sys: &S,
    x0: &[f64],
    u: f64,
    duration: f64,
    cfg: &IntegratorConfig,
) -> Result<Vec<f64>> {
    let n = sys.dim();
    if duration == 0.0 {
        return Ok(x0.to_vec());
    }
    let steps = cfg.substeps(duration);
    let h = duration / steps as f64;
    let jac = sys.jacobian(x0, u);
    let identity = DMatrix::<f64>::identity(n, n);
    let lu1 = (&identity - &jac * h).lu();
    let lu2 = (&identity - &jac * (2.0 / 3.0 * h)).lu();

    let mut prev = DVector::from_column_slice(x0);
    let mut cur = prev.clone();
    let mut f = vec![0.0; n];
    for step in 0..steps {
        let bdf2 = cfg.order == 2 && step > 0;
        let (gamma, lu) = if bdf2 { (2.0 / 3.0 * h, &lu2) } else { (h, &lu1) };
        let base = if bdf2 {
            &cur * (4.0 / 3.0) - &prev * (1.0 / 3.0)
        } else {
            cur.clone()
        };
        let mut x = cur.clone();
        let mut converged = false;
        for _ in 0..cfg.max_newton {
            sys.rhs(x.as_slice(), u, &mut f);
            let residual = DVector::from_iterator(
                n,
                (0..n).map(|i| x[i] - base[i] - gamma * f[i]),
            );
            let dx = lu.solve(&(-residual)).ok_or_else(|| Error::Numerical {
                step,
                detail: "singular iteration matrix".into(),
            })?;
            x += &dx;
            if dx
                .iter()
                .zip(x.iter())
                .all(|(d, v)| d.abs() <= cfg.rtol * v.abs() + cfg.atol)
            {
                converged = true;
                break;
            }
        }
        if !converged || x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical {
                step,
                detail: format!("Newton did not converge in {} iterations", cfg.max_newton),
            });
        }
        prev = std::mem::replace(&mut cur, x);
    }
    Ok(cur.as_slice().to_vec())
}
