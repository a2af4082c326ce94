//! Finite-difference output sensitivities, Fisher information and
//! identifiability diagnostics.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Anything that maps a scaled parameter vector to a sampled output sequence.
pub trait Response: Sync {
    fn response(&self, scaled: &[f64]) -> Result<Vec<f64>>;
}

impl<F> Response for F
where
    F: Fn(&[f64]) -> Result<Vec<f64>> + Sync,
{
    fn response(&self, scaled: &[f64]) -> Result<Vec<f64>> {
        self(scaled)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StepMode {
    /// φ_j + h on the scaled parameter.
    Absolute,
    /// φ_j (1 + h).
    Relative,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    Forward,
    Central,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SensitivityConfig {
    pub h: f64,
    pub mode: StepMode,
    pub scheme: Scheme,
}

impl Default for SensitivityConfig {
    fn default() -> Self {
        SensitivityConfig {
            h: 1e-3,
            mode: StepMode::Absolute,
            scheme: Scheme::Forward,
        }
    }
}

impl SensitivityConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.h > 0.0 && self.h.is_finite()) {
            return Err(Error::Config(format!(
                "sensitivity.h must be positive, got {}",
                self.h
            )));
        }
        Ok(())
    }

    /// Absolute perturbation applied to scaled parameter `value`.
    pub fn step_for(&self, value: f64) -> f64 {
        match self.mode {
            StepMode::Absolute => self.h,
            StepMode::Relative => self.h * value.abs(),
        }
    }
}

/// S_ij = ∂y_i/∂φ_j on scaled parameters; columns follow the parameter order.
pub fn sensitivity_matrix<R: Response + ?Sized>(
    model: &R,
    scaled: &[f64],
    cfg: &SensitivityConfig,
) -> Result<DMatrix<f64>> {
    cfg.validate()?;
    let base = match cfg.scheme {
        Scheme::Forward => Some(model.response(scaled)?),
        Scheme::Central => None,
    };
    let columns: Vec<Result<Vec<f64>>> = (0..scaled.len())
        .into_par_iter()
        .map(|j| {
            let step = cfg.step_for(scaled[j]);
            if step == 0.0 {
                return Err(Error::Config(format!(
                    "zero perturbation for parameter {j} (value {})",
                    scaled[j]
                )));
            }
            let shifted = |delta: f64| -> Result<Vec<f64>> {
                let mut p = scaled.to_vec();
                p[j] += delta;
                model.response(&p)
            };
            let wrap = |e| Error::Perturbation {
                index: j,
                source: Box::new(e),
            };
            let col = match &base {
                Some(y0) => {
                    let y = shifted(step).map_err(wrap)?;
                    y.iter().zip(y0).map(|(a, b)| (a - b) / step).collect()
                }
                None => {
                    let up = shifted(step).map_err(wrap)?;
                    let down = shifted(-step).map_err(wrap)?;
                    up.iter()
                        .zip(&down)
                        .map(|(a, b)| (a - b) / (2.0 * step))
                        .collect()
                }
            };
            Ok(col)
        })
        .collect();

    let mut cols = Vec::with_capacity(columns.len());
    for c in columns {
        cols.push(c?);
    }
    let rows = cols.first().map_or(0, |c| c.len());
    if cols.iter().any(|c| c.len() != rows) {
        return Err(Error::ModelValidity(
            "perturbed simulations returned different sample counts".into(),
        ));
    }
    let s = DMatrix::from_fn(rows, cols.len(), |i, j| cols[j][i]);
    if s.iter().any(|v| !v.is_finite()) {
        return Err(Error::ModelValidity("non-finite sensitivity entry".into()));
    }
    Ok(s)
}

/// F = Sᵀ S / σ², symmetrized.
pub fn fisher_matrix(s: &DMatrix<f64>, sigma_y2: f64) -> Result<DMatrix<f64>> {
    if !(sigma_y2 > 0.0) {
        return Err(Error::Config(format!(
            "output noise variance must be positive, got {sigma_y2}"
        )));
    }
    let f = s.transpose() * s / sigma_y2;
    Ok((&f + f.transpose()) * 0.5)
}

/// Relative eigenvalue floor used by [`covariance_approx`].
pub const EIGEN_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceApprox {
    pub matrix: DMatrix<f64>,
    pub regularized: bool,
    /// Eigenvalue floor applied; zero when unregularized.
    pub floor: f64,
}

impl CovarianceApprox {
    pub fn trace(&self) -> f64 {
        self.matrix.trace()
    }

    pub fn variances(&self) -> Vec<f64> {
        self.matrix.diagonal().iter().copied().collect()
    }
}

/// Inverse of F, or, when its spectrum reaches below 10⁻¹² λ_max, the inverse
/// with every eigenvalue raised to that floor.
pub fn covariance_approx(f: &DMatrix<f64>) -> Result<CovarianceApprox> {
    if f.iter().all(|v| *v == 0.0) {
        return Err(Error::Noninformative);
    }
    if f.iter().any(|v| !v.is_finite()) {
        return Err(Error::ModelValidity("non-finite Fisher matrix".into()));
    }
    let sym = (f + f.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let lmax = eig.eigenvalues.max();
    if !(lmax > 0.0) {
        return Err(Error::Noninformative);
    }
    let floor = EIGEN_FLOOR * lmax;
    let regularized = eig.eigenvalues.iter().any(|l| *l < floor);
    let inv = DVector::from_iterator(
        eig.eigenvalues.len(),
        eig.eigenvalues.iter().map(|l| 1.0 / l.max(floor)),
    );
    let q = &eig.eigenvectors;
    let matrix = q * DMatrix::from_diagonal(&inv) * q.transpose();
    let matrix = (&matrix + matrix.transpose()) * 0.5;
    Ok(CovarianceApprox {
        matrix,
        regularized,
        floor: if regularized { floor } else { 0.0 },
    })
}

fn extreme_singular_values(s: &DMatrix<f64>) -> Result<(f64, f64)> {
    if s.nrows() == 0 || s.ncols() == 0 {
        return Err(Error::Noninformative);
    }
    let sv = if s.nrows() >= s.ncols() {
        s.clone().svd(false, false).singular_values
    } else {
        // Fewer samples than parameters: the missing singular values are zero.
        return Ok((s.clone().svd(false, false).singular_values.max(), 0.0));
    };
    let max = sv.max();
    if !(max > 0.0) {
        return Err(Error::Noninformative);
    }
    Ok((max, sv.min()))
}

/// κ = ζ_max / ζ_min; infinite when ζ_min = 0.
pub fn condition_number(s: &DMatrix<f64>) -> Result<f64> {
    let (max, min) = extreme_singular_values(s)?;
    Ok(if min == 0.0 { f64::INFINITY } else { max / min })
}

/// γ = 1 / ζ_min; infinite when ζ_min = 0.
pub fn collinearity_index(s: &DMatrix<f64>) -> Result<f64> {
    let (_, min) = extreme_singular_values(s)?;
    Ok(if min == 0.0 { f64::INFINITY } else { 1.0 / min })
}

/// Row-wise concatenation of sensitivity blocks.
pub fn stack_rows(blocks: &[DMatrix<f64>]) -> DMatrix<f64> {
    let cols = blocks.first().map_or(0, |b| b.ncols());
    let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let mut r = 0;
    for b in blocks {
        out.view_mut((r, 0), (b.nrows(), cols)).copy_from(b);
        r += b.nrows();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn linear_model_columns_are_exact() {
        let u: Vec<f64> = (0..20).map(|k| (k as f64 * 0.7).sin()).collect();
        let model = |phi: &[f64]| -> Result<Vec<f64>> {
            Ok(u.iter().map(|ut| 3.0 * phi[0] * ut).collect())
        };
        for h in [1e-1, 1e-3, 1e-6] {
            let cfg = SensitivityConfig {
                h,
                ..Default::default()
            };
            let s = sensitivity_matrix(&model, &[1.0], &cfg).unwrap();
            for (i, ut) in u.iter().enumerate() {
                assert_relative_eq!(s[(i, 0)], 3.0 * ut, epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn independent_parameter_gives_zero_column() {
        let model = |phi: &[f64]| -> Result<Vec<f64>> { Ok(vec![phi[0] * 2.0; 5]) };
        let s = sensitivity_matrix(&model, &[1.0, 1.0], &SensitivityConfig::default()).unwrap();
        assert!(s.column(1).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn relative_and_central_modes() {
        let model = |phi: &[f64]| -> Result<Vec<f64>> { Ok(vec![phi[0] * phi[0]]) };
        let central = SensitivityConfig {
            scheme: Scheme::Central,
            mode: StepMode::Relative,
            h: 1e-2,
        };
        let s = sensitivity_matrix(&model, &[3.0], &central).unwrap();
        assert_relative_eq!(s[(0, 0)], 6.0, epsilon = 1e-10);
        let forward = SensitivityConfig {
            h: 1e-2,
            ..Default::default()
        };
        let s = sensitivity_matrix(&model, &[3.0], &forward).unwrap();
        assert_relative_eq!(s[(0, 0)], 6.01, epsilon = 1e-10);
    }

    #[test]
    fn failures_carry_parameter_index() {
        let model = |phi: &[f64]| -> Result<Vec<f64>> {
            if phi[2] > 1.0 {
                Err(Error::Domain {
                    what: "test",
                    value: phi[2],
                })
            } else {
                Ok(vec![0.0])
            }
        };
        let err = sensitivity_matrix(&model, &[1.0; 3], &SensitivityConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Perturbation { index: 2, .. }), "{err}");
    }

    #[test]
    fn fisher_closed_forms() {
        let f = fisher_matrix(&DMatrix::identity(3, 3), 1.0).unwrap();
        assert_eq!(f, DMatrix::identity(3, 3));
        let ones = DMatrix::from_element(200, 1, 1.0);
        let f = fisher_matrix(&ones, 0.09e-6).unwrap();
        assert_relative_eq!(f[(0, 0)], 200.0 / 0.09e-6, max_relative = 1e-14);
        assert!(fisher_matrix(&ones, 0.0).is_err());
    }

    #[test]
    fn covariance_closed_forms() {
        let c = covariance_approx(&DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 1.0]))).unwrap();
        assert!(!c.regularized);
        assert_relative_eq!(c.matrix[(0, 0)], 0.25, epsilon = 1e-15);
        assert_relative_eq!(c.matrix[(1, 1)], 1.0, epsilon = 1e-15);
        assert_relative_eq!(c.matrix[(0, 1)], 0.0, epsilon = 1e-15);

        let n_over_s2 = 200.0 / 0.09e-6;
        let c = covariance_approx(&(DMatrix::identity(3, 3) * n_over_s2)).unwrap();
        for i in 0..3 {
            assert_relative_eq!(c.matrix[(i, i)], 0.09e-6 / 200.0, max_relative = 1e-12);
        }
    }

    #[test]
    fn rank_deficient_fisher_is_regularized() {
        let s = DMatrix::from_fn(10, 2, |i, _| i as f64 + 1.0);
        let f = fisher_matrix(&s, 1.0).unwrap();
        let c = covariance_approx(&f).unwrap();
        assert!(c.regularized);
        assert!(c.floor > 0.0);
        assert!(c.matrix.diagonal().iter().all(|d| *d >= 0.0));
        assert!(matches!(
            covariance_approx(&DMatrix::zeros(2, 2)),
            Err(Error::Noninformative)
        ));
    }

    #[test]
    fn conditioning_indices() {
        let id = DMatrix::<f64>::identity(4, 4);
        assert_relative_eq!(condition_number(&id).unwrap(), 1.0, epsilon = 1e-14);
        assert_relative_eq!(collinearity_index(&id).unwrap(), 1.0, epsilon = 1e-14);
        let d = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 1.0]));
        assert_relative_eq!(condition_number(&d).unwrap(), 2.0, epsilon = 1e-14);
        assert_relative_eq!(collinearity_index(&d).unwrap(), 1.0, epsilon = 1e-14);
        let dup = DMatrix::from_fn(5, 2, |i, _| i as f64);
        assert_eq!(collinearity_index(&dup).unwrap(), f64::INFINITY);
        assert_eq!(condition_number(&dup).unwrap(), f64::INFINITY);
    }

    fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = DMatrix<f64>> {
        proptest::collection::vec(-5.0f64..5.0, rows * cols)
            .prop_map(move |v| DMatrix::from_vec(rows, cols, v))
    }

    proptest! {
        #[test]
        fn fisher_is_additive_over_blocks(a in matrix(6, 3), b in matrix(4, 3), s2 in 1e-8f64..1.0) {
            let whole = fisher_matrix(&stack_rows(&[a.clone(), b.clone()]), s2).unwrap();
            let parts = fisher_matrix(&a, s2).unwrap() + fisher_matrix(&b, s2).unwrap();
            prop_assert!((&whole - &parts).norm() <= 1e-10 * whole.norm().max(1.0));
        }

        #[test]
        fn fisher_is_symmetric_psd(s in matrix(8, 4)) {
            let f = fisher_matrix(&s, 0.09e-6).unwrap();
            prop_assert!((&f - f.transpose()).norm() <= 1e-12 * f.norm().max(1e-300));
            let eig = SymmetricEigen::new(f.clone());
            prop_assert!(eig.eigenvalues.min() >= -1e-10 * f.norm());
        }

        #[test]
        fn covariance_inverts_on_range(s in matrix(12, 4)) {
            let f = fisher_matrix(&s, 1.0).unwrap();
            prop_assume!(f.norm() > 1e-6);
            let c = covariance_approx(&f).unwrap();
            if !c.regularized {
                let r = &c.matrix * &f - DMatrix::identity(4, 4);
                let cond = SymmetricEigen::new(f.clone()).eigenvalues;
                let k = cond.max() / cond.min();
                prop_assert!(r.norm() <= 1e-8f64.max(1e-14 * k), "{}", r.norm());
            }
            prop_assert!(c.matrix.diagonal().iter().all(|d| *d >= 0.0));
        }

        #[test]
        fn indices_are_well_formed(s in matrix(10, 3)) {
            prop_assume!(s.norm() > 1e-9);
            prop_assert!(condition_number(&s).unwrap() >= 1.0 - 1e-12);
            prop_assert!(collinearity_index(&s).unwrap() > 0.0);
        }
    }
}
