use nalgebra::DMatrix;

use spme_doe::campaign::cc_profile;
use spme_doe::config::presets::{full_charge_state, identification_cell, initial_guess, true_parameters};
use spme_doe::estimator::{scale, ExperimentRecord, SpmeResponse};
use spme_doe::model::IntegratorConfig;
use spme_doe::sensitivity::{sensitivity_matrix, Response, Scheme, SensitivityConfig};

fn pulse_record(current_rate: f64) -> ExperimentRecord {
    let cell = identification_cell();
    let inputs = cc_profile(200.0, 1.0, cell.one_c_current, 5.0)
        .unwrap()
        .into_iter()
        .map(|u| u * current_rate)
        .collect::<Vec<_>>();
    ExperimentRecord {
        measured: vec![0.0; inputs.len()],
        inputs,
        x0: full_charge_state(&cell),
        t_s: 5.0,
        noise_seed: 0,
    }
}

fn column_errors(f: &DMatrix<f64>, c: &DMatrix<f64>) -> Vec<f64> {
    (0..c.ncols())
        .map(|j| (f.column(j) - c.column(j)).norm() / c.column(j).norm())
        .collect()
}

#[test]
fn one_c_pulse_at_phi0_against_central_oracle() {
    let cell = identification_cell();
    let rec = [pulse_record(1.0)];
    let resp = SpmeResponse::for_records(&cell, true_parameters(), IntegratorConfig::default(), &rec);
    let phi0 = scale(&initial_guess(), &true_parameters()).unwrap().values;
    let oracle = |h: f64| {
        sensitivity_matrix(&resp, &phi0, &SensitivityConfig { h, scheme: Scheme::Central, ..Default::default() })
            .unwrap()
    };
    let forward = |h: f64| sensitivity_matrix(&resp, &phi0, &SensitivityConfig { h, ..Default::default() }).unwrap();

    let h = 1e-4;
    let errs = column_errors(&forward(h), &oracle(h / 10.0));
    assert!(errs.iter().all(|e| *e <= 1e-3), "{errs:?}");

    // At h = 1e-3 the forward error is the truncation term (h/2) y'' and no
    // more. For D_e it exceeds 1e-3 of the column norm at this point.
    let h = 1e-3;
    let c = oracle(h / 10.0);
    let f = forward(h);
    let k = 1e-3;
    for j in 0..phi0.len() {
        let at = |d: f64| {
            let mut p = phi0;
            p[j] += d;
            resp.response(&p).unwrap()
        };
        let (up, mid, down) = (at(k), at(0.0), at(-k));
        let err = f.column(j) - c.column(j);
        let residual = err
            .iter()
            .enumerate()
            .map(|(i, e)| e - 0.5 * h * (up[i] - 2.0 * mid[i] + down[i]) / (k * k))
            .map(|r| r * r)
            .sum::<f64>()
            .sqrt();
        assert!(residual <= 0.05 * err.norm(), "column {j}: {residual:e} vs {:e}", err.norm());
    }
}

#[test]
fn rate_constant_columns_vanish_at_rest() {
    let cell = identification_cell();
    let rec = [pulse_record(0.0)];
    let resp = SpmeResponse::for_records(&cell, true_parameters(), IntegratorConfig::default(), &rec);
    let s = sensitivity_matrix(&resp, &[1.0; 7], &SensitivityConfig::default()).unwrap();
    for j in [5, 6] {
        assert!(s.column(j).amax() <= 1e-9, "column {j}: {}", s.column(j).amax());
    }
}
