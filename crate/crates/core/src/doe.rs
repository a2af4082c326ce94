//! A-optimal input design: minimize the trace of the Cramér–Rao covariance
//! of the scaled parameters over piecewise-constant currents, subject to
//! |u| ≤ I_max and a voltage window, either over the whole horizon or in
//! M consecutive blocks that each extend the accumulated Fisher matrix.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::CellConfig;
use crate::error::{Error, Result};
use crate::estimator::{unscale_values, ScaledParams};
use crate::model::{IntegratorConfig, Propagator, Spme};
use crate::optim::{minimize, LbfgsOptions};
use crate::sensitivity::{covariance_approx, Scheme, SensitivityConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DesignConstraints {
    /// A
    pub i_max: f64,
    /// V
    pub v_min: f64,
    pub v_max: f64,
    /// s
    pub horizon: f64,
    pub t_s: f64,
    pub blocks: usize,
}

impl DesignConstraints {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(self.i_max > 0.0) {
            problems.push(format!("i_max must be positive, got {}", self.i_max));
        }
        if !(self.v_min < self.v_max) {
            problems.push(format!("v_min {} must be below v_max {}", self.v_min, self.v_max));
        }
        if !(self.horizon > 0.0) {
            problems.push(format!("horizon must be positive, got {}", self.horizon));
        }
        if !(self.t_s > 0.0) {
            problems.push(format!("t_s must be positive, got {}", self.t_s));
        } else if self.horizon > 0.0 {
            let n = self.horizon / self.t_s;
            if (n - n.round()).abs() > 1e-9 {
                problems.push(format!(
                    "horizon {} is not a multiple of t_s {}",
                    self.horizon, self.t_s
                ));
            } else if self.blocks == 0 || !(n.round() as usize).is_multiple_of(self.blocks) {
                problems.push(format!(
                    "{} samples cannot be split into {} equal blocks",
                    n.round(),
                    self.blocks
                ));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    pub fn samples(&self) -> usize {
        (self.horizon / self.t_s).round() as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DesignConfig {
    /// L-BFGS iterations per penalty round.
    pub max_iterations: usize,
    /// Forward-difference step on the inputs, as a fraction of i_max.
    pub gradient_step: f64,
    pub penalty_weight: f64,
    pub penalty_growth: f64,
    pub penalty_rounds: usize,
    /// Distance inside the voltage window at which the penalty starts, V.
    pub penalty_margin: f64,
    /// Admissible residual voltage violation, V.
    pub voltage_tolerance: f64,
    /// Candidate starting sequences per block; the best is kept.
    pub starts: usize,
    pub seed: u64,
}

impl Default for DesignConfig {
    fn default() -> Self {
        DesignConfig {
            max_iterations: 150,
            gradient_step: 1e-3,
            penalty_weight: 1e3,
            penalty_growth: 10.0,
            penalty_rounds: 5,
            penalty_margin: 1e-3,
            voltage_tolerance: 1e-6,
            starts: 1,
            seed: 0,
        }
    }
}

/// A discrete-time model evaluated at the nominal parameters and at each
/// perturbation needed for finite-difference sensitivities.
pub trait DesignModel: Sync {
    fn n_params(&self) -> usize;
    /// Number of parameter sets; set 0 is the nominal one.
    fn n_sets(&self) -> usize;
    /// (plus set, minus set, divisor) of sensitivity column j.
    fn column(&self, j: usize) -> (usize, usize, f64);
    fn advance(&self, set: usize, x: &DVector<f64>, u: f64) -> DVector<f64>;
    /// Response of the state to a unit input on one interval, 0..count
    /// intervals later.
    fn impulse(&self, set: usize, count: usize) -> Vec<DVector<f64>>;
    fn output(&self, set: usize, x: &[f64], u: f64) -> Result<f64>;
}

/// SPMe instances at φ̂ and at each perturbed φ̂ with their interval maps.
pub struct SpmeDesignModel {
    sets: Vec<(Spme, Propagator)>,
    columns: Vec<(usize, usize, f64)>,
}

impl SpmeDesignModel {
    pub fn new(
        cell: &CellConfig,
        phi: &ScaledParams,
        sens: &SensitivityConfig,
        t_s: f64,
        integrator: &IntegratorConfig,
    ) -> Result<Self> {
        sens.validate()?;
        let p = phi.values.len();
        let mut points = vec![phi.values.to_vec()];
        let mut columns = Vec::with_capacity(p);
        for j in 0..p {
            let step = sens.step_for(phi.values[j]);
            let mut plus = phi.values.to_vec();
            plus[j] += step;
            points.push(plus);
            columns.push((j + 1, 0, step));
        }
        if sens.scheme == Scheme::Central {
            for j in 0..p {
                let step = sens.step_for(phi.values[j]);
                let mut minus = phi.values.to_vec();
                minus[j] -= step;
                points.push(minus);
                columns[j] = (j + 1, p + 1 + j, 2.0 * step);
            }
        }
        let sets = points
            .par_iter()
            .map(|v| {
                let model = Spme::new(cell, &unscale_values(v, &phi.reference))?;
                let prop = Propagator::new(&model, t_s, integrator)?;
                Ok((model, prop))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(SpmeDesignModel { sets, columns })
    }

    pub fn nominal(&self) -> &Spme {
        &self.sets[0].0
    }
}

impl DesignModel for SpmeDesignModel {
    fn n_params(&self) -> usize {
        self.columns.len()
    }

    fn n_sets(&self) -> usize {
        self.sets.len()
    }

    fn column(&self, j: usize) -> (usize, usize, f64) {
        self.columns[j]
    }

    fn advance(&self, set: usize, x: &DVector<f64>, u: f64) -> DVector<f64> {
        self.sets[set].1.step(x, u)
    }

    fn impulse(&self, set: usize, count: usize) -> Vec<DVector<f64>> {
        self.sets[set].1.impulse_response(count)
    }

    fn output(&self, set: usize, x: &[f64], u: f64) -> Result<f64> {
        self.sets[set].0.output_voltage(x, u)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockDiagnostics {
    pub block: usize,
    pub iterations: usize,
    pub evaluations: usize,
    pub penalty_rounds: usize,
    /// Scaled covariance trace after this block.
    pub trace: f64,
    /// The eigenvalue floor was active at the block optimum.
    pub regularized: bool,
    /// Largest voltage-window violation before restoration, V.
    pub violation: f64,
    /// Inputs were scaled toward zero to restore feasibility.
    pub restored: bool,
    pub converged: bool,
    /// Wall time; not serialized so that summaries stay reproducible.
    #[serde(skip)]
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DesignResult {
    pub inputs: Vec<f64>,
    pub predicted_trace: f64,
    pub solve_time: f64,
    pub blocks: Vec<BlockDiagnostics>,
    /// Sensitivity rows of the designed inputs, one per sample.
    pub sensitivity: DMatrix<f64>,
    /// Prior plus designed Fisher information.
    pub fisher: DMatrix<f64>,
    /// Nominal-model voltages along the design.
    pub voltages: Vec<f64>,
}

impl DesignResult {
    pub fn converged(&self) -> bool {
        self.blocks.iter().all(|b| b.converged)
    }
}

struct Simulation {
    /// states[set][k]: state after interval k.
    states: Vec<Vec<DVector<f64>>>,
    outputs: Vec<Vec<f64>>,
}

struct Block<'a, M: DesignModel> {
    model: &'a M,
    starts: &'a [DVector<f64>],
    impulses: &'a [Vec<DVector<f64>>],
    prior: &'a DMatrix<f64>,
    sigma_y2: f64,
    constraints: &'a DesignConstraints,
    weight: f64,
    margin: f64,
    epsilon: f64,
}

impl<M: DesignModel> Block<'_, M> {
    fn simulate(&self, u: &[f64]) -> Result<Simulation> {
        let sets = self.model.n_sets();
        let mut states = Vec::with_capacity(sets);
        let mut outputs = Vec::with_capacity(sets);
        for set in 0..sets {
            let mut x = self.starts[set].clone();
            let mut xs = Vec::with_capacity(u.len());
            let mut ys = Vec::with_capacity(u.len());
            for &uk in u {
                x = self.model.advance(set, &x, uk);
                ys.push(self.model.output(set, x.as_slice(), uk)?);
                xs.push(x.clone());
            }
            states.push(xs);
            outputs.push(ys);
        }
        Ok(Simulation { states, outputs })
    }

    fn row(&self, y: &[f64]) -> DVector<f64> {
        let p = self.model.n_params();
        DVector::from_iterator(
            p,
            (0..p).map(|j| {
                let (a, b, d) = self.model.column(j);
                (y[a] - y[b]) / d
            }),
        )
    }

    fn penalty(&self, v: f64) -> f64 {
        let hi = (v - (self.constraints.v_max - self.margin)).max(0.0);
        let lo = ((self.constraints.v_min + self.margin) - v).max(0.0);
        hi * hi + lo * lo
    }

    fn value(&self, fisher: &DMatrix<f64>, penalty: f64) -> f64 {
        match covariance_approx(fisher) {
            Ok(c) => c.trace().ln() + self.weight * penalty,
            Err(_) => f64::INFINITY,
        }
    }

    /// Outputs of every set at sample k, gathered column-wise.
    fn sample(sim: &Simulation, k: usize) -> Vec<f64> {
        sim.outputs.iter().map(|ys| ys[k]).collect()
    }

    fn objective(&self, u: &[f64]) -> f64 {
        let Ok(sim) = self.simulate(u) else {
            return f64::INFINITY;
        };
        let mut fisher = self.prior.clone();
        let mut penalty = 0.0;
        for k in 0..u.len() {
            let s = self.row(&Self::sample(&sim, k));
            fisher += &s * s.transpose() / self.sigma_y2;
            penalty += self.penalty(sim.outputs[0][k]);
        }
        self.value(&fisher, penalty)
    }

    /// Objective with a one-sided difference gradient. Perturbing u_m only
    /// moves samples m.. and shifts each set's states by ε Ψ_{k−m}.
    fn objective_and_gradient(&self, u: &[f64]) -> (f64, Vec<f64>) {
        let n = u.len();
        let Ok(sim) = self.simulate(u) else {
            return (f64::INFINITY, vec![0.0; n]);
        };
        let rows: Vec<DVector<f64>> = (0..n).map(|k| self.row(&Self::sample(&sim, k))).collect();
        let pens: Vec<f64> = (0..n).map(|k| self.penalty(sim.outputs[0][k])).collect();
        // Prefix sums: information and penalty of samples before m.
        let mut prefix = Vec::with_capacity(n + 1);
        let mut prefix_pen = Vec::with_capacity(n + 1);
        let mut acc = self.prior.clone();
        let mut acc_pen = 0.0;
        for k in 0..n {
            prefix.push(acc.clone());
            prefix_pen.push(acc_pen);
            acc += &rows[k] * rows[k].transpose() / self.sigma_y2;
            acc_pen += pens[k];
        }
        let value = self.value(&acc, acc_pen);
        if !value.is_finite() {
            return (value, vec![0.0; n]);
        }

        let sets = self.model.n_sets();
        let shifted = |m: usize, eps: f64| -> f64 {
            let mut fisher = prefix[m].clone();
            let mut pen = prefix_pen[m];
            let mut y = vec![0.0; sets];
            for k in m..n {
                let uk = if k == m { u[k] + eps } else { u[k] };
                for (set, ys) in y.iter_mut().enumerate() {
                    let x = &sim.states[set][k] + &self.impulses[set][k - m] * eps;
                    match self.model.output(set, x.as_slice(), uk) {
                        Ok(v) => *ys = v,
                        Err(_) => return f64::INFINITY,
                    }
                }
                let s = self.row(&y);
                fisher += &s * s.transpose() / self.sigma_y2;
                pen += self.penalty(y[0]);
            }
            self.value(&fisher, pen)
        };
        let eps = self.epsilon;
        let grad = (0..n)
            .into_par_iter()
            .map(|m| {
                let up = shifted(m, eps);
                if up.is_finite() {
                    return (up - value) / eps;
                }
                let down = shifted(m, -eps);
                if down.is_finite() {
                    (value - down) / eps
                } else {
                    0.0
                }
            })
            .collect();
        (value, grad)
    }

    fn max_violation(&self, u: &[f64]) -> f64 {
        let mut x = self.starts[0].clone();
        let mut worst: f64 = 0.0;
        for &uk in u {
            x = self.model.advance(0, &x, uk);
            match self.model.output(0, x.as_slice(), uk) {
                Ok(v) => {
                    worst = worst
                        .max(v - self.constraints.v_max)
                        .max(self.constraints.v_min - v);
                }
                Err(_) => return f64::INFINITY,
            }
        }
        worst
    }
}

/// Deterministic two-level starting sequence: discharge at 0.8 I_max or
/// charge at 0.4 I_max, held for 1 to 4 samples.
pub fn start_sequence(len: usize, i_max: f64, seed: u64, block: usize, start: usize) -> Vec<f64> {
    let stream = ((block as u64) << 32) | start as u64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let mut out = Vec::with_capacity(len);
    let mut level = 0.8 * i_max;
    while out.len() < len {
        let hold = rng.random_range(1..=4usize);
        for _ in 0..hold.min(len - out.len()) {
            out.push(level);
        }
        level = if level > 0.0 { -0.4 * i_max } else { 0.8 * i_max };
    }
    out
}

/// Voltage of the nominal model at rest in the start state.
fn check_start<M: DesignModel>(model: &M, x0: &DVector<f64>, c: &DesignConstraints) -> Result<()> {
    let v = model.output(0, x0.as_slice(), 0.0)?;
    if v < c.v_min || v > c.v_max {
        return Err(Error::Infeasible(format!(
            "start state rests at {v} V, outside [{}, {}] V",
            c.v_min, c.v_max
        )));
    }
    Ok(())
}

/// Algorithm of sequential block designs. `prior` is the Fisher matrix of
/// earlier information (e.g. from `prior_blocks`), or zero.
pub fn design_blocks<M: DesignModel>(
    model: &M,
    x0: &DVector<f64>,
    constraints: &DesignConstraints,
    sigma_y2: f64,
    prior: &DMatrix<f64>,
    cfg: &DesignConfig,
) -> Result<DesignResult> {
    constraints.validate()?;
    if !(sigma_y2 > 0.0) {
        return Err(Error::Config(format!(
            "design needs a positive noise variance, got {sigma_y2}"
        )));
    }
    check_start(model, x0, constraints)?;
    let clock = Instant::now();
    let p = model.n_params();
    let n = constraints.samples();
    let nb = n / constraints.blocks;
    let sets = model.n_sets();
    let impulses: Vec<Vec<DVector<f64>>> = (0..sets).map(|s| model.impulse(s, nb)).collect();
    let mut starts = vec![x0.clone(); sets];
    let mut fisher = prior.clone();
    let mut inputs = Vec::with_capacity(n);
    let mut rows: Vec<DVector<f64>> = Vec::with_capacity(n);
    let mut voltages = Vec::with_capacity(n);
    let mut diagnostics = Vec::with_capacity(constraints.blocks);
    let lower = vec![-constraints.i_max; nb];
    let upper = vec![constraints.i_max; nb];

    for b in 0..constraints.blocks {
        let block_clock = Instant::now();
        let mut problem = Block {
            model,
            starts: &starts,
            impulses: &impulses,
            prior: &fisher,
            sigma_y2,
            constraints,
            weight: cfg.penalty_weight,
            margin: cfg.penalty_margin,
            epsilon: cfg.gradient_step * constraints.i_max,
        };
        let opts = LbfgsOptions {
            max_iterations: cfg.max_iterations,
            gradient_tol: 1e-7,
            rel_tol: 1e-8,
            initial_step: 0.25 * constraints.i_max,
            ..Default::default()
        };

        let mut best: Option<(Vec<f64>, f64, usize, usize, usize, bool)> = None;
        for start in 0..cfg.starts.max(1) {
            problem.weight = cfg.penalty_weight;
            let mut u = start_sequence(nb, constraints.i_max, cfg.seed, b, start);
            let mut iterations = 0;
            let mut evaluations = 0;
            let mut rounds = 0;
            let mut converged = false;
            for _ in 0..cfg.penalty_rounds.max(1) {
                rounds += 1;
                let out = minimize(
                    |v: &[f64]| problem.objective(v),
                    |v: &[f64]| problem.objective_and_gradient(v),
                    &u,
                    &lower,
                    &upper,
                    &opts,
                );
                iterations += out.iterations;
                evaluations += out.evaluations;
                converged = out.converged;
                u = out.x;
                if problem.max_violation(&u) <= cfg.voltage_tolerance {
                    break;
                }
                problem.weight *= cfg.penalty_growth;
            }
            let score = candidate_score(&problem, &u);
            if best.as_ref().is_none_or(|c| score < c.1) {
                best = Some((u, score, iterations, evaluations, rounds, converged));
            }
        }
        let (mut u, _, iterations, evaluations, rounds, converged) =
            best.expect("at least one start");

        // Feasibility restoration: shrink the block toward zero current.
        let violation = problem.max_violation(&u);
        let mut restored = false;
        if violation > cfg.voltage_tolerance {
            restored = true;
            let zero = vec![0.0; nb];
            if problem.max_violation(&zero) > cfg.voltage_tolerance {
                return Err(Error::Block {
                    block: b,
                    source: Box::new(Error::Infeasible(
                        "voltage window violated even at zero current".into(),
                    )),
                });
            }
            let (mut lo, mut hi) = (0.0, 1.0);
            for _ in 0..50 {
                let mid = 0.5 * (lo + hi);
                let trial: Vec<f64> = u.iter().map(|v| v * mid).collect();
                if problem.max_violation(&trial) <= cfg.voltage_tolerance {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            u = u.iter().map(|v| v * lo).collect();
        }

        let sim = problem.simulate(&u).map_err(|e| Error::Block {
            block: b,
            source: Box::new(e),
        })?;
        let block_rows: Vec<DVector<f64>> = (0..nb)
            .map(|k| problem.row(&Block::<M>::sample(&sim, k)))
            .collect();
        for (k, s) in block_rows.into_iter().enumerate() {
            fisher += &s * s.transpose() / sigma_y2;
            rows.push(s);
            voltages.push(sim.outputs[0][k]);
        }
        let cov = covariance_approx(&fisher).map_err(|e| Error::Block {
            block: b,
            source: Box::new(e),
        })?;
        for (set, start) in starts.iter_mut().enumerate() {
            *start = sim.states[set][nb - 1].clone();
        }
        inputs.extend_from_slice(&u);
        diagnostics.push(BlockDiagnostics {
            block: b,
            iterations,
            evaluations,
            penalty_rounds: rounds,
            trace: cov.trace(),
            regularized: cov.regularized,
            violation,
            restored,
            converged,
            seconds: block_clock.elapsed().as_secs_f64(),
        });
    }

    let sensitivity = DMatrix::from_fn(rows.len(), p, |i, j| rows[i][j]);
    let predicted_trace = covariance_approx(&fisher)?.trace();
    Ok(DesignResult {
        inputs,
        predicted_trace,
        solve_time: clock.elapsed().as_secs_f64(),
        blocks: diagnostics,
        sensitivity,
        fisher,
        voltages,
    })
}

/// Unpenalized objective; violating candidates rank by violation after
/// every feasible one.
fn candidate_score<M: DesignModel>(problem: &Block<'_, M>, u: &[f64]) -> f64 {
    let violation = problem.max_violation(u);
    if violation > 0.0 {
        return 1e300 * (1.0 + violation.min(1e3));
    }
    Block {
        weight: 0.0,
        ..*problem
    }
    .objective(u)
}

/// Fisher matrix of a list of sensitivity blocks.
pub fn prior_fisher(blocks: &[DMatrix<f64>], n_params: usize, sigma_y2: f64) -> DMatrix<f64> {
    let mut f = DMatrix::zeros(n_params, n_params);
    for s in blocks {
        f += s.transpose() * s / sigma_y2;
    }
    f
}

/// Whole-horizon design: one block.
pub fn design_full<M: DesignModel>(
    model: &M,
    x0: &DVector<f64>,
    constraints: &DesignConstraints,
    sigma_y2: f64,
    cfg: &DesignConfig,
) -> Result<DesignResult> {
    let single = DesignConstraints {
        blocks: 1,
        ..*constraints
    };
    let p = model.n_params();
    design_blocks(model, x0, &single, sigma_y2, &DMatrix::zeros(p, p), cfg)
}

pub fn design_suboptimal<M: DesignModel>(
    model: &M,
    x0: &DVector<f64>,
    constraints: &DesignConstraints,
    sigma_y2: f64,
    prior_blocks: &[DMatrix<f64>],
    cfg: &DesignConfig,
) -> Result<DesignResult> {
    let p = model.n_params();
    if let Some(bad) = prior_blocks.iter().find(|s| s.ncols() != p) {
        return Err(Error::Config(format!(
            "prior sensitivity block has {} columns, expected {p}",
            bad.ncols()
        )));
    }
    let prior = prior_fisher(prior_blocks, p, sigma_y2);
    design_blocks(model, x0, constraints, sigma_y2, &prior, cfg)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StoppingRule {
    pub max_experiments: usize,
    /// Stop once every scaled variance is below this.
    pub variance_threshold: Option<f64>,
    /// Stop when the last relative trace decrease is below this.
    pub plateau_epsilon: Option<f64>,
}

impl Default for StoppingRule {
    fn default() -> Self {
        StoppingRule {
            max_experiments: 10,
            variance_threshold: None,
            plateau_epsilon: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopDecision {
    Continue,
    StopThreshold,
    StopMaxExperiments,
    StopPlateau,
}

/// Decision after the latest completed experiment, given the trace and
/// scaled variances recorded after each experiment so far.
pub fn campaign_stopping(traces: &[f64], variances: &[Vec<f64>], rule: &StoppingRule) -> StopDecision {
    if let (Some(limit), Some(last)) = (rule.variance_threshold, variances.last()) {
        if !last.is_empty() && last.iter().all(|v| *v < limit) {
            return StopDecision::StopThreshold;
        }
    }
    if traces.len() >= rule.max_experiments {
        return StopDecision::StopMaxExperiments;
    }
    if let (Some(eps), [.., before, last]) = (rule.plateau_epsilon, traces) {
        if before.is_finite() && *before > 0.0 && (before - last) / before < eps {
            return StopDecision::StopPlateau;
        }
    }
    StopDecision::Continue
}

#[cfg(test)]
mod tests {
    use super::*;

    /// y = v0 + φ0·x (+ φ1·u) with x⁺ = a·x + (1 − a)·u; sets are φ and φ + h·e_j.
    /// With a = 0 the state is the previous input, a static gain.
    struct Linear {
        v0: f64,
        a: f64,
        phi: Vec<f64>,
        h: f64,
    }

    impl Linear {
        fn params(&self, set: usize) -> Vec<f64> {
            let mut p = self.phi.clone();
            if set > 0 {
                p[set - 1] += self.h;
            }
            p
        }
    }

    impl DesignModel for Linear {
        fn n_params(&self) -> usize {
            self.phi.len()
        }
        fn n_sets(&self) -> usize {
            self.phi.len() + 1
        }
        fn column(&self, j: usize) -> (usize, usize, f64) {
            (j + 1, 0, self.h)
        }
        fn advance(&self, _set: usize, x: &DVector<f64>, u: f64) -> DVector<f64> {
            x * self.a + DVector::from_element(1, (1.0 - self.a) * u)
        }
        fn impulse(&self, _set: usize, count: usize) -> Vec<DVector<f64>> {
            (0..count)
                .map(|i| DVector::from_element(1, (1.0 - self.a) * self.a.powi(i as i32)))
                .collect()
        }
        fn output(&self, set: usize, x: &[f64], u: f64) -> Result<f64> {
            let p = self.params(set);
            Ok(self.v0 + p[0] * x[0] + p.get(1).map_or(0.0, |g| g * u))
        }
    }

    fn static_gain() -> Linear {
        Linear { v0: 0.0, a: 0.0, phi: vec![2.0], h: 1e-3 }
    }

    fn two_param() -> Linear {
        Linear { v0: 3.7, a: 0.9, phi: vec![0.3, 0.1], h: 1e-3 }
    }

    fn constraints(n: usize, blocks: usize, v: (f64, f64)) -> DesignConstraints {
        DesignConstraints {
            i_max: 1.0,
            v_min: v.0,
            v_max: v.1,
            horizon: n as f64,
            t_s: 1.0,
            blocks,
        }
    }

    #[test]
    fn static_gain_reaches_analytic_optimum() {
        // S_k = u_k, so tr C = σ² / Σu², minimized at |u_k| = I_max.
        let sigma2 = 0.01;
        let n = 20;
        let c = constraints(n, 1, (-1e6, 1e6));
        let r = design_full(&static_gain(), &DVector::zeros(1), &c, sigma2, &DesignConfig::default())
            .unwrap();
        let optimum = sigma2 / n as f64;
        assert!((r.predicted_trace - optimum).abs() / optimum < 0.01, "{}", r.predicted_trace);
        assert!(r.inputs.iter().all(|u| u.abs() <= 1.0));
    }

    #[test]
    fn single_block_matches_full() {
        let m = two_param();
        let c = constraints(30, 1, (3.3, 3.95));
        let cfg = DesignConfig::default();
        let x0 = DVector::zeros(1);
        let full = design_full(&m, &x0, &c, 1e-4, &cfg).unwrap();
        let blocks = design_suboptimal(&m, &x0, &c, 1e-4, &[], &cfg).unwrap();
        assert_eq!(full.inputs, blocks.inputs);
        assert_eq!(full.predicted_trace, blocks.predicted_trace);
    }

    #[test]
    fn blocks_respect_limits_and_improve_trace() {
        let m = two_param();
        let c = constraints(40, 4, (3.3, 3.95));
        let r = design_suboptimal(&m, &DVector::zeros(1), &c, 1e-4, &[], &DesignConfig::default())
            .unwrap();
        assert_eq!(r.inputs.len(), 40);
        assert!(r.inputs.iter().all(|u| u.abs() <= c.i_max));
        for v in &r.voltages {
            assert!(*v <= c.v_max + 1e-6 && *v >= c.v_min - 1e-6, "{v}");
        }
        for w in r.blocks.windows(2) {
            assert!(w[1].trace <= w[0].trace, "{:?}", r.blocks);
        }
        // The unconstrained optimum would reach 4.1 V, so the window binds.
        assert!(r.voltages.iter().cloned().fold(f64::MIN, f64::max) > 3.9);
    }

    #[test]
    fn fisher_is_sum_of_block_information() {
        let m = two_param();
        let c = constraints(40, 4, (3.3, 3.95));
        let sigma2 = 1e-4;
        let prior_s = DMatrix::from_row_slice(2, 2, &[0.5, 0.1, -0.2, 0.4]);
        let r = design_suboptimal(&m, &DVector::zeros(1), &c, sigma2, std::slice::from_ref(&prior_s), &DesignConfig::default())
            .unwrap();
        let mut blocks = vec![prior_s];
        for b in 0..4 {
            blocks.push(r.sensitivity.rows(b * 10, 10).into_owned());
        }
        let summed = prior_fisher(&blocks, 2, sigma2);
        let scale = summed.norm();
        assert!((&summed - &r.fisher).norm() / scale < 1e-8);
    }

    #[test]
    fn bad_constraints_are_config_errors() {
        let m = static_gain();
        let x0 = DVector::zeros(1);
        let mut c = constraints(10, 3, (-1.0, 1.0));
        assert!(matches!(
            design_suboptimal(&m, &x0, &c, 1.0, &[], &DesignConfig::default()),
            Err(Error::Config(_))
        ));
        c.blocks = 1;
        c.horizon = 0.0;
        assert!(matches!(design_full(&m, &x0, &c, 1.0, &DesignConfig::default()), Err(Error::Config(_))));
    }

    #[test]
    fn start_outside_window_is_infeasible() {
        let m = two_param();
        let c = constraints(10, 1, (3.8, 3.95));
        assert!(matches!(
            design_full(&m, &DVector::zeros(1), &c, 1e-4, &DesignConfig::default()),
            Err(Error::Infeasible(_))
        ));
    }

    #[test]
    fn start_sequence_is_deterministic_and_bounded() {
        let a = start_sequence(50, 2.0, 7, 1, 0);
        assert_eq!(a, start_sequence(50, 2.0, 7, 1, 0));
        assert_ne!(a, start_sequence(50, 2.0, 7, 2, 0));
        assert!(a.iter().all(|u| u.abs() <= 2.0));
    }

    #[test]
    fn stopping_rule() {
        let rule = StoppingRule {
            max_experiments: 3,
            variance_threshold: Some(0.1),
            plateau_epsilon: Some(0.05),
        };
        assert_eq!(campaign_stopping(&[1.0], &[vec![0.5, 0.05]], &rule), StopDecision::Continue);
        assert_eq!(
            campaign_stopping(&[1.0, 0.5], &[vec![0.5], vec![0.05, 0.01]], &rule),
            StopDecision::StopThreshold
        );
        assert_eq!(
            campaign_stopping(&[1.0, 0.99], &[vec![0.5], vec![0.4]], &rule),
            StopDecision::StopPlateau
        );
        assert_eq!(
            campaign_stopping(&[1.0, 0.5, 0.2], &[vec![0.5], vec![0.4], vec![0.3]], &rule),
            StopDecision::StopMaxExperiments
        );
        let default = StoppingRule::default();
        assert_eq!(campaign_stopping(&[1.0, 1.0], &[vec![1.0], vec![1.0]], &default), StopDecision::Continue);
    }
}
