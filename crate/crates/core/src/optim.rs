//! Projected L-BFGS for box-constrained smooth minimization.

use std::collections::VecDeque;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LbfgsOptions {
    pub max_iterations: usize,
    pub memory: usize,
    /// Stop when the projected gradient's infinity norm falls below this.
    pub gradient_tol: f64,
    /// Stop after `stall_limit` consecutive iterations with a relative
    /// objective decrease below this.
    pub rel_tol: f64,
    pub stall_limit: usize,
    /// Largest |Δx_i| of the first trial step.
    pub initial_step: f64,
}

impl Default for LbfgsOptions {
    fn default() -> Self {
        LbfgsOptions {
            max_iterations: 200,
            memory: 8,
            gradient_tol: 1e-8,
            rel_tol: 1e-9,
            stall_limit: 3,
            initial_step: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LbfgsOutcome {
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Minimizes `f` over lower ≤ x ≤ upper. `fg` returns the value and the
/// gradient; `f` only the value (used by the line search). Non-finite values
/// are treated as +∞.
pub fn minimize<F, G>(
    f: F,
    fg: G,
    x0: &[f64],
    lower: &[f64],
    upper: &[f64],
    opts: &LbfgsOptions,
) -> LbfgsOutcome
where
    F: Fn(&[f64]) -> f64,
    G: Fn(&[f64]) -> (f64, Vec<f64>),
{
    let n = x0.len();
    let project = |x: &mut Vec<f64>| {
        for i in 0..n {
            x[i] = x[i].clamp(lower[i], upper[i]);
        }
    };
    let mut x = x0.to_vec();
    project(&mut x);
    let (mut fx, mut g) = fg(&x);
    let mut evaluations = 1;
    let mut history: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
    let mut stalls = 0;
    let mut converged = false;
    let mut iterations = 0;

    if !fx.is_finite() {
        return LbfgsOutcome {
            x,
            value: f64::INFINITY,
            iterations,
            evaluations,
            converged: false,
        };
    }

    while iterations < opts.max_iterations {
        iterations += 1;
        let blocked = |i: usize, gi: f64| {
            (x[i] <= lower[i] && gi > 0.0) || (x[i] >= upper[i] && gi < 0.0)
        };
        let pg_norm = (0..n)
            .filter(|&i| !blocked(i, g[i]))
            .map(|i| g[i].abs())
            .fold(0.0, f64::max);
        if pg_norm < opts.gradient_tol {
            converged = true;
            break;
        }

        // Two-loop recursion on the free coordinates.
        let mut q: Vec<f64> = (0..n).map(|i| if blocked(i, g[i]) { 0.0 } else { g[i] }).collect();
        let mut alphas = Vec::with_capacity(history.len());
        for (s, y, rho) in history.iter().rev() {
            let a = rho * dot(s, &q);
            for i in 0..n {
                q[i] -= a * y[i];
            }
            alphas.push(a);
        }
        if let Some((s, y, _)) = history.back() {
            let gamma = dot(s, y) / dot(y, y);
            for v in q.iter_mut() {
                *v *= gamma;
            }
        }
        for ((s, y, rho), a) in history.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(y, &q);
            for i in 0..n {
                q[i] += (a - b) * s[i];
            }
        }
        let mut d: Vec<f64> = (0..n)
            .map(|i| if blocked(i, g[i]) { 0.0 } else { -q[i] })
            .collect();
        if dot(&d, &g) >= 0.0 {
            d = (0..n).map(|i| if blocked(i, g[i]) { 0.0 } else { -g[i] }).collect();
            history.clear();
        }
        let mut step = 1.0;
        if history.is_empty() {
            let dmax = d.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if dmax > 0.0 {
                step = opts.initial_step / dmax;
            }
        }

        // Backtracking Armijo search along the projected path.
        let mut accepted = None;
        for _ in 0..40 {
            let mut trial: Vec<f64> = (0..n).map(|i| x[i] + step * d[i]).collect();
            project(&mut trial);
            let moved: Vec<f64> = (0..n).map(|i| trial[i] - x[i]).collect();
            if moved.iter().all(|m| *m == 0.0) {
                break;
            }
            let ft = f(&trial);
            evaluations += 1;
            if ft.is_finite() && ft <= fx + 1e-4 * dot(&g, &moved) {
                accepted = Some(trial);
                break;
            }
            step *= 0.5;
        }
        let Some(trial) = accepted else {
            if history.is_empty() {
                converged = true;
                break;
            }
            history.clear();
            continue;
        };
        let (ft, gt) = fg(&trial);
        evaluations += 1;
        if !ft.is_finite() {
            history.clear();
            continue;
        }
        let s: Vec<f64> = (0..n).map(|i| trial[i] - x[i]).collect();
        let y: Vec<f64> = (0..n).map(|i| gt[i] - g[i]).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() {
            history.push_back((s, y, 1.0 / sy));
            if history.len() > opts.memory {
                history.pop_front();
            }
        }
        let decrease = (fx - ft) / fx.abs().max(1.0);
        x = trial;
        fx = ft;
        g = gt;
        if decrease < opts.rel_tol {
            stalls += 1;
            if stalls >= opts.stall_limit {
                converged = true;
                break;
            }
        } else {
            stalls = 0;
        }
    }
    LbfgsOutcome {
        x,
        value: fx,
        iterations,
        evaluations,
        converged,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rosenbrock(x: &[f64]) -> f64 {
        (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2)
    }

    fn rosenbrock_grad(x: &[f64]) -> (f64, Vec<f64>) {
        let g0 = -2.0 * (1.0 - x[0]) - 400.0 * x[0] * (x[1] - x[0] * x[0]);
        let g1 = 200.0 * (x[1] - x[0] * x[0]);
        (rosenbrock(x), vec![g0, g1])
    }

    #[test]
    fn unconstrained_rosenbrock() {
        let out = minimize(
            rosenbrock,
            rosenbrock_grad,
            &[-1.2, 1.0],
            &[-5.0; 2],
            &[5.0; 2],
            &LbfgsOptions {
                max_iterations: 500,
                ..Default::default()
            },
        );
        assert!((out.x[0] - 1.0).abs() < 1e-5, "{out:?}");
        assert!((out.x[1] - 1.0).abs() < 1e-5, "{out:?}");
    }

    #[test]
    fn active_bound() {
        // Minimum of (x − 3)² + (y + 1)² on [0, 2]² is (2, 0).
        let f = |x: &[f64]| (x[0] - 3.0).powi(2) + (x[1] + 1.0).powi(2);
        let fg = |x: &[f64]| (f(x), vec![2.0 * (x[0] - 3.0), 2.0 * (x[1] + 1.0)]);
        let out = minimize(f, fg, &[1.0, 1.0], &[0.0; 2], &[2.0; 2], &LbfgsOptions::default());
        assert_eq!(out.x, vec![2.0, 0.0]);
        assert!(out.converged);
    }

    #[test]
    fn infeasible_start_is_projected() {
        let f = |x: &[f64]| x[0] * x[0];
        let fg = |x: &[f64]| (f(x), vec![2.0 * x[0]]);
        let out = minimize(f, fg, &[7.0], &[1.0], &[3.0], &LbfgsOptions::default());
        assert_eq!(out.x, vec![1.0]);
    }
}
