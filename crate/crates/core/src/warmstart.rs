//! Cold-start initial adjoint for the non-delayed problem.
//!
//! Newton on `p(0)` converges only from close by, and from `p(0) = 0` it
//! tends to settle on a stationary point of the residual norm. This module
//! builds a starting point in control space instead. For decreasing weights
//! `w` it minimizes
//!
//! ```text
//! J_w(u) = int_0^T u^2 dt + e' S^{-1} e / w,    e = x(T) - target,
//! ```
//!
//! over node-valued controls by Gauss-Newton with a monotone line search,
//! where `S = diag(G0)` is the diagonal of the controllability Gramian of
//! the uncontrolled flow. Each weight is warm-started from the previous
//! minimizer. The last control is then projected onto the extremal family
//! `u(t) = <X(T,t) f2(x(t)), nu>/2` to read off `p(0) = X(T,0)' nu`.

use nalgebra::{DMatrix, DVector};

use crate::error::{invalid, Result};
use crate::integrate::{integrate_dde, Grid, History, Trajectory};
use crate::problem::DelayedOcp;

#[derive(Clone, Debug, PartialEq)]
pub struct PenaltyOptions {
    pub weight_start: f64,
    pub weight_end: f64,
    /// Ratio between consecutive weights.
    pub factor: f64,
    /// Gauss-Newton iterations per weight.
    pub max_iterations: usize,
}

impl Default for PenaltyOptions {
    fn default() -> Self {
        Self {
            weight_start: 1e3,
            weight_end: 1e-9,
            factor: 10.0,
            max_iterations: 30,
        }
    }
}

impl PenaltyOptions {
    pub fn check(&self) -> Result<()> {
        if !(self.weight_start > 0.0
            && self.weight_end > 0.0
            && self.weight_end <= self.weight_start)
        {
            return Err(invalid("weight", "need 0 < weight_end <= weight_start"));
        }
        if !(self.factor > 1.0) {
            return Err(invalid("factor", "must exceed 1"));
        }
        if self.max_iterations == 0 {
            return Err(invalid("max_iterations", "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct PenaltyStart {
    /// Initial adjoint of the extremal closest to the final control.
    pub p0: Vec<f64>,
    /// Control at the grid nodes.
    pub control: Vec<f64>,
    /// `|x(T) - target|` under `control`.
    pub endpoint_error: f64,
    pub cost: f64,
    /// Gauss-Newton iterations over all weights.
    pub iterations: usize,
}

/// Trapezoid weights on a uniform grid.
fn quadrature(grid: &Grid) -> Vec<f64> {
    let n = grid.steps();
    let h = grid.step();
    (0..=n)
        .map(|k| if k == 0 || k == n { 0.5 * h } else { h })
        .collect()
}

/// Piecewise-linear interpolation of node values.
fn interpolate(grid: &Grid, u: &[f64], t: f64) -> f64 {
    let s = ((t - grid.t0()) / grid.step()).clamp(0.0, grid.steps() as f64);
    let i = (s.floor() as usize).min(grid.steps() - 1);
    let w = s - i as f64;
    (1.0 - w) * u[i] + w * u[i + 1]
}

fn flow(problem: &DelayedOcp, grid: &Grid, u: &[f64]) -> Result<Trajectory> {
    let n = problem.n;
    let (mut a, mut b, mut c) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    let mut rhs = |t: f64, x: &[f64], _: &[f64], out: &mut [f64]| {
        problem.f0.eval_into(x, &mut a);
        problem.f1.eval_into(x, &mut b);
        problem.f2.eval_into(x, &mut c);
        let ut = interpolate(grid, u, t);
        for i in 0..n {
            out[i] = a[i] + b[i] + ut * c[i];
        }
    };
    integrate_dde(&mut rhs, n, 0.0, &problem.history, grid)
}

/// Endpoint error and its control derivative along `u`.
struct Linearization {
    error: DVector<f64>,
    /// `X(T,0)`.
    transition0: DMatrix<f64>,
    /// `X(T,s_k) f2(x(s_k))` at every node.
    responses: Vec<DVector<f64>>,
}

fn linearize(problem: &DelayedOcp, grid: &Grid, u: &[f64]) -> Result<Linearization> {
    let n = problem.n;
    let state = flow(problem, grid, u)?;
    let horizon = grid.tf();

    // L(sigma) = X(T, T - sigma) solves L' = L A(T - sigma), L(0) = I
    let mut x = vec![0.0; n];
    let mut jac = vec![0.0; n * n];
    let mut tmp = vec![0.0; n * n];
    let mut failure = None;
    let mut rhs = |sigma: f64, l: &[f64], _: &[f64], out: &mut [f64]| {
        let s = (horizon - sigma).clamp(grid.t0(), horizon);
        if let Err(e) = state.sample_into(s, &mut x) {
            failure.get_or_insert(e);
        }
        let us = interpolate(grid, u, s);
        problem.f0.jacobian_into(&x, &mut jac);
        problem.f1.jacobian_into(&x, &mut tmp);
        for (a, b) in jac.iter_mut().zip(&tmp) {
            *a += b;
        }
        problem.f2.jacobian_into(&x, &mut tmp);
        for (a, b) in jac.iter_mut().zip(&tmp) {
            *a += us * b;
        }
        for i in 0..n {
            for j in 0..n {
                out[i * n + j] = (0..n).map(|k| l[i * n + k] * jac[k * n + j]).sum();
            }
        }
    };
    let reversed = Grid::new(0.0, horizon - grid.t0(), grid.steps())?;
    let identity: Vec<f64> = DMatrix::<f64>::identity(n, n).iter().copied().collect();
    let family = integrate_dde(
        &mut rhs,
        n * n,
        0.0,
        &History::constant(0.0, identity),
        &reversed,
    )?;
    if let Some(e) = failure {
        return Err(e);
    }

    let steps = grid.steps();
    let mut f2x = vec![0.0; n];
    let responses = (0..=steps)
        .map(|k| {
            let l = DMatrix::from_row_slice(n, n, family.node(steps - k));
            problem.f2.eval_into(state.node(k), &mut f2x);
            l * DVector::from_column_slice(&f2x)
        })
        .collect();
    let transition0 = DMatrix::from_row_slice(n, n, family.node(steps));
    let error = DVector::from_iterator(
        n,
        state.last().iter().zip(&problem.target).map(|(a, b)| a - b),
    );
    Ok(Linearization {
        error,
        transition0,
        responses,
    })
}

/// Returns `(G, D u)` with `G = int b b'` and `D u = int b u`.
fn moments(lin: &Linearization, weights: &[f64], u: &[f64]) -> (DMatrix<f64>, DVector<f64>) {
    let n = lin.error.len();
    let mut g = DMatrix::zeros(n, n);
    let mut du = DVector::zeros(n);
    for ((b, &w), &uk) in lin.responses.iter().zip(weights).zip(u) {
        g += b * b.transpose() * w;
        du += b * (uk * w);
    }
    (g, du)
}

fn energy(weights: &[f64], u: &[f64]) -> f64 {
    weights.iter().zip(u).map(|(w, v)| w * v * v).sum()
}

/// Builds a starting `p(0)` for the non-delayed problem on `grid`. Returns
/// `None` when a state component is not reachable from the uncontrolled
/// flow (zero Gramian diagonal).
pub fn penalty_start(
    problem: &DelayedOcp,
    grid: &Grid,
    opts: &PenaltyOptions,
) -> Result<Option<PenaltyStart>> {
    opts.check()?;
    let n = problem.n;
    let weights = quadrature(grid);
    let mut u = vec![0.0; grid.steps() + 1];

    let lin = linearize(problem, grid, &u)?;
    let (g0, _) = moments(&lin, &weights, &u);
    let scale: Vec<f64> = (0..n).map(|i| g0[(i, i)]).collect();
    if scale.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
        log::debug!("penalty start skipped: unreachable state component");
        return Ok(None);
    }
    let metric = DMatrix::from_diagonal(&DVector::from_vec(scale.clone()));

    let merit = |u: &[f64], w: f64| -> Result<f64> {
        let end = flow(problem, grid, u)?;
        let penalty: f64 = end
            .last()
            .iter()
            .zip(&problem.target)
            .zip(&scale)
            .map(|((a, b), s)| (a - b) * (a - b) / s)
            .sum();
        Ok(energy(&weights, u) + penalty / w)
    };

    let mut iterations = 0;
    let mut w = opts.weight_start;
    loop {
        let mut current = merit(&u, w)?;
        for _ in 0..opts.max_iterations {
            let lin = linearize(problem, grid, &u)?;
            let (g, du) = moments(&lin, &weights, &u);
            let Some(nu) = (&metric * w + g).lu().solve(&(du - &lin.error)) else {
                break;
            };
            let dir: Vec<f64> = lin
                .responses
                .iter()
                .zip(&u)
                .map(|(b, uk)| b.dot(&nu) - uk)
                .collect();
            iterations += 1;
            let mut lambda = 1.0;
            let mut accepted = false;
            while lambda > 1e-8 {
                let trial: Vec<f64> = u.iter().zip(&dir).map(|(a, d)| a + lambda * d).collect();
                if let Ok(m) = merit(&trial, w) {
                    if m < current {
                        u = trial;
                        current = m;
                        accepted = true;
                        break;
                    }
                }
                lambda *= 0.5;
            }
            let small =
                energy(&weights, &dir) <= 1e-16 * energy(&weights, &u).max(f64::MIN_POSITIVE);
            if !accepted || (lambda == 1.0 && small) {
                break;
            }
        }
        log::debug!("penalty weight {w:.1e}: merit {current:.6e}");
        if w <= opts.weight_end {
            break;
        }
        w = (w / opts.factor).max(opts.weight_end);
    }

    let lin = linearize(problem, grid, &u)?;
    let (g, du) = moments(&lin, &weights, &u);
    let Some(nu) = g.lu().solve(&(du * 2.0)) else {
        return Ok(None);
    };
    let p0 = lin.transition0.transpose() * nu;
    Ok(Some(PenaltyStart {
        p0: p0.iter().copied().collect(),
        endpoint_error: lin.error.norm(),
        cost: energy(&weights, &u),
        control: u,
        iterations,
    }))
}
