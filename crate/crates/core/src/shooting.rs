//! Damped Newton on the shooting map `p(0) -> x(T) - target`.

use nalgebra::DMatrix;

use crate::error::{Result, SolverError};
use crate::extremal::{integrate_extremal, ExtremalLift};
use crate::integrate::{Grid, Trajectory};
use crate::problem::DelayedOcp;

#[derive(Clone, Debug, PartialEq)]
pub struct ShootingOptions {
    pub residual_tol_abs: f64,
    /// Scaled by the norm of the target.
    pub residual_tol_rel: f64,
    pub max_iterations: usize,
    /// Relative finite-difference step. See [`fd_jacobian`] for how it is
    /// turned into a per-column perturbation.
    pub fd_step: f64,
    pub max_backtracks: usize,
}

impl Default for ShootingOptions {
    fn default() -> Self {
        Self {
            residual_tol_abs: 1e-6,
            residual_tol_rel: 1e-9,
            max_iterations: 50,
            fd_step: 1e-6,
            max_backtracks: 20,
        }
    }
}

impl ShootingOptions {
    pub fn tolerance(&self, problem: &DelayedOcp) -> f64 {
        self.residual_tol_abs + self.residual_tol_rel * problem.target_norm()
    }

    pub fn check(&self) -> Result<()> {
        use crate::error::invalid;
        if !(self.residual_tol_abs > 0.0) {
            return Err(invalid("residual_tol_abs", "must be positive"));
        }
        if !(self.residual_tol_rel > 0.0) {
            return Err(invalid("residual_tol_rel", "must be positive"));
        }
        if !(self.fd_step > 0.0) {
            return Err(invalid("fd_step", "must be positive"));
        }
        if self.max_iterations == 0 {
            return Err(invalid("max_iterations", "must be at least 1"));
        }
        if self.max_backtracks == 0 {
            return Err(invalid("max_backtracks", "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct ShootingResult {
    pub p0: Vec<f64>,
    /// `x(T) - target`.
    pub residual: Vec<f64>,
    pub residual_norm: f64,
    /// Accepted Newton updates.
    pub iterations: usize,
    pub converged: bool,
    pub lift: ExtremalLift,
    /// Residual norm of every accepted iterate, starting with the initial one.
    pub residual_history: Vec<f64>,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn residual_of(problem: &DelayedOcp, lift: &ExtremalLift) -> Vec<f64> {
    lift.terminal_state()
        .iter()
        .zip(&problem.target)
        .map(|(x, t)| x - t)
        .collect()
}

pub fn shooting_residual(
    problem: &DelayedOcp,
    tau: f64,
    p0: &[f64],
    guess: Option<&Trajectory>,
    grid: &Grid,
) -> Result<Vec<f64>> {
    let lift = integrate_extremal(problem, tau, p0, guess, grid)?;
    Ok(residual_of(problem, &lift))
}

/// Central-difference Jacobian of the shooting residual.
///
/// Column `j` starts from the step `fd_step * max(1, |p0_j|)`. Adjoint
/// components can be many orders of magnitude below one (they carry the
/// inverse units of the state), where that step would leave the linear
/// regime entirely, so the step is then rescaled until the central
/// difference moves the residual by about `fd_step * max(1, |target|)`.
pub fn fd_jacobian(
    problem: &DelayedOcp,
    tau: f64,
    p0: &[f64],
    guess: Option<&Trajectory>,
    grid: &Grid,
    opts: &ShootingOptions,
) -> Result<DMatrix<f64>> {
    let mut steps: Vec<f64> = p0.iter().map(|v| opts.fd_step * v.abs().max(1.0)).collect();
    fd_jacobian_adaptive(problem, tau, p0, guess, grid, opts, &mut steps)
}

fn fd_jacobian_adaptive(
    problem: &DelayedOcp,
    tau: f64,
    p0: &[f64],
    guess: Option<&Trajectory>,
    grid: &Grid,
    opts: &ShootingOptions,
    steps: &mut [f64],
) -> Result<DMatrix<f64>> {
    const BAND: f64 = 30.0;
    const ATTEMPTS: usize = 8;
    let n = problem.n;
    let target = opts.fd_step * problem.target_norm().max(1.0);
    let mut jac = DMatrix::zeros(n, n);
    let mut probe = p0.to_vec();
    for j in 0..n {
        let mut eps = steps[j];
        let mut column = None;
        let mut last_err = None;
        for _ in 0..ATTEMPTS {
            probe[j] = p0[j] + eps;
            let plus = shooting_residual(problem, tau, &probe, guess, grid);
            probe[j] = p0[j] - eps;
            let minus = shooting_residual(problem, tau, &probe, guess, grid);
            probe[j] = p0[j];
            let (plus, minus) = match (plus, minus) {
                (Ok(a), Ok(b)) => (a, b),
                (Err(e), _) | (_, Err(e)) => {
                    last_err = Some(e);
                    eps /= 1e3;
                    continue;
                }
            };
            let diff: Vec<f64> = plus
                .iter()
                .zip(&minus)
                .map(|(a, b)| 0.5 * (a - b))
                .collect();
            let moved = norm(&diff);
            column = Some(diff.iter().map(|d| d / eps).collect::<Vec<_>>());
            if moved > target / BAND && moved < target * BAND {
                break;
            }
            let factor = if moved > 0.0 { target / moved } else { 1e3 };
            eps *= factor.clamp(1e-6, 1e6);
        }
        let column = match column {
            Some(c) => c,
            None => return Err(last_err.unwrap_or(SolverError::Divergence { time: 0.0 })),
        };
        steps[j] = eps;
        for i in 0..n {
            jac[(i, j)] = column[i];
        }
    }
    Ok(jac)
}

/// Solves `a x = b` by LU with partial pivoting.
pub(crate) fn lu_solve(a: &DMatrix<f64>, b: &[f64]) -> Result<Vec<f64>> {
    let n = a.nrows();
    let mut m = a.clone();
    let mut x = b.to_vec();
    let threshold = 1e-14 * a.norm();
    for col in 0..n {
        let (piv, pval) =
            (col..n)
                .map(|r| (r, m[(r, col)].abs()))
                .fold(
                    (col, -1.0),
                    |best, cur| if cur.1 > best.1 { cur } else { best },
                );
        if !(pval > threshold) {
            return Err(SolverError::SingularJacobian {
                pivot: pval,
                threshold,
            });
        }
        if piv != col {
            m.swap_rows(piv, col);
            x.swap(piv, col);
        }
        for r in col + 1..n {
            let f = m[(r, col)] / m[(col, col)];
            if f != 0.0 {
                for c in col..n {
                    m[(r, c)] -= f * m[(col, c)];
                }
                x[r] -= f * x[col];
            }
        }
    }
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|c| m[(r, c)] * x[c]).sum();
        x[r] = (x[r] - s) / m[(r, r)];
    }
    Ok(x)
}

/// Damped Newton from `p0_init` with the guess held fixed.
///
/// Each full step is halved until the residual norm decreases; when no
/// trial decreases it the solve stops and returns the best iterate with
/// `converged = false`.
pub fn newton_solve(
    problem: &DelayedOcp,
    tau: f64,
    p0_init: &[f64],
    guess: Option<&Trajectory>,
    grid: &Grid,
    opts: &ShootingOptions,
) -> Result<ShootingResult> {
    opts.check()?;
    let tol = opts.tolerance(problem);
    let mut p = p0_init.to_vec();
    let mut lift = integrate_extremal(problem, tau, &p, guess, grid)?;
    let mut residual = residual_of(problem, &lift);
    let mut rnorm = norm(&residual);
    let mut history = vec![rnorm];
    let mut steps: Vec<f64> = p.iter().map(|v| opts.fd_step * v.abs().max(1.0)).collect();
    let mut iterations = 0;

    while rnorm > tol && iterations < opts.max_iterations {
        let jac = fd_jacobian_adaptive(problem, tau, &p, guess, grid, opts, &mut steps)?;
        let rhs: Vec<f64> = residual.iter().map(|r| -r).collect();
        let delta = lu_solve(&jac, &rhs)?;

        let mut lambda = 1.0;
        let mut accepted = None;
        for _ in 0..opts.max_backtracks {
            let trial: Vec<f64> = p.iter().zip(&delta).map(|(a, d)| a + lambda * d).collect();
            if let Ok(l) = integrate_extremal(problem, tau, &trial, guess, grid) {
                let r = residual_of(problem, &l);
                let rn = norm(&r);
                if rn < rnorm {
                    accepted = Some((trial, l, r, rn));
                    break;
                }
            }
            lambda *= 0.5;
        }
        let Some((trial, l, r, rn)) = accepted else {
            log::debug!("tau = {tau}: line search failed at residual {rnorm:.3e}");
            break;
        };
        debug_assert!(rn < rnorm);
        p = trial;
        lift = l;
        residual = r;
        rnorm = rn;
        history.push(rnorm);
        iterations += 1;
        log::trace!("tau = {tau}: iteration {iterations}, residual {rnorm:.3e}, damping {lambda}");
    }

    Ok(ShootingResult {
        p0: p,
        converged: rnorm <= tol,
        residual,
        residual_norm: rnorm,
        iterations,
        lift,
        residual_history: history,
    })
}
