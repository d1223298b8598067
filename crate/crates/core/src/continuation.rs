//! Homotopy on the delay.
//!
//! The non-delayed problem is solved first. The delay is then raised along a
//! schedule; every shooting problem is warm-started from the previous initial
//! adjoint and uses the previous adjoint trajectory as the guess for the
//! advanced term. After a converged shoot, the guess is refreshed with the
//! fresh adjoint and the shoot repeated (refinement passes), which drives the
//! guess towards self-consistency.

use crate::error::{invalid, Result, SolverError};
use crate::integrate::{Grid, Trajectory};
use crate::problem::DelayedOcp;
use crate::shooting::{newton_solve, shooting_residual, ShootingOptions, ShootingResult};
use crate::warmstart::{penalty_start, PenaltyOptions};

#[derive(Clone, Debug, PartialEq)]
pub struct ContinuationOptions {
    /// Initial (and maximal) delay increment, seconds.
    pub dtau_init: f64,
    /// Abort once a failing increment has been halved below this.
    pub dtau_min: f64,
    /// Guess refreshes after each converged step.
    pub refine_passes: usize,
    /// Stop refreshing once the adjoint changes by at most this, relative to
    /// each component's sup norm.
    pub refine_tol: f64,
    pub shooting: ShootingOptions,
    /// Cold-start initialization of the non-delayed solve.
    pub penalty: PenaltyOptions,
    /// Target step; actual grids refine it so the delay falls on a node.
    pub base_h: f64,
    /// Increment growth after a successful step, capped at `dtau_init`.
    pub growth: f64,
}

impl ContinuationOptions {
    /// Defaults: ten uniform increments, up to 30 refinement passes, and a
    /// step of `T / 2000`.
    ///
    /// A single pass leaves the guess visibly inconsistent for larger delays
    /// (on the rendezvous problem at `tau = 4` some initial adjoint
    /// components stay off by more than 10%); the passes stop as soon as
    /// `refine_tol` is met, which takes a handful of passes per step.
    pub fn new(problem: &DelayedOcp, tau_target: f64) -> Self {
        let dtau = if tau_target > 0.0 {
            tau_target / 10.0
        } else {
            problem.delay_bound / 10.0
        };
        Self {
            dtau_init: dtau,
            dtau_min: dtau / 100.0,
            refine_passes: 30,
            refine_tol: 1e-8,
            shooting: ShootingOptions::default(),
            penalty: PenaltyOptions::default(),
            base_h: problem.horizon / 2000.0,
            growth: 1.5,
        }
    }

    /// Uniform schedule of `steps` increments up to `tau_target`.
    pub fn uniform(problem: &DelayedOcp, tau_target: f64, steps: usize) -> Self {
        let mut opts = Self::new(problem, tau_target);
        opts.dtau_init = tau_target / steps.max(1) as f64;
        opts.dtau_min = opts.dtau_init / 100.0;
        opts
    }

    pub fn check(&self) -> Result<()> {
        if !(self.dtau_min > 0.0 && self.dtau_min <= self.dtau_init) {
            return Err(invalid("dtau_min", "need 0 < dtau_min <= dtau_init"));
        }
        if !(self.base_h > 0.0) {
            return Err(invalid("base_h", "must be positive"));
        }
        if !(self.refine_tol > 0.0) {
            return Err(invalid("refine_tol", "must be positive"));
        }
        if !(self.growth >= 1.0) {
            return Err(invalid("growth", "must be at least 1"));
        }
        self.penalty.check()?;
        self.shooting.check()
    }
}

#[derive(Clone, Debug)]
pub struct ContinuationStep {
    pub tau: f64,
    pub result: ShootingResult,
    /// Refinement passes performed after the first converged shoot.
    pub refinements: usize,
    /// Relative sup-norm change of the adjoint in the last shoot (guess vs.
    /// solution).
    pub consistency: f64,
}

#[derive(Clone, Debug)]
pub struct ContinuationTrace {
    pub steps: Vec<ContinuationStep>,
    pub target_tau: f64,
    pub succeeded: bool,
}

impl ContinuationTrace {
    pub fn last(&self) -> Option<&ContinuationStep> {
        self.steps.last()
    }

    pub fn at(&self, tau: f64) -> Option<&ContinuationStep> {
        self.steps
            .iter()
            .find(|s| (s.tau - tau).abs() <= 1e-9 * tau.abs().max(1.0))
    }
}

/// Largest per-component change between two adjoints, relative to each
/// component's sup norm in `new`.
pub fn relative_change(old: &Trajectory, new: &Trajectory) -> Result<f64> {
    let sup = new.component_sup();
    let grid = new.grid();
    let mut buf = vec![0.0; new.dim()];
    let mut worst: f64 = 0.0;
    for i in 0..=grid.steps() {
        old.sample_into(grid.node(i), &mut buf)?;
        for c in 0..new.dim() {
            let scale = if sup[c] > 0.0 { sup[c] } else { 1.0 };
            worst = worst.max((new.node(i)[c] - buf[c]).abs() / scale);
        }
    }
    Ok(worst)
}

/// Shoots the non-delayed problem.
///
/// A nonzero `p0_init` is taken as a warm start and shot directly. From a
/// zero start, or when the direct shoot fails, Newton starts instead from
/// the adjoint produced by [`penalty_start`], which follows the cheapest
/// extremal rather than the nearest root.
pub fn solve_nondelayed(
    problem: &DelayedOcp,
    p0_init: &[f64],
    opts: &ContinuationOptions,
) -> Result<ShootingResult> {
    opts.check()?;
    if p0_init.len() != problem.n {
        return Err(SolverError::Dimension {
            expected: problem.n,
            got: p0_init.len(),
        });
    }
    let grid = Grid::aligned(problem.horizon, 0.0, opts.base_h)?;
    solve_nondelayed_on(problem, p0_init, opts, &grid)
}

fn solve_nondelayed_on(
    problem: &DelayedOcp,
    p0_init: &[f64],
    opts: &ContinuationOptions,
    grid: &Grid,
) -> Result<ShootingResult> {
    let cold = p0_init.iter().all(|&v| v == 0.0);
    let direct = if cold {
        let r = shooting_residual(problem, 0.0, p0_init, None, grid)?;
        if r.iter().map(|v| v * v).sum::<f64>().sqrt() <= opts.shooting.tolerance(problem) {
            return newton_solve(problem, 0.0, p0_init, None, grid, &opts.shooting);
        }
        None
    } else {
        let r = newton_solve(problem, 0.0, p0_init, None, grid, &opts.shooting)?;
        if r.converged {
            return Ok(r);
        }
        log::debug!(
            "direct non-delayed shoot stopped at residual {:.3e}",
            r.residual_norm
        );
        Some(r)
    };
    let polished = match penalty_start(problem, grid, &opts.penalty)? {
        Some(start) => {
            log::debug!(
                "penalty start: {} Gauss-Newton iterations, endpoint error {:.3e}",
                start.iterations,
                start.endpoint_error
            );
            Some(newton_solve(
                problem,
                0.0,
                &start.p0,
                None,
                grid,
                &opts.shooting,
            )?)
        }
        None => None,
    };
    Ok(match (direct, polished) {
        (_, Some(r)) if r.converged => r,
        (Some(d), Some(r)) => {
            if r.residual_norm < d.residual_norm {
                r
            } else {
                d
            }
        }
        (Some(d), None) => d,
        (None, Some(r)) => r,
        (None, None) => newton_solve(problem, 0.0, p0_init, None, grid, &opts.shooting)?,
    })
}

pub fn continuation_solve(
    problem: &DelayedOcp,
    tau_target: f64,
    p0_init: &[f64],
    opts: &ContinuationOptions,
) -> Result<ContinuationTrace> {
    continuation_solve_through(problem, &[tau_target], p0_init, opts)
}

/// Grid shared by every step of a continuation: `T` and every stop, and the
/// initial increment where that costs little, fall on nodes.
pub fn continuation_grid(
    problem: &DelayedOcp,
    stops: &[f64],
    opts: &ContinuationOptions,
) -> Result<Grid> {
    let base = Grid::aligned_all(problem.horizon, stops, opts.base_h)?;
    let mut with_increment = stops.to_vec();
    with_increment.push(opts.dtau_init);
    let limit = 2 * base.steps();
    Ok(Grid::aligned_within(problem.horizon, &with_increment, opts.base_h, limit).unwrap_or(base))
}

/// Continuation that visits every delay in `stops` exactly (ascending,
/// within `[0, M]`). The final stop is the target.
///
/// All steps with a positive delay share one grid (see
/// [`continuation_grid`]); intermediate delays are rounded to its nodes.
pub fn continuation_solve_through(
    problem: &DelayedOcp,
    stops: &[f64],
    p0_init: &[f64],
    opts: &ContinuationOptions,
) -> Result<ContinuationTrace> {
    opts.check()?;
    let Some(&target) = stops.last() else {
        return Err(invalid("stops", "at least one delay is required"));
    };
    if stops.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(invalid("stops", "delays must be strictly increasing"));
    }
    if !(stops[0] >= 0.0 && target <= problem.delay_bound) {
        return Err(invalid(
            "tau_target",
            format!("delays must lie in [0, {}]", problem.delay_bound),
        ));
    }
    let grid = continuation_grid(problem, stops, opts)?;
    let h = grid.step();

    let mut trace = ContinuationTrace {
        steps: Vec::new(),
        target_tau: target,
        succeeded: false,
    };
    // the base solve does not need the delays aligned
    let base_grid = Grid::aligned(problem.horizon, 0.0, opts.base_h)?;
    let base = match solve_nondelayed_on(problem, p0_init, opts, &base_grid) {
        Ok(r) if r.converged => r,
        Ok(r) => {
            log::warn!(
                "non-delayed solve did not converge (residual {:.3e})",
                r.residual_norm
            );
            return Ok(trace);
        }
        Err(e) => {
            log::warn!("non-delayed solve failed: {e}");
            return Ok(trace);
        }
    };
    log::info!(
        "tau = 0: cost {:.6e}, {} Newton iterations",
        base.lift.cost,
        base.iterations
    );
    trace.steps.push(ContinuationStep {
        tau: 0.0,
        result: base,
        refinements: 0,
        consistency: 0.0,
    });

    let mut current = 0usize;
    let mut dtau = opts.dtau_init;
    let mut pending = stops.iter().copied().filter(|&s| s > 0.0);
    let mut stop = pending.next();

    while let Some(s) = stop {
        let stop_node = grid
            .delay_steps(s)
            .expect("continuation grid aligns every stop");
        let mut node = (((current as f64) * h + dtau) / h).round() as usize;
        node = node.clamp(current + 1, stop_node);
        if (stop_node - node) as f64 * h <= 1e-6 * dtau {
            node = stop_node;
        }
        let proposal = if node == stop_node {
            s
        } else {
            grid.node(node)
        };
        let prev = trace.steps.last().expect("base step present");
        match shoot_step(problem, proposal, &prev.result, &grid, opts) {
            Ok(step) => {
                log::info!(
                    "tau = {proposal}: cost {:.6e}, {} Newton iterations, {} refinements, consistency {:.2e}",
                    step.result.lift.cost,
                    step.result.iterations,
                    step.refinements,
                    step.consistency
                );
                trace.steps.push(step);
                current = node;
                if node == stop_node {
                    stop = pending.next();
                }
                dtau = (dtau * opts.growth).min(opts.dtau_init);
            }
            Err(why) => {
                dtau *= 0.5;
                log::debug!("tau = {proposal} failed ({why}); increment halved to {dtau}");
                if dtau < opts.dtau_min {
                    log::warn!("continuation stalled at tau = {}", grid.node(current));
                    return Ok(trace);
                }
            }
        }
    }
    trace.succeeded = true;
    Ok(trace)
}

fn shoot_step(
    problem: &DelayedOcp,
    tau: f64,
    prev: &ShootingResult,
    grid: &Grid,
    opts: &ContinuationOptions,
) -> std::result::Result<ContinuationStep, String> {
    let shoot = |p0: &[f64], guess: &Trajectory| -> std::result::Result<ShootingResult, String> {
        let r = newton_solve(problem, tau, p0, Some(guess), grid, &opts.shooting)
            .map_err(|e| e.to_string())?;
        if r.converged {
            Ok(r)
        } else {
            Err(format!(
                "Newton stopped at residual {:.3e}",
                r.residual_norm
            ))
        }
    };
    let mut result = shoot(&prev.p0, &prev.lift.adjoint)?;
    let mut consistency =
        relative_change(&prev.lift.adjoint, &result.lift.adjoint).map_err(|e| e.to_string())?;
    let mut refinements = 0;
    while refinements < opts.refine_passes && consistency > opts.refine_tol {
        let next = shoot(&result.p0, &result.lift.adjoint)?;
        consistency =
            relative_change(&result.lift.adjoint, &next.lift.adjoint).map_err(|e| e.to_string())?;
        result = next;
        refinements += 1;
    }
    Ok(ContinuationStep {
        tau,
        result,
        refinements,
        consistency,
    })
}
