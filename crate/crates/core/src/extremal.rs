//! Forward integration of the coupled state/adjoint system.
//!
//! With the normal multiplier fixed at `-1`, the Hamiltonian is
//!
//! ```text
//! H(x, y, u, p) = <p, f0(x) + f1(y) + u f2(x)> - u^2
//! ```
//!
//! and its maximization over `u` gives `u = <p, f2(x)> / 2`. The adjoint
//! equation has an advanced argument `p(t + tau)` on `[0, T - tau]`, which is
//! not available during a forward sweep. It is closed with a guess trajectory
//! `g` from a previous solve:
//!
//! ```text
//! p(t + tau)  ~  g(t + tau) + (p(t) - g(t))
//! ```
//!
//! i.e. the guess supplies the advance `g(t + tau) - g(t)` and the current
//! sweep supplies the base value. When the guess equals the computed adjoint
//! the substitution is exact, so fixed points of the guess refresh are
//! extremals of the delayed problem. Unlike the plain substitution
//! `p(t + tau) ~ g(t + tau)`, this keeps the dependence of the advanced term
//! on `p(0)`; without it the shooting map can be rank-deficient (for the
//! rendezvous model only the steering adjoint would reach the control).

use crate::error::{Result, SolverError};
use crate::integrate::{integrate_dde, DelayRhs, Grid, History, Trajectory};
use crate::problem::{DelayedOcp, SmoothField};

/// Cost multiplier of a normal extremal.
pub const NORMAL_MULTIPLIER: f64 = -1.0;

/// How the advanced adjoint term is closed for `tau > 0`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum AdvancedTerm {
    /// `p(t + tau) ~ g(t + tau) + p(t) - g(t)`.
    #[default]
    Corrected,
    /// `p(t + tau) ~ g(t + tau)`: the guess alone.
    Direct,
}

/// State, adjoint and control of one solved problem, with its cost.
#[derive(Clone, Debug)]
pub struct ExtremalLift {
    pub tau: f64,
    /// State on `[0, T]`, with the problem history attached for `t < 0`.
    pub state: Trajectory,
    pub adjoint: Trajectory,
    pub control: Trajectory,
    pub cost: f64,
    pub multiplier: f64,
}

impl ExtremalLift {
    pub fn grid(&self) -> &Grid {
        self.state.grid()
    }

    pub fn terminal_state(&self) -> &[f64] {
        self.state.last()
    }

    pub fn initial_adjoint(&self) -> &[f64] {
        self.adjoint.first()
    }
}

/// Maximizer of the Hamiltonian in `u`: `<p, f2(x)> / 2`.
pub fn control_law(x: &[f64], p: &[f64], f2: &SmoothField) -> f64 {
    let f2x = f2.eval(x);
    0.5 * dot(p, &f2x)
}

pub fn hamiltonian(problem: &DelayedOcp, x: &[f64], x_delayed: &[f64], u: f64, p: &[f64]) -> f64 {
    let f0 = problem.f0.eval(x);
    let f1 = problem.f1.eval(x_delayed);
    let f2 = problem.f2.eval(x);
    let drift: f64 = (0..problem.n)
        .map(|i| p[i] * (f0[i] + f1[i] + u * f2[i]))
        .sum();
    drift + NORMAL_MULTIPLIER * u * u
}

/// Hamiltonian at every node of a lift.
pub fn hamiltonian_profile(problem: &DelayedOcp, lift: &ExtremalLift) -> Result<Vec<f64>> {
    let grid = lift.grid();
    let mut out = Vec::with_capacity(grid.steps() + 1);
    for i in 0..=grid.steps() {
        let t = grid.node(i);
        let xd = lift.state.sample(t - lift.tau)?;
        out.push(hamiltonian(
            problem,
            lift.state.node(i),
            &xd,
            lift.control.node(i)[0],
            lift.adjoint.node(i),
        ));
    }
    Ok(out)
}

/// `int_0^T u^2`: composite Simpson on an even number of intervals,
/// trapezoid otherwise.
pub fn cost_of(control: &Trajectory) -> f64 {
    let grid = control.grid();
    let n = grid.steps();
    let h = grid.step();
    let sq = |i: usize| {
        let u = control.node(i)[0];
        u * u
    };
    if n.is_multiple_of(2) {
        let mut acc = sq(0) + sq(n);
        for i in 1..n {
            acc += if i % 2 == 1 { 4.0 } else { 2.0 } * sq(i);
        }
        acc * h / 3.0
    } else {
        let inner: f64 = (1..n).map(sq).sum();
        h * (0.5 * (sq(0) + sq(n)) + inner)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `out -= J^T v` for row-major `J`.
fn sub_transpose_mul(jac: &[f64], v: &[f64], out: &mut [f64]) {
    let n = v.len();
    for i in 0..n {
        let vi = v[i];
        if vi != 0.0 {
            for j in 0..n {
                out[j] -= jac[i * n + j] * vi;
            }
        }
    }
}

struct ExtremalRhs<'a> {
    problem: &'a DelayedOcp,
    tau: f64,
    guess: Option<&'a Trajectory>,
    mode: AdvancedTerm,
    /// First segment past `T - tau`; steps from there on drop the advanced term.
    switch_segment: usize,
    f0x: Vec<f64>,
    f1d: Vec<f64>,
    f2x: Vec<f64>,
    jac: Vec<f64>,
    jac2: Vec<f64>,
    adv: Vec<f64>,
    g_now: Vec<f64>,
}

impl DelayRhs for ExtremalRhs<'_> {
    fn eval(&mut self, t: f64, segment: usize, z: &[f64], zd: &[f64], out: &mut [f64]) {
        let n = self.problem.n;
        let (x, p) = z.split_at(n);
        let xd = &zd[..n];
        let (dx, dp) = out.split_at_mut(n);

        self.problem.f2.eval_into(x, &mut self.f2x);
        let u = 0.5 * dot(p, &self.f2x);
        self.problem.f0.eval_into(x, &mut self.f0x);
        self.problem.f1.eval_into(xd, &mut self.f1d);
        for i in 0..n {
            dx[i] = self.f0x[i] + self.f1d[i] + u * self.f2x[i];
        }

        self.problem.f0.jacobian_into(x, &mut self.jac);
        self.problem.f2.jacobian_into(x, &mut self.jac2);
        for (a, b) in self.jac.iter_mut().zip(&self.jac2) {
            *a += u * b;
        }
        dp.fill(0.0);
        sub_transpose_mul(&self.jac, p, dp);

        // advanced term, d f1/dx evaluated at x(t)
        if self.tau == 0.0 {
            self.problem.f1.jacobian_into(x, &mut self.jac);
            sub_transpose_mul(&self.jac, p, dp);
        } else if segment < self.switch_segment {
            let guess = self.guess.expect("guess checked before integration");
            let ahead = t + self.tau;
            debug_assert!(ahead <= guess.grid().tf() + 1e-9 * guess.grid().step());
            guess
                .sample_into(ahead, &mut self.adv)
                .expect("guess covers [0, T]");
            if self.mode == AdvancedTerm::Corrected {
                guess
                    .sample_into(t, &mut self.g_now)
                    .expect("guess covers [0, T]");
                for i in 0..n {
                    self.adv[i] += p[i] - self.g_now[i];
                }
            }
            self.problem.f1.jacobian_into(x, &mut self.jac);
            sub_transpose_mul(&self.jac, &self.adv, dp);
        }
    }

    fn breakpoints(&self) -> Vec<f64> {
        if self.tau > 0.0 {
            vec![self.problem.horizon - self.tau]
        } else {
            Vec::new()
        }
    }
}

/// Integrates the extremal system forward from `x(0) = phi(0)`, `p(0) = p0`.
pub fn integrate_extremal(
    problem: &DelayedOcp,
    tau: f64,
    p0: &[f64],
    guess: Option<&Trajectory>,
    grid: &Grid,
) -> Result<ExtremalLift> {
    integrate_extremal_with(problem, tau, p0, guess, grid, AdvancedTerm::Corrected)
}

pub fn integrate_extremal_with(
    problem: &DelayedOcp,
    tau: f64,
    p0: &[f64],
    guess: Option<&Trajectory>,
    grid: &Grid,
    mode: AdvancedTerm,
) -> Result<ExtremalLift> {
    let n = problem.n;
    if p0.len() != n {
        return Err(SolverError::Dimension {
            expected: n,
            got: p0.len(),
        });
    }
    if !(0.0..=problem.delay_bound).contains(&tau) {
        return Err(crate::error::invalid(
            "tau",
            format!("delay {tau} outside [0, {}]", problem.delay_bound),
        ));
    }
    let horizon = problem.horizon;
    if grid.t0() != 0.0 || (grid.tf() - horizon).abs() > 1e-12 * horizon.max(1.0) {
        return Err(crate::error::invalid(
            "grid",
            "extremal grid must span [0, T]",
        ));
    }
    let mut switch_segment = grid.steps();
    if tau > 0.0 {
        let guess = guess.ok_or(SolverError::MissingGuess { tau })?;
        if guess.dim() != n {
            return Err(SolverError::Dimension {
                expected: n,
                got: guess.dim(),
            });
        }
        let g = guess.grid();
        let tol = 1e-9 * g.step();
        if g.t0() > tol || g.tf() < horizon - tol {
            return Err(crate::error::invalid(
                "guess",
                "guess adjoint must cover [0, T]",
            ));
        }
        if tau < horizon {
            switch_segment = grid
                .node_index(horizon - tau)
                .ok_or_else(|| crate::error::invalid("grid", "T - tau must be a grid node"))?;
        } else {
            switch_segment = 0;
        }
        if grid.delay_steps(tau).is_none() {
            return Err(crate::error::invalid(
                "grid",
                "tau must be a multiple of the step",
            ));
        }
    }

    let hist_x = problem.history.clone();
    let p_init = p0.to_vec();
    let history = History::new(problem.history.start(), 2 * n, move |t, out| {
        let (x, p) = out.split_at_mut(n);
        hist_x.eval_into(t, x);
        p.copy_from_slice(&p_init);
    });

    let mut rhs = ExtremalRhs {
        problem,
        tau,
        guess,
        mode,
        switch_segment,
        f0x: vec![0.0; n],
        f1d: vec![0.0; n],
        f2x: vec![0.0; n],
        jac: vec![0.0; n * n],
        jac2: vec![0.0; n * n],
        adv: vec![0.0; n],
        g_now: vec![0.0; n],
    };
    let joint = integrate_dde(&mut rhs, 2 * n, tau, &history, grid)?;

    let state = joint.select(0..n, Some(problem.history.clone()))?;
    let adjoint = joint.select(n..2 * n, None)?;
    let control = control_trajectory(problem, &joint)?;
    let cost = cost_of(&control);
    Ok(ExtremalLift {
        tau,
        state,
        adjoint,
        control,
        cost,
        multiplier: NORMAL_MULTIPLIER,
    })
}

/// `u = <p, f2(x)>/2` at the nodes, with `u' = (<p', f2> + <p, Df2 x'>)/2`.
fn control_trajectory(problem: &DelayedOcp, joint: &Trajectory) -> Result<Trajectory> {
    let n = problem.n;
    let grid = *joint.grid();
    let mut f2x = vec![0.0; n];
    let mut jac2 = vec![0.0; n * n];
    let mut rate = |z: &[f64], dz: &[f64]| -> (f64, f64) {
        let (x, p) = z.split_at(n);
        let (dx, dp) = dz.split_at(n);
        problem.f2.eval_into(x, &mut f2x);
        problem.f2.jacobian_into(x, &mut jac2);
        let mut pj = 0.0;
        for i in 0..n {
            for j in 0..n {
                pj += p[i] * jac2[i * n + j] * dx[j];
            }
        }
        (0.5 * dot(p, &f2x), 0.5 * (dot(dp, &f2x) + pj))
    };
    let mut values = Vec::with_capacity(grid.steps() + 1);
    let mut derivs = Vec::with_capacity(grid.steps() + 1);
    for i in 0..=grid.steps() {
        let (u, du) = rate(joint.node(i), joint.deriv(i));
        values.push(u);
        derivs.push(du);
    }
    let mut control = Trajectory::from_nodes(grid, 1, values, derivs, None)?;
    let jumps: Vec<(usize, Vec<f64>)> = joint
        .left_jumps()
        .iter()
        .map(|(i, d)| (*i, vec![rate(joint.node(*i), d).1]))
        .collect();
    control.set_left_jumps(jumps);
    Ok(control)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::rendezvous_reference;

    fn integrator_problem(horizon: f64, target: f64) -> DelayedOcp {
        DelayedOcp {
            n: 1,
            f0: SmoothField::zero(1),
            f1: SmoothField::zero(1),
            f2: SmoothField::constant(vec![1.0]),
            history: History::constant(-1.0, vec![0.0]),
            delay_bound: 1.0,
            horizon,
            target: vec![target],
        }
    }

    #[test]
    fn control_law_cases() {
        let p = rendezvous_reference(1.0);
        assert_eq!(control_law(&[1.0, 2.0, 3.0, 4.0], &[0.0; 4], &p.f2), 0.0);
        assert_eq!(
            control_law(&[1.0, 2.0, 3.0, 4.0], &[5.0, 6.0, 7.0, 0.8], &p.f2),
            0.4
        );
        let f2 = SmoothField::constant(vec![1.0, 0.0]);
        assert_eq!(control_law(&[0.0, 0.0], &[3.0, 7.0], &f2), 1.5);
    }

    #[test]
    fn hamiltonian_cases() {
        let p = rendezvous_reference(1.0);
        let x = [0.0, 0.0, 0.0, 0.0];
        assert_eq!(hamiltonian(&p, &x, &x, 1.0, &[0.0; 4]), -1.0);
        let lin = SmoothField::constant(vec![5.0, 0.0]);
        let q = DelayedOcp {
            n: 2,
            f0: lin,
            f1: SmoothField::zero(2),
            f2: SmoothField::zero(2),
            history: History::constant(-1.0, vec![0.0, 0.0]),
            delay_bound: 1.0,
            horizon: 1.0,
            target: vec![0.0, 0.0],
        };
        assert_eq!(
            hamiltonian(&q, &[0.0, 0.0], &[0.0, 0.0], 0.0, &[1.0, 0.0]),
            5.0
        );
    }

    #[test]
    fn cost_quadrature() {
        let grid = Grid::new(0.0, 2.0, 7).unwrap();
        let zero = Trajectory::from_fn(grid, 1, |_| vec![0.0], |_| vec![0.0], None).unwrap();
        assert_eq!(cost_of(&zero), 0.0);
        let c = Trajectory::from_fn(grid, 1, |_| vec![1.5], |_| vec![0.0], None).unwrap();
        assert!((cost_of(&c) - 4.5).abs() <= 1e-14);
        let grid = Grid::new(0.0, 1.0, 100).unwrap();
        let lin = Trajectory::from_fn(grid, 1, |t| vec![t], |_| vec![1.0], None).unwrap();
        assert!((cost_of(&lin) - 1.0 / 3.0).abs() <= 1e-10);
    }

    #[test]
    fn scalar_integrator_closed_form() {
        let (a, horizon) = (3.0, 2.0);
        let prob = integrator_problem(horizon, a);
        let grid = Grid::new(0.0, horizon, 50).unwrap();
        let lift = integrate_extremal(&prob, 0.0, &[2.0 * a / horizon], None, &grid).unwrap();
        assert!((lift.terminal_state()[0] - a).abs() <= 1e-12);
        assert!((lift.cost - a * a / horizon).abs() <= 1e-12);
        for i in 0..=grid.steps() {
            assert!((lift.control.node(i)[0] - a / horizon).abs() <= 1e-14);
            assert!((lift.adjoint.node(i)[0] - 2.0 * a / horizon).abs() <= 1e-14);
        }
    }

    #[test]
    fn zero_adjoint_gives_free_flow() {
        let prob = rendezvous_reference(1.0);
        let grid = Grid::new(0.0, prob.horizon, 400).unwrap();
        let lift = integrate_extremal(&prob, 0.0, &[0.0; 4], None, &grid).unwrap();
        for i in 0..=grid.steps() {
            assert_eq!(lift.control.node(i)[0], 0.0);
            assert!(lift.adjoint.node(i).iter().all(|&v| v == 0.0));
        }
        // delta stays at its initial value, heading grows linearly
        let t = prob.horizon;
        let theta = std::f64::consts::FRAC_PI_4 + 100.0 * 5e-4 * t;
        assert!((lift.terminal_state()[2] - theta).abs() <= 1e-12);
    }

    #[test]
    fn missing_guess_is_an_error() {
        let prob = rendezvous_reference(4.0);
        let grid = Grid::aligned(prob.horizon, 2.0, 0.01).unwrap();
        let res = integrate_extremal(&prob, 2.0, &[0.0; 4], None, &grid);
        assert!(matches!(res, Err(SolverError::MissingGuess { .. })));
    }

    #[test]
    fn control_nodes_follow_law() {
        let prob = rendezvous_reference(4.0);
        let grid = Grid::aligned(prob.horizon, 2.0, 0.019).unwrap();
        let p0 = [-1.4e-8, -1.0e-8, 2.9e-6, 2.9e-4];
        let base = integrate_extremal(&prob, 0.0, &p0, None, &grid).unwrap();
        let lift = integrate_extremal(&prob, 2.0, &p0, Some(&base.adjoint), &grid).unwrap();
        for i in 0..=grid.steps() {
            let u = control_law(lift.state.node(i), lift.adjoint.node(i), &prob.f2);
            assert!((lift.control.node(i)[0] - u).abs() <= 1e-12);
        }
        assert!(lift.cost >= 0.0);
    }
}
