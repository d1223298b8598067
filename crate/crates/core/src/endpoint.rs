//! Linearization of the end-point mapping `u -> x(T)`.
//!
//! The derivative in the direction `v` is `int_0^T X(T, s) f2(x(s)) v(s) ds`,
//! where `X(., s)` solves the matrix delay equation
//!
//! ```text
//! X'(t, s) = A1(t) X(t, s) + A2(t) X(t - tau, s),   X(s, s) = I,  X(t, s) = 0 for t < s
//! A1 = Df0(x(t)) + u(t) Df2(x(t)),   A2 = Df1(x(t - tau))
//! ```
//!
//! The delayed system has no adjoint shortcut giving every `X(T, s)` in one
//! sweep, so `X(T, s)` is obtained by forward solves from a subsampled set of
//! anchors `s` and integrated with Simpson's rule on that subgrid.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{invalid, Result};
use crate::extremal::ExtremalLift;
use crate::integrate::{integrate_dde, integrate_dde_from, DelayRhs, Grid, History, Trajectory};
use crate::problem::DelayedOcp;

/// Default cap on the number of anchor solves.
pub const MAX_ANCHORS: usize = 200;

/// `X(t, s)` for a fixed anchor `s`, on `[s, T]`, stored row-major.
#[derive(Clone, Debug)]
pub struct TransitionTrajectory {
    anchor: f64,
    n: usize,
    matrix: Option<Trajectory>,
}

impl TransitionTrajectory {
    pub fn anchor(&self) -> f64 {
        self.anchor
    }

    pub fn trajectory(&self) -> Option<&Trajectory> {
        self.matrix.as_ref()
    }

    /// `X(t, s)`: zero before the anchor, identity at it.
    pub fn at(&self, t: f64) -> Result<DMatrix<f64>> {
        let n = self.n;
        match &self.matrix {
            _ if t < self.anchor => Ok(DMatrix::zeros(n, n)),
            None => Ok(DMatrix::identity(n, n)),
            Some(m) => Ok(DMatrix::from_row_slice(n, n, &m.sample(t)?)),
        }
    }

    pub fn terminal(&self) -> DMatrix<f64> {
        match &self.matrix {
            None => DMatrix::identity(self.n, self.n),
            Some(m) => DMatrix::from_row_slice(self.n, self.n, m.last()),
        }
    }
}

struct VariationalRhs<'a> {
    problem: &'a DelayedOcp,
    tau: f64,
    state: &'a Trajectory,
    control: &'a Trajectory,
    x: Vec<f64>,
    xd: Vec<f64>,
    u: [f64; 1],
    a1: Vec<f64>,
    a2: Vec<f64>,
    scratch: Vec<f64>,
}

impl DelayRhs for VariationalRhs<'_> {
    fn eval(&mut self, t: f64, _segment: usize, mat: &[f64], delayed: &[f64], out: &mut [f64]) {
        let n = self.problem.n;
        self.state
            .sample_into(t, &mut self.x)
            .expect("state covers [0, T]");
        self.control
            .sample_into(t, &mut self.u)
            .expect("control covers [0, T]");
        self.state
            .sample_into(t - self.tau, &mut self.xd)
            .expect("state history covers [-M, 0]");
        self.problem.f0.jacobian_into(&self.x, &mut self.a1);
        self.problem.f2.jacobian_into(&self.x, &mut self.scratch);
        for (a, b) in self.a1.iter_mut().zip(&self.scratch) {
            *a += self.u[0] * b;
        }
        self.problem.f1.jacobian_into(&self.xd, &mut self.a2);
        for i in 0..n {
            for j in 0..n {
                let mut acc = 0.0;
                for k in 0..n {
                    acc += self.a1[i * n + k] * mat[k * n + j]
                        + self.a2[i * n + k] * delayed[k * n + j];
                }
                out[i * n + j] = acc;
            }
        }
    }
}

/// Solves the variational system from the anchor `s` (a node of `grid`).
pub fn integrate_variational(
    problem: &DelayedOcp,
    tau: f64,
    state: &Trajectory,
    control: &Trajectory,
    s: f64,
    grid: &Grid,
) -> Result<TransitionTrajectory> {
    let n = problem.n;
    let i = grid
        .node_index(s)
        .ok_or_else(|| invalid("s", format!("anchor {s} is not a grid node")))?;
    if i == grid.steps() {
        return Ok(TransitionTrajectory {
            anchor: s,
            n,
            matrix: None,
        });
    }
    let tail = grid.tail(i)?;
    let mut rhs = VariationalRhs {
        problem,
        tau,
        state,
        control,
        x: vec![0.0; n],
        xd: vec![0.0; n],
        u: [0.0],
        a1: vec![0.0; n * n],
        a2: vec![0.0; n * n],
        scratch: vec![0.0; n * n],
    };
    let history = History::constant(tail.t0() - tau, vec![0.0; n * n]);
    let identity: Vec<f64> = (0..n * n)
        .map(|k| if k % (n + 1) == 0 { 1.0 } else { 0.0 })
        .collect();
    let matrix = integrate_dde_from(&mut rhs, n * n, tau, &history, &identity, &tail)?;
    Ok(TransitionTrajectory {
        anchor: tail.t0(),
        n,
        matrix: Some(matrix),
    })
}

/// Terminal transition matrices `X(T, s_k)` on an anchor subgrid, with
/// quadrature weights, reusable across directions.
#[derive(Clone, Debug)]
pub struct TransitionFamily {
    pub anchors: Vec<f64>,
    pub weights: Vec<f64>,
    /// `X(T, s_k) f2(x(s_k))`.
    pub responses: Vec<DVector<f64>>,
}

impl TransitionFamily {
    pub fn derivative(&self, v: &Trajectory) -> Result<Vec<f64>> {
        let n = self.responses.first().map_or(0, |r| r.len());
        let mut acc = DVector::zeros(n);
        for ((s, w), r) in self.anchors.iter().zip(&self.weights).zip(&self.responses) {
            acc += r * (w * v.sample(*s)?[0]);
        }
        Ok(acc.iter().copied().collect())
    }

    pub fn gramian(&self) -> DMatrix<f64> {
        let n = self.responses.first().map_or(0, |r| r.len());
        let mut g = DMatrix::zeros(n, n);
        for (w, r) in self.weights.iter().zip(&self.responses) {
            g += (r * r.transpose()) * *w;
        }
        g
    }
}

/// Anchor stride: the smallest divisor `k` of `steps` leaving an even number
/// of at most `max_anchors` intervals (Simpson), if any.
fn anchor_stride(steps: usize, max_anchors: usize) -> Option<usize> {
    let min = steps.div_ceil(max_anchors.max(2));
    (min.max(1)..=steps / 2).find(|&k| steps.is_multiple_of(k) && (steps / k).is_multiple_of(2))
}

pub fn transition_family(
    problem: &DelayedOcp,
    lift: &ExtremalLift,
    max_anchors: usize,
) -> Result<TransitionFamily> {
    let grid = *lift.grid();
    let steps = grid.steps();
    let (indices, simpson): (Vec<usize>, bool) = match anchor_stride(steps, max_anchors) {
        Some(k) => ((0..=steps).step_by(k).collect(), true),
        None => {
            let k = steps.div_ceil(max_anchors.max(1)).max(1);
            let mut idx: Vec<usize> = (0..steps).step_by(k).collect();
            idx.push(steps);
            (idx, false)
        }
    };
    let anchors: Vec<f64> = indices.iter().map(|&i| grid.node(i)).collect();
    let weights = if simpson {
        let h = anchors[1] - anchors[0];
        let m = anchors.len() - 1;
        (0..=m)
            .map(|j| {
                h / 3.0
                    * if j == 0 || j == m {
                        1.0
                    } else if j % 2 == 1 {
                        4.0
                    } else {
                        2.0
                    }
            })
            .collect()
    } else {
        trapezoid_weights(&anchors)
    };
    let mut responses = Vec::with_capacity(anchors.len());
    for (&i, &s) in indices.iter().zip(&anchors) {
        let x = lift.state.node(i);
        let f2x = DVector::from_vec(problem.f2.eval(x));
        let tr = integrate_variational(problem, lift.tau, &lift.state, &lift.control, s, &grid)?;
        responses.push(tr.terminal() * f2x);
    }
    Ok(TransitionFamily {
        anchors,
        weights,
        responses,
    })
}

fn trapezoid_weights(nodes: &[f64]) -> Vec<f64> {
    let m = nodes.len();
    let mut w = vec![0.0; m];
    for j in 0..m.saturating_sub(1) {
        let h = nodes[j + 1] - nodes[j];
        w[j] += 0.5 * h;
        w[j + 1] += 0.5 * h;
    }
    w
}

/// Directional derivative of `u -> x(T)` at the lift's control, in the
/// direction `v` (a scalar trajectory on `[0, T]`).
pub fn endpoint_derivative(
    problem: &DelayedOcp,
    lift: &ExtremalLift,
    v: &Trajectory,
) -> Result<Vec<f64>> {
    transition_family(problem, lift, MAX_ANCHORS)?.derivative(v)
}

/// Terminal state reached by the open-loop control `u`.
pub fn endpoint_map<U>(problem: &DelayedOcp, tau: f64, control: U, grid: &Grid) -> Result<Vec<f64>>
where
    U: Fn(f64) -> f64,
{
    let n = problem.n;
    let mut f0x = vec![0.0; n];
    let mut f1d = vec![0.0; n];
    let mut f2x = vec![0.0; n];
    let mut rhs = |t: f64, x: &[f64], xd: &[f64], out: &mut [f64]| {
        problem.f0.eval_into(x, &mut f0x);
        problem.f1.eval_into(xd, &mut f1d);
        problem.f2.eval_into(x, &mut f2x);
        let u = control(t);
        for i in 0..n {
            out[i] = f0x[i] + f1d[i] + u * f2x[i];
        }
    };
    let traj = integrate_dde(&mut rhs, n, tau, &problem.history, grid)?;
    Ok(traj.last().to_vec())
}

#[derive(Clone, Debug)]
pub struct GramianReport {
    pub tau: f64,
    pub matrix: DMatrix<f64>,
    pub min_eigenvalue: f64,
    pub trace: f64,
    /// Smallest eigenvalue of `D^{-1/2} G D^{-1/2}` with `D = diag(G)`, so
    /// that state components in different units weigh equally. Zero when a
    /// diagonal entry vanishes.
    pub scaled_min_eigenvalue: f64,
    /// `scaled_min_eigenvalue > 1e-10` (the scaled trace over `n` is one).
    pub surjective: bool,
}

impl GramianReport {
    pub fn from_matrix(tau: f64, matrix: DMatrix<f64>) -> Self {
        let n = matrix.nrows();
        let sym = (&matrix + matrix.transpose()) * 0.5;
        let min_of = |m: DMatrix<f64>| {
            SymmetricEigen::new(m)
                .eigenvalues
                .iter()
                .copied()
                .fold(f64::INFINITY, f64::min)
        };
        let min_eigenvalue = min_of(sym.clone());
        let trace = matrix.trace();
        let diag: Vec<f64> = (0..n).map(|i| sym[(i, i)]).collect();
        let scaled_min_eigenvalue = if n > 0 && diag.iter().all(|&d| d > 0.0) {
            let mut scaled = sym;
            for i in 0..n {
                for j in 0..n {
                    scaled[(i, j)] /= (diag[i] * diag[j]).sqrt();
                }
            }
            min_of(scaled)
        } else {
            0.0
        };
        let surjective = n > 0 && scaled_min_eigenvalue > 1e-10;
        Self {
            tau,
            matrix,
            min_eigenvalue,
            trace,
            scaled_min_eigenvalue,
            surjective,
        }
    }
}

/// `G = int_0^T X(T,s) f2 f2^T X(T,s)^T ds` along the lift; positive
/// definiteness certifies that the end-point derivative is onto.
pub fn controllability_gramian(problem: &DelayedOcp, lift: &ExtremalLift) -> Result<GramianReport> {
    let family = transition_family(problem, lift, MAX_ANCHORS)?;
    Ok(GramianReport::from_matrix(lift.tau, family.gramian()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::extremal::integrate_extremal;
    use crate::problem::SmoothField;

    fn scalar(a: f64, f2: f64) -> DelayedOcp {
        DelayedOcp {
            n: 1,
            f0: SmoothField::linear(1, vec![a]),
            f1: SmoothField::zero(1),
            f2: SmoothField::constant(vec![f2]),
            history: History::constant(-1.0, vec![1.0]),
            delay_bound: 1.0,
            horizon: 2.0,
            target: vec![0.0],
        }
    }

    #[test]
    fn scalar_linear_transition() {
        let prob = scalar(0.7, 1.0);
        let grid = Grid::new(0.0, 2.0, 200).unwrap();
        let lift = integrate_extremal(&prob, 0.0, &[0.3], None, &grid).unwrap();
        let s = grid.node(50);
        let tr = integrate_variational(&prob, 0.0, &lift.state, &lift.control, s, &grid).unwrap();
        assert!((tr.terminal()[(0, 0)] - (0.7f64 * (2.0 - s)).exp()).abs() <= 1e-8);
        assert_eq!(tr.at(s - 0.1).unwrap()[(0, 0)], 0.0);
        assert_eq!(tr.at(s).unwrap()[(0, 0)], 1.0);
        let end =
            integrate_variational(&prob, 0.0, &lift.state, &lift.control, 2.0, &grid).unwrap();
        assert_eq!(end.terminal()[(0, 0)], 1.0);
    }

    #[test]
    fn constant_fields_give_identity() {
        let prob = DelayedOcp {
            n: 2,
            f0: SmoothField::constant(vec![1.0, 0.0]),
            f1: SmoothField::constant(vec![0.0, 2.0]),
            f2: SmoothField::constant(vec![0.0, 1.0]),
            history: History::constant(-1.0, vec![0.0, 0.0]),
            delay_bound: 1.0,
            horizon: 1.0,
            target: vec![0.0, 0.0],
        };
        let grid = Grid::aligned(1.0, 0.25, 0.01).unwrap();
        let lift0 = integrate_extremal(&prob, 0.0, &[0.1, 0.2], None, &grid).unwrap();
        let lift =
            integrate_extremal(&prob, 0.25, &[0.1, 0.2], Some(&lift0.adjoint), &grid).unwrap();
        let tr = integrate_variational(
            &prob,
            0.25,
            &lift.state,
            &lift.control,
            grid.node(10),
            &grid,
        )
        .unwrap();
        let id = DMatrix::<f64>::identity(2, 2);
        for t in [grid.node(10), 0.5, 0.77, 1.0] {
            assert_eq!(tr.at(t).unwrap(), id);
        }
    }

    #[test]
    fn scalar_integrator_gramian_and_derivative() {
        let mut prob = scalar(0.0, 1.0);
        prob.history = History::constant(-1.0, vec![0.0]);
        let grid = Grid::new(0.0, 2.0, 400).unwrap();
        let lift = integrate_extremal(&prob, 0.0, &[1.0], None, &grid).unwrap();
        let report = controllability_gramian(&prob, &lift).unwrap();
        assert!((report.matrix[(0, 0)] - 2.0).abs() <= 1e-12);
        assert!(report.surjective);
        let v = Trajectory::from_fn(grid, 1, |t| vec![t * t], |t| vec![2.0 * t], None).unwrap();
        let d = endpoint_derivative(&prob, &lift, &v).unwrap();
        assert!((d[0] - 8.0 / 3.0).abs() <= 1e-12);
        let zero = Trajectory::from_fn(grid, 1, |_| vec![0.0], |_| vec![0.0], None).unwrap();
        assert_eq!(endpoint_derivative(&prob, &lift, &zero).unwrap(), vec![0.0]);
    }

    #[test]
    fn no_control_direction_is_not_surjective() {
        let prob = scalar(0.5, 0.0);
        let grid = Grid::new(0.0, 2.0, 100).unwrap();
        let lift = integrate_extremal(&prob, 0.0, &[0.0], None, &grid).unwrap();
        let report = controllability_gramian(&prob, &lift).unwrap();
        assert_eq!(report.min_eigenvalue, 0.0);
        assert!(!report.surjective);
    }

    #[test]
    fn scaled_check_ignores_units() {
        // full rank, but with components in wildly different units
        let g = DMatrix::from_row_slice(2, 2, &[1e12, 0.0, 0.0, 1e-2]);
        let report = GramianReport::from_matrix(0.0, g);
        assert!(report.min_eigenvalue < 1e-10 * report.trace);
        assert!((report.scaled_min_eigenvalue - 1.0).abs() <= 1e-12);
        assert!(report.surjective);

        let rank_one = DMatrix::from_row_slice(2, 2, &[4.0, 2.0, 2.0, 1.0]);
        let report = GramianReport::from_matrix(0.0, rank_one);
        assert!(report.scaled_min_eigenvalue.abs() <= 1e-12);
        assert!(!report.surjective);

        let report = GramianReport::from_matrix(0.0, DMatrix::zeros(3, 3));
        assert_eq!(report.scaled_min_eigenvalue, 0.0);
        assert!(!report.surjective);
    }

    #[test]
    fn stride_choice() {
        assert_eq!(anchor_stride(2000, 200), Some(10));
        assert_eq!(anchor_stride(2090, 200), Some(11));
        assert_eq!(anchor_stride(100, 200), Some(1));
        assert_eq!(anchor_stride(2003, 200), None);
    }
}
