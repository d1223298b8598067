//! Fixed-step RK4 for delay differential equations with cubic Hermite dense
//! output.
//!
//! Delayed arguments are looked up on already-completed segments (method of
//! steps), which requires `delay >= h` whenever the delay is positive. Grids
//! built by [`Grid::aligned`] make the delay an integer multiple of the step,
//! so every propagated breakpoint `t0 + k * delay` is a grid node.

use std::fmt;
use std::sync::Arc;

use crate::error::{Result, SolverError};

/// Uniform time grid `t0, t0 + h, ..., tf` with `steps` intervals.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Grid {
    t0: f64,
    tf: f64,
    h: f64,
    steps: usize,
}

impl Grid {
    pub fn new(t0: f64, tf: f64, steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(crate::error::invalid(
                "steps",
                "grid needs at least one step",
            ));
        }
        if !(t0.is_finite() && tf.is_finite() && tf > t0) {
            return Err(crate::error::invalid(
                "tf",
                format!("grid end {tf} must be finite and exceed start {t0}"),
            ));
        }
        let h = (tf - t0) / steps as f64;
        debug_assert!((t0 + steps as f64 * h - tf).abs() <= 1e-12 * tf.abs().max(1.0));
        Ok(Self { t0, tf, h, steps })
    }

    /// Grid on `[0, horizon]` with step close to `base_h` (never larger than
    /// `base_h`, up to rounding) such that both `horizon` and `delay` are
    /// integer multiples of the step. The number of steps is increased from
    /// `ceil(horizon / base_h)` until the delay lands on a node.
    pub fn aligned(horizon: f64, delay: f64, base_h: f64) -> Result<Self> {
        Self::aligned_all(horizon, &[delay], base_h)
    }

    /// As [`Grid::aligned`], with every delay in `delays` on a node.
    pub fn aligned_all(horizon: f64, delays: &[f64], base_h: f64) -> Result<Self> {
        let start = Self::base_steps(horizon, base_h)?;
        let limit = start.saturating_mul(1024).max(start + 1_000_000);
        Self::aligned_within(horizon, delays, base_h, limit)
    }

    fn base_steps(horizon: f64, base_h: f64) -> Result<usize> {
        if !(base_h > 0.0) {
            return Err(crate::error::invalid("base_h", "step must be positive"));
        }
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(crate::error::invalid(
                "horizon",
                "must be positive and finite",
            ));
        }
        Ok(((horizon / base_h) * (1.0 - 1e-12)).ceil().max(1.0) as usize)
    }

    /// Searches step counts from `ceil(horizon / base_h)` up to `limit`.
    pub(crate) fn aligned_within(
        horizon: f64,
        delays: &[f64],
        base_h: f64,
        limit: usize,
    ) -> Result<Self> {
        let start = Self::base_steps(horizon, base_h)?;
        if let Some(&bad) = delays.iter().find(|d| !(**d >= 0.0 && d.is_finite())) {
            return Err(crate::error::invalid(
                "delay",
                format!("delay must be non-negative, got {bad}"),
            ));
        }
        let fits = |steps: usize| {
            let h = horizon / steps as f64;
            delays.iter().all(|&d| {
                let m = (d / h).round();
                d == 0.0 || (m >= 1.0 && (m * h - d).abs() <= 1e-9 * h)
            })
        };
        for steps in start..=limit.max(start) {
            if fits(steps) {
                return Self::new(0.0, horizon, steps);
            }
        }
        Err(SolverError::GridAlignment {
            horizon,
            delay: delays.iter().copied().fold(0.0, f64::max),
            base_h,
        })
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn tf(&self) -> f64 {
        self.tf
    }

    pub fn step(&self) -> f64 {
        self.h
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Time of node `i`. The last node is `tf` exactly.
    #[inline]
    pub fn node(&self, i: usize) -> f64 {
        if i == self.steps {
            self.tf
        } else {
            self.t0 + i as f64 * self.h
        }
    }

    pub fn nodes(&self) -> impl Iterator<Item = f64> + '_ {
        (0..=self.steps).map(|i| self.node(i))
    }

    /// Number of steps spanned by `delay`, if it is (numerically) a multiple
    /// of the step.
    pub fn delay_steps(&self, delay: f64) -> Option<usize> {
        let m = (delay / self.h).round();
        ((m * self.h - delay).abs() <= 1e-9 * delay.max(self.h)).then_some(m as usize)
    }

    /// Index of the node at `t`, if `t` is within rounding of a node.
    pub fn node_index(&self, t: f64) -> Option<usize> {
        let s = ((t - self.t0) / self.h).round();
        if s < 0.0 || s > self.steps as f64 {
            return None;
        }
        let i = s as usize;
        ((self.node(i) - t).abs() <= 1e-9 * self.h).then_some(i)
    }

    /// Same span and step count, restricted to start at node `i`.
    pub fn tail(&self, i: usize) -> Result<Self> {
        if i >= self.steps {
            return Err(crate::error::invalid(
                "anchor",
                "tail grid needs at least one step",
            ));
        }
        Ok(Self {
            t0: self.node(i),
            tf: self.tf,
            h: self.h,
            steps: self.steps - i,
        })
    }
}

type HistoryFn = Arc<dyn Fn(f64, &mut [f64]) + Send + Sync>;

/// Prescribed values of a trajectory before its grid starts, on `[start, t0]`.
#[derive(Clone)]
pub struct History {
    start: f64,
    dim: usize,
    func: HistoryFn,
}

impl History {
    pub fn new<F>(start: f64, dim: usize, func: F) -> Self
    where
        F: Fn(f64, &mut [f64]) + Send + Sync + 'static,
    {
        Self {
            start,
            dim,
            func: Arc::new(func),
        }
    }

    pub fn constant(start: f64, value: Vec<f64>) -> Self {
        let dim = value.len();
        Self::new(start, dim, move |_, out| out.copy_from_slice(&value))
    }

    pub fn start(&self) -> f64 {
        self.start
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn eval_into(&self, t: f64, out: &mut [f64]) {
        (self.func)(t, out)
    }

    pub fn eval(&self, t: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.eval_into(t, &mut out);
        out
    }
}

impl fmt::Debug for History {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("History")
            .field("start", &self.start)
            .field("dim", &self.dim)
            .finish_non_exhaustive()
    }
}

/// Vector function on a grid with cubic Hermite dense output.
///
/// Node derivatives are right-sided (the first RK stage of the step leaving
/// the node). Where the derivative jumps at an interior node, the left-sided
/// value is kept in a sparse side table so the segment ending there still
/// interpolates with its own derivative.
#[derive(Clone, Debug)]
pub struct Trajectory {
    grid: Grid,
    dim: usize,
    values: Vec<f64>,
    derivs: Vec<f64>,
    left_derivs: Vec<(usize, Vec<f64>)>,
    history: Option<History>,
}

impl Trajectory {
    /// Builds a trajectory from flat node data (`(steps + 1) * dim` values
    /// each for values and derivatives).
    pub fn from_nodes(
        grid: Grid,
        dim: usize,
        values: Vec<f64>,
        derivs: Vec<f64>,
        history: Option<History>,
    ) -> Result<Self> {
        let expected = (grid.steps() + 1) * dim;
        for len in [values.len(), derivs.len()] {
            if len != expected {
                return Err(SolverError::Dimension { expected, got: len });
            }
        }
        if let Some(h) = &history {
            if h.dim() != dim {
                return Err(SolverError::Dimension {
                    expected: dim,
                    got: h.dim(),
                });
            }
        }
        Ok(Self {
            grid,
            dim,
            values,
            derivs,
            left_derivs: Vec::new(),
            history,
        })
    }

    /// Samples `f` and its derivative `df` at the nodes of `grid`.
    pub fn from_fn<F, D>(
        grid: Grid,
        dim: usize,
        f: F,
        df: D,
        history: Option<History>,
    ) -> Result<Self>
    where
        F: Fn(f64) -> Vec<f64>,
        D: Fn(f64) -> Vec<f64>,
    {
        let mut values = Vec::with_capacity((grid.steps() + 1) * dim);
        let mut derivs = Vec::with_capacity((grid.steps() + 1) * dim);
        for t in grid.nodes() {
            values.extend(f(t));
            derivs.extend(df(t));
        }
        Self::from_nodes(grid, dim, values, derivs, history)
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn history(&self) -> Option<&History> {
        self.history.as_ref()
    }

    pub fn with_history(mut self, history: Option<History>) -> Self {
        self.history = history;
        self
    }

    pub fn node(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn deriv(&self, i: usize) -> &[f64] {
        &self.derivs[i * self.dim..(i + 1) * self.dim]
    }

    /// Derivative at node `i` as seen from the segment ending there.
    pub fn left_deriv(&self, i: usize) -> &[f64] {
        left_deriv(&self.left_derivs, &self.derivs, self.dim, i)
    }

    pub fn first(&self) -> &[f64] {
        self.node(0)
    }

    pub fn last(&self) -> &[f64] {
        self.node(self.grid.steps())
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Lowest time `sample` accepts.
    pub fn lower_bound(&self) -> f64 {
        self.history
            .as_ref()
            .map_or(self.grid.t0(), |h| h.start().min(self.grid.t0()))
    }

    pub fn sample(&self, t: f64) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.dim];
        self.sample_into(t, &mut out)?;
        Ok(out)
    }

    pub fn sample_into(&self, t: f64, out: &mut [f64]) -> Result<()> {
        let grid = &self.grid;
        let tol = 1e-12 * grid.tf().abs().max(1.0);
        if t < grid.t0() {
            match &self.history {
                Some(h) if t >= h.start() - tol => {
                    h.eval_into(t, out);
                    return Ok(());
                }
                _ => {
                    if t >= grid.t0() - tol {
                        out.copy_from_slice(self.first());
                        return Ok(());
                    }
                    return Err(SolverError::OutOfDomain {
                        t,
                        lower: self.lower_bound(),
                        upper: grid.tf(),
                    });
                }
            }
        }
        if t > grid.tf() {
            if t <= grid.tf() + tol {
                out.copy_from_slice(self.last());
                return Ok(());
            }
            return Err(SolverError::OutOfDomain {
                t,
                lower: self.lower_bound(),
                upper: grid.tf(),
            });
        }
        hermite_into(
            grid,
            self.dim,
            &self.values,
            &self.derivs,
            &self.left_derivs,
            grid.steps(),
            t,
            out,
        );
        Ok(())
    }

    /// Copies out components `range` into a new trajectory.
    pub fn select(&self, range: std::ops::Range<usize>, history: Option<History>) -> Result<Self> {
        let d = self.dim;
        let pick = |src: &[f64]| -> Vec<f64> {
            src.chunks_exact(d)
                .flat_map(|c| c[range.clone()].iter().copied())
                .collect()
        };
        let mut out = Self::from_nodes(
            self.grid,
            range.len(),
            pick(&self.values),
            pick(&self.derivs),
            history,
        )?;
        out.left_derivs = self
            .left_derivs
            .iter()
            .map(|(i, v)| (*i, v[range.clone()].to_vec()))
            .collect();
        Ok(out)
    }

    /// Sup-norm distance to `other` over `[t0, tf]` of this trajectory,
    /// evaluated at the nodes of both grids (where inside the common span).
    pub fn sup_distance(&self, other: &Trajectory) -> Result<f64> {
        let mut buf = vec![0.0; self.dim];
        let mut worst: f64 = 0.0;
        for i in 0..=self.grid.steps() {
            other.sample_into(self.grid.node(i), &mut buf)?;
            for (a, b) in self.node(i).iter().zip(&buf) {
                worst = worst.max((a - b).abs());
            }
        }
        for i in 0..=other.grid.steps() {
            let t = other.grid.node(i);
            if t < self.grid.t0() || t > self.grid.tf() {
                continue;
            }
            self.sample_into(t, &mut buf)?;
            for (a, b) in other.node(i).iter().zip(&buf) {
                worst = worst.max((a - b).abs());
            }
        }
        Ok(worst)
    }

    pub(crate) fn left_jumps(&self) -> &[(usize, Vec<f64>)] {
        &self.left_derivs
    }

    pub(crate) fn set_left_jumps(&mut self, jumps: Vec<(usize, Vec<f64>)>) {
        self.left_derivs = jumps;
    }

    /// Per-component sup norms over the grid nodes.
    pub fn component_sup(&self) -> Vec<f64> {
        let mut sup = vec![0.0f64; self.dim];
        for chunk in self.values.chunks_exact(self.dim) {
            for (s, v) in sup.iter_mut().zip(chunk) {
                *s = s.max(v.abs());
            }
        }
        sup
    }
}

fn left_deriv<'a>(
    left: &'a [(usize, Vec<f64>)],
    derivs: &'a [f64],
    dim: usize,
    i: usize,
) -> &'a [f64] {
    left.iter()
        .find(|(j, _)| *j == i)
        .map_or(&derivs[i * dim..(i + 1) * dim], |(_, v)| v.as_slice())
}

/// Hermite evaluation using nodes `0..=last` only.
#[allow(clippy::too_many_arguments)]
fn hermite_into(
    grid: &Grid,
    dim: usize,
    values: &[f64],
    derivs: &[f64],
    left: &[(usize, Vec<f64>)],
    last: usize,
    t: f64,
    out: &mut [f64],
) {
    let h = grid.step();
    let s = (t - grid.t0()) / h;
    let nearest = s.round();
    if nearest >= 0.0 && nearest <= last as f64 {
        let k = nearest as usize;
        if grid.node(k) == t {
            out.copy_from_slice(&values[k * dim..(k + 1) * dim]);
            return;
        }
    }
    if last == 0 || s >= last as f64 {
        out.copy_from_slice(&values[last * dim..(last + 1) * dim]);
        return;
    }
    let i = (s.floor().max(0.0) as usize).min(last - 1);
    let theta = (t - grid.node(i)) / h;
    let th2 = theta * theta;
    let th3 = th2 * theta;
    let h00 = 2.0 * th3 - 3.0 * th2 + 1.0;
    let h10 = (th3 - 2.0 * th2 + theta) * h;
    let h01 = -2.0 * th3 + 3.0 * th2;
    let h11 = (th3 - th2) * h;
    let y0 = &values[i * dim..(i + 1) * dim];
    let y1 = &values[(i + 1) * dim..(i + 2) * dim];
    let d0 = &derivs[i * dim..(i + 1) * dim];
    let d1 = left_deriv(left, derivs, dim, i + 1);
    for c in 0..dim {
        out[c] = h00 * y0[c] + h10 * d0[c] + h01 * y1[c] + h11 * d1[c];
    }
}

/// Right-hand side of a delay equation `z'(t) = F(t, z(t), z(t - delay))`.
///
/// `segment` is the index of the step being taken, which lets piecewise
/// right-hand sides pick the correct branch at a switching node.
pub trait DelayRhs {
    fn eval(&mut self, t: f64, segment: usize, current: &[f64], delayed: &[f64], out: &mut [f64]);

    /// Interior times where the right-hand side switches branches; the
    /// integrator records one-sided derivatives there.
    fn breakpoints(&self) -> Vec<f64> {
        Vec::new()
    }
}

impl<F> DelayRhs for F
where
    F: FnMut(f64, &[f64], &[f64], &mut [f64]),
{
    fn eval(&mut self, t: f64, _segment: usize, current: &[f64], delayed: &[f64], out: &mut [f64]) {
        self(t, current, delayed, out)
    }
}

struct Partial<'a> {
    grid: &'a Grid,
    dim: usize,
    delay: f64,
    history: &'a History,
    values: &'a [f64],
    derivs: &'a [f64],
    left: &'a [(usize, Vec<f64>)],
}

impl Partial<'_> {
    /// Delayed argument for a stage of `segment` at time `t`, when nodes
    /// `0..=last` are complete.
    fn delayed(&self, segment: usize, last: usize, t: f64, out: &mut [f64]) -> Result<()> {
        let grid = self.grid;
        let eps = 1e-9 * grid.step();
        let q = t - self.delay;
        // a whole step whose shifted interval ends at t0 reads the history,
        // including its right endpoint (left limit at the breakpoint)
        let step_end = grid.node(segment + 1) - self.delay;
        if step_end <= grid.t0() + eps || q < grid.t0() {
            if q < self.history.start() - eps {
                return Err(SolverError::OutOfDomain {
                    t: q,
                    lower: self.history.start(),
                    upper: grid.tf(),
                });
            }
            self.history.eval_into(q.max(self.history.start()), out);
            return Ok(());
        }
        let last_t = grid.node(last);
        if q > last_t + eps {
            return Err(SolverError::DelayBelowStep {
                delay: self.delay,
                step: grid.step(),
            });
        }
        hermite_into(
            grid,
            self.dim,
            self.values,
            self.derivs,
            self.left,
            last,
            q.min(last_t),
            out,
        );
        Ok(())
    }
}

/// Integrates `z'(t) = rhs(t, z(t), z(t - delay))` with classical RK4 on
/// `grid`, taking `z = history` before `grid.t0()` and `z(t0) = history(t0)`.
///
/// With `delay == 0` the delayed argument is the current stage value.
pub fn integrate_dde<R: DelayRhs + ?Sized>(
    rhs: &mut R,
    dim: usize,
    delay: f64,
    history: &History,
    grid: &Grid,
) -> Result<Trajectory> {
    let initial = history.eval(grid.t0());
    integrate_dde_from(rhs, dim, delay, history, &initial, grid)
}

/// As [`integrate_dde`], but starting from `initial` instead of
/// `history(t0)`, for solutions that jump at the initial time.
pub fn integrate_dde_from<R: DelayRhs + ?Sized>(
    rhs: &mut R,
    dim: usize,
    delay: f64,
    history: &History,
    initial: &[f64],
    grid: &Grid,
) -> Result<Trajectory> {
    if initial.len() != dim {
        return Err(SolverError::Dimension {
            expected: dim,
            got: initial.len(),
        });
    }
    if history.dim() != dim {
        return Err(SolverError::Dimension {
            expected: dim,
            got: history.dim(),
        });
    }
    if !(delay >= 0.0) {
        return Err(crate::error::invalid("delay", "delay must be non-negative"));
    }
    if delay > 0.0 && delay < grid.step() * (1.0 - 1e-9) {
        return Err(SolverError::DelayBelowStep {
            delay,
            step: grid.step(),
        });
    }
    let n = grid.steps();
    let h = grid.step();
    let mut values = vec![0.0; (n + 1) * dim];
    let mut derivs = vec![0.0; (n + 1) * dim];
    let mut left: Vec<(usize, Vec<f64>)> = Vec::new();
    values[..dim].copy_from_slice(initial);
    if values[..dim].iter().any(|v| !v.is_finite()) {
        return Err(SolverError::Divergence { time: grid.t0() });
    }

    // switching nodes: user-declared plus the first delay breakpoint
    let mut breaks: Vec<usize> = rhs
        .breakpoints()
        .into_iter()
        .chain((delay > 0.0).then_some(grid.t0() + delay))
        .filter_map(|b| grid.node_index(b))
        .filter(|&i| i > 0 && i < n)
        .collect();
    breaks.sort_unstable();
    breaks.dedup();

    let mut stage = vec![0.0; dim];
    let mut delayed = vec![0.0; dim];
    let mut k1 = vec![0.0; dim];
    let mut k2 = vec![0.0; dim];
    let mut k3 = vec![0.0; dim];
    let mut k4 = vec![0.0; dim];

    let mut x = vec![0.0; dim];
    let mut next = vec![0.0; dim];
    for k in 0..n {
        let t = grid.node(k);
        x.copy_from_slice(&values[k * dim..(k + 1) * dim]);
        let partial = |values: &[f64],
                       derivs: &[f64],
                       left: &[(usize, Vec<f64>)],
                       last: usize,
                       ts: f64,
                       out: &mut [f64]| {
            Partial {
                grid,
                dim,
                delay,
                history,
                values,
                derivs,
                left,
            }
            .delayed(k, last, ts, out)
        };

        // k1 doubles as the right-sided node derivative
        if delay == 0.0 {
            rhs.eval(t, k, &x, &x, &mut k1);
        } else {
            partial(&values, &derivs, &left, k, t, &mut delayed)?;
            rhs.eval(t, k, &x, &delayed, &mut k1);
        }
        derivs[k * dim..(k + 1) * dim].copy_from_slice(&k1);

        for idx in 0..3 {
            let (dt, w) = if idx == 2 { (h, 1.0) } else { (0.5 * h, 0.5) };
            let prev = match idx {
                0 => &k1,
                1 => &k2,
                _ => &k3,
            };
            for c in 0..dim {
                stage[c] = x[c] + w * h * prev[c];
            }
            let ts = t + dt;
            if delay == 0.0 {
                delayed.copy_from_slice(&stage);
            } else {
                partial(&values, &derivs, &left, k, ts, &mut delayed)?;
            }
            let target = match idx {
                0 => &mut k2,
                1 => &mut k3,
                _ => &mut k4,
            };
            rhs.eval(ts, k, &stage, &delayed, target);
        }
        for c in 0..dim {
            next[c] = x[c] + h / 6.0 * (k1[c] + 2.0 * k2[c] + 2.0 * k3[c] + k4[c]);
        }
        if next.iter().any(|v| !v.is_finite()) {
            return Err(SolverError::Divergence {
                time: grid.node(k + 1),
            });
        }
        values[(k + 1) * dim..(k + 2) * dim].copy_from_slice(&next);

        // one-sided derivative at the end of this segment where needed
        let at_end = k + 1 == n;
        if at_end || breaks.binary_search(&(k + 1)).is_ok() {
            let t1 = grid.node(k + 1);
            let mut d = vec![0.0; dim];
            if delay == 0.0 {
                rhs.eval(t1, k, &next, &next, &mut d);
            } else {
                partial(&values, &derivs, &left, k, t1, &mut delayed)?;
                rhs.eval(t1, k, &next, &delayed, &mut d);
            }
            if at_end {
                derivs[n * dim..].copy_from_slice(&d);
            } else {
                left.push((k + 1, d));
            }
        }
    }
    let mut traj = Trajectory::from_nodes(*grid, dim, values, derivs, Some(history.clone()))?;
    traj.left_derivs = left;
    Ok(traj)
}
