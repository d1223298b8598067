//! Problem definitions for fixed-delay, single-input, control-affine optimal
//! control:
//!
//! ```text
//! x'(t) = f0(x(t)) + f1(x(t - tau)) + u(t) f2(x(t)),   x = phi on [-M, 0]
//! minimize  int_0^T u(t)^2 dt   subject to  x(T) = target
//! ```

use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Result};
use crate::integrate::History;

type FieldFn = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;

/// A smooth vector field `R^n -> R^n` together with its Jacobian.
///
/// Both closures write into caller-provided buffers. The Jacobian is stored
/// row-major: `jac[i * n + j] = d f_i / d x_j`.
#[derive(Clone)]
pub struct SmoothField {
    dim: usize,
    eval: FieldFn,
    jacobian: FieldFn,
}

impl SmoothField {
    pub fn new<E, J>(dim: usize, eval: E, jacobian: J) -> Self
    where
        E: Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
        J: Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
    {
        Self {
            dim,
            eval: Arc::new(eval),
            jacobian: Arc::new(jacobian),
        }
    }

    /// The identically zero field.
    pub fn zero(dim: usize) -> Self {
        Self::new(dim, |_, out| out.fill(0.0), |_, out| out.fill(0.0))
    }

    /// A constant field `x -> value`.
    pub fn constant(value: Vec<f64>) -> Self {
        let dim = value.len();
        Self::new(
            dim,
            move |_, out| out.copy_from_slice(&value),
            |_, out| out.fill(0.0),
        )
    }

    /// The linear field `x -> A x`, with `a` given row-major.
    pub fn linear(dim: usize, a: Vec<f64>) -> Self {
        assert_eq!(a.len(), dim * dim, "linear field matrix must be n x n");
        let a_eval = a.clone();
        Self::new(
            dim,
            move |x, out| {
                for (i, o) in out.iter_mut().enumerate() {
                    *o = (0..dim).map(|j| a_eval[i * dim + j] * x[j]).sum();
                }
            },
            move |_, out| out.copy_from_slice(&a),
        )
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        (self.eval)(x, out)
    }

    #[inline]
    pub fn jacobian_into(&self, x: &[f64], out: &mut [f64]) {
        (self.jacobian)(x, out)
    }

    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.eval_into(x, &mut out);
        out
    }

    pub fn jacobian(&self, x: &[f64]) -> DMatrix<f64> {
        let mut out = vec![0.0; self.dim * self.dim];
        self.jacobian_into(x, &mut out);
        DMatrix::from_row_slice(self.dim, self.dim, &out)
    }

    /// Relative discrepancy between the supplied Jacobian and central finite
    /// differences of `eval` at `x`, in the Frobenius norm scaled by
    /// `max(1, |J|)`.
    pub fn jacobian_error(&self, x: &[f64]) -> f64 {
        let n = self.dim;
        let analytic = self.jacobian(x);
        let mut fd = DMatrix::zeros(n, n);
        let mut xp = x.to_vec();
        let mut fp = vec![0.0; n];
        let mut fm = vec![0.0; n];
        for j in 0..n {
            let step = 1e-6 * x[j].abs().max(1.0);
            xp[j] = x[j] + step;
            self.eval_into(&xp, &mut fp);
            xp[j] = x[j] - step;
            self.eval_into(&xp, &mut fm);
            xp[j] = x[j];
            for i in 0..n {
                fd[(i, j)] = (fp[i] - fm[i]) / (2.0 * step);
            }
        }
        (analytic.clone() - fd).norm() / analytic.norm().max(1.0)
    }
}

impl fmt::Debug for SmoothField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SmoothField")
            .field("dim", &self.dim)
            .finish_non_exhaustive()
    }
}

/// A delayed optimal control problem instance. Immutable once built; the
/// field handles must be re-entrant so a problem can be shared across
/// concurrent solves.
#[derive(Clone, Debug)]
pub struct DelayedOcp {
    pub n: usize,
    pub f0: SmoothField,
    /// Field acting on the delayed state `x(t - tau)`.
    pub f1: SmoothField,
    /// Control direction.
    pub f2: SmoothField,
    /// Initial function on `[-M, 0]`.
    pub history: History,
    /// Upper bound on admissible delays, seconds.
    pub delay_bound: f64,
    /// Horizon `T`, seconds.
    pub horizon: f64,
    pub target: Vec<f64>,
}

impl DelayedOcp {
    /// Initial state `phi(0)`.
    pub fn initial_state(&self) -> Vec<f64> {
        self.history.eval(0.0)
    }

    pub fn target_norm(&self) -> f64 {
        self.target.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn validate(&self) -> ValidationReport {
        validate(self, &ValidationOptions::default())
    }
}

/// A problem defect found by [`validate`].
#[derive(Clone, Debug, PartialEq)]
pub enum Violation {
    NonPositiveDimension,
    NonPositiveHorizon(f64),
    NonPositiveDelayBound(f64),
    TargetDimension {
        expected: usize,
        got: usize,
    },
    FieldDimension {
        field: &'static str,
        expected: usize,
        got: usize,
    },
    JacobianMismatch {
        field: &'static str,
        at: Vec<f64>,
        rel_error: f64,
    },
    NonFiniteHistory {
        t: f64,
    },
    NonFiniteTarget,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::NonPositiveDimension => write!(f, "n must be positive"),
            Self::NonPositiveHorizon(t) => write!(f, "T must be positive (got {t})"),
            Self::NonPositiveDelayBound(m) => write!(f, "M must be positive (got {m})"),
            Self::TargetDimension { expected, got } => {
                write!(f, "target has dimension {got}, expected {expected}")
            }
            Self::FieldDimension {
                field,
                expected,
                got,
            } => {
                write!(f, "field {field} has dimension {got}, expected {expected}")
            }
            Self::JacobianMismatch {
                field,
                at,
                rel_error,
            } => write!(
                f,
                "Jacobian mismatch for {field} at {at:?}: relative error {rel_error:.3e}"
            ),
            Self::NonFiniteHistory { t } => write!(f, "history is not finite at t = {t}"),
            Self::NonFiniteTarget => write!(f, "target is not finite"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ValidationOptions {
    /// Random points at which each Jacobian is checked.
    pub jacobian_samples: usize,
    /// Radius of the ball the Jacobian sample points are drawn from.
    pub sample_radius: f64,
    pub jacobian_tol: f64,
    /// Points at which the history is checked for finiteness.
    pub history_samples: usize,
    /// Box `(lower, upper)` on which fields are probed for growth. When
    /// present, a field whose norm grows markedly on the box inflated ten
    /// times about its center is reported as a warning.
    pub boundedness_box: Option<(Vec<f64>, Vec<f64>)>,
    pub seed: u64,
}

impl Default for ValidationOptions {
    fn default() -> Self {
        Self {
            jacobian_samples: 16,
            sample_radius: 10.0,
            jacobian_tol: 1e-5,
            history_samples: 101,
            boundedness_box: None,
            seed: 0x5eed,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
    /// Non-fatal observations, e.g. a field that looks unbounded.
    pub warnings: Vec<String>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    /// Whether any violation's message contains `needle`.
    pub fn mentions(&self, needle: &str) -> bool {
        self.violations
            .iter()
            .any(|v| v.to_string().contains(needle))
    }
}

pub fn validate(problem: &DelayedOcp, opts: &ValidationOptions) -> ValidationReport {
    let mut report = ValidationReport::default();
    let n = problem.n;
    if n == 0 {
        report.violations.push(Violation::NonPositiveDimension);
        return report;
    }
    if !(problem.horizon > 0.0) {
        report
            .violations
            .push(Violation::NonPositiveHorizon(problem.horizon));
    }
    if !(problem.delay_bound > 0.0) {
        report
            .violations
            .push(Violation::NonPositiveDelayBound(problem.delay_bound));
    }
    if problem.target.len() != n {
        report.violations.push(Violation::TargetDimension {
            expected: n,
            got: problem.target.len(),
        });
    } else if problem.target.iter().any(|v| !v.is_finite()) {
        report.violations.push(Violation::NonFiniteTarget);
    }

    let fields = [
        ("f0", &problem.f0),
        ("f1", &problem.f1),
        ("f2", &problem.f2),
    ];
    let mut dims_ok = true;
    for (name, field) in fields {
        if field.dim() != n {
            dims_ok = false;
            report.violations.push(Violation::FieldDimension {
                field: name,
                expected: n,
                got: field.dim(),
            });
        }
    }

    if dims_ok {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        for _ in 0..opts.jacobian_samples {
            let x = random_in_ball(&mut rng, n, opts.sample_radius);
            for (name, field) in fields {
                let err = field.jacobian_error(&x);
                if !(err <= opts.jacobian_tol) {
                    report.violations.push(Violation::JacobianMismatch {
                        field: name,
                        at: x.clone(),
                        rel_error: err,
                    });
                }
            }
        }
        // one report per field is enough
        let mut seen = Vec::new();
        report.violations.retain(|v| match v {
            Violation::JacobianMismatch { field, .. } => {
                if seen.contains(field) {
                    false
                } else {
                    seen.push(*field);
                    true
                }
            }
            _ => true,
        });

        if let Some((lo, hi)) = &opts.boundedness_box {
            for (name, field) in fields {
                if looks_unbounded(field, lo, hi, &mut rng) {
                    report.warnings.push(format!(
                        "field {name} appears unbounded on the sampling box; boundedness is not enforced"
                    ));
                }
            }
        }
    }

    let m = problem.delay_bound;
    if m > 0.0 && opts.history_samples >= 2 {
        let mut buf = vec![0.0; n];
        for k in 0..opts.history_samples {
            let t = -m + m * k as f64 / (opts.history_samples - 1) as f64;
            problem.history.eval_into(t, &mut buf);
            if buf.iter().any(|v| !v.is_finite()) {
                report.violations.push(Violation::NonFiniteHistory { t });
                break;
            }
        }
    }
    report
}

fn random_in_ball(rng: &mut ChaCha8Rng, n: usize, radius: f64) -> Vec<f64> {
    let mut x: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    let r = radius * rng.gen::<f64>();
    x.iter_mut().for_each(|v| *v *= r / norm);
    x
}

fn looks_unbounded(field: &SmoothField, lo: &[f64], hi: &[f64], rng: &mut ChaCha8Rng) -> bool {
    let n = field.dim();
    if lo.len() != n || hi.len() != n {
        return false;
    }
    let mut out = vec![0.0; n];
    let mut max_norm = |scale: f64, rng: &mut ChaCha8Rng| {
        let mut best: f64 = 0.0;
        for _ in 0..64 {
            let x: Vec<f64> = (0..n)
                .map(|i| {
                    let c = 0.5 * (lo[i] + hi[i]);
                    let half = 0.5 * (hi[i] - lo[i]) * scale;
                    c + half * rng.gen_range(-1.0..=1.0)
                })
                .collect();
            field.eval_into(&x, &mut out);
            best = best.max(out.iter().map(|v| v * v).sum::<f64>().sqrt());
        }
        best
    };
    let inner = max_norm(1.0, rng);
    let outer = max_norm(10.0, rng);
    !outer.is_finite() || outer > 5.0 * inner.max(f64::MIN_POSITIVE)
}

/// The planar rendezvous vehicle with delayed steering response.
///
/// State `(x, y, theta, delta)`: position, heading and steering angle. The
/// heading rate follows the steering angle after the delay:
///
/// ```text
/// x' = v0 cos(theta),  y' = v0 sin(theta),  theta' = c0 v0 delta(t - tau),  delta' = u
/// ```
///
/// The history is constant and equal to `init` on `[-M, 0]`.
pub fn rendezvous_problem(
    v0: f64,
    c0: f64,
    init: [f64; 4],
    target: [f64; 4],
    horizon: f64,
    delay_bound: f64,
) -> Result<DelayedOcp> {
    if !(v0 > 0.0 && v0.is_finite()) {
        return Err(invalid("v0", format!("must be positive, got {v0}")));
    }
    if !(c0 > 0.0 && c0.is_finite()) {
        return Err(invalid("c0", format!("must be positive, got {c0}")));
    }
    let f0 = SmoothField::new(
        4,
        move |x, out| {
            out[0] = v0 * x[2].cos();
            out[1] = v0 * x[2].sin();
            out[2] = 0.0;
            out[3] = 0.0;
        },
        move |x, out| {
            out.fill(0.0);
            out[2] = -v0 * x[2].sin();
            out[4 + 2] = v0 * x[2].cos();
        },
    );
    let gain = c0 * v0;
    let f1 = SmoothField::new(
        4,
        move |x, out| {
            out.fill(0.0);
            out[2] = gain * x[3];
        },
        move |_, out| {
            out.fill(0.0);
            out[2 * 4 + 3] = gain;
        },
    );
    let f2 = SmoothField::constant(vec![0.0, 0.0, 0.0, 1.0]);
    Ok(DelayedOcp {
        n: 4,
        f0,
        f1,
        f2,
        history: History::constant(-delay_bound, init.to_vec()),
        delay_bound,
        horizon,
        target: target.to_vec(),
    })
}

/// The instance used throughout the examples: 100 m/s, unit steering gain,
/// 19 s horizon.
pub fn rendezvous_reference(delay_bound: f64) -> DelayedOcp {
    use std::f64::consts::PI;
    rendezvous_problem(
        100.0,
        1.0,
        [0.0, 0.0, PI / 4.0, 5e-4],
        [1500.0, 1000.0, PI / 20.0, 0.0],
        19.0,
        delay_bound,
    )
    .expect("reference parameters are valid")
}

/// Pendulum with delayed velocity feedback, a small smooth instance:
///
/// ```text
/// x1' = x2
/// x2' = -sin(x1) - damping * x2(t - tau) + u
/// ```
///
/// The history is constant at `init`; the horizon is `horizon`.
pub fn pendulum_problem(
    damping: f64,
    init: [f64; 2],
    target: [f64; 2],
    horizon: f64,
    delay_bound: f64,
) -> DelayedOcp {
    let f0 = SmoothField::new(
        2,
        |x, out| {
            out[0] = x[1];
            out[1] = -x[0].sin();
        },
        |x, out| {
            out.copy_from_slice(&[0.0, 1.0, -x[0].cos(), 0.0]);
        },
    );
    DelayedOcp {
        n: 2,
        f0,
        f1: SmoothField::linear(2, vec![0.0, 0.0, 0.0, -damping]),
        f2: SmoothField::constant(vec![0.0, 1.0]),
        history: History::constant(-delay_bound, init.to_vec()),
        delay_bound,
        horizon,
        target: target.to_vec(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pendulum_is_valid() {
        let report = pendulum_problem(0.5, [1.0, 0.0], [0.0, 0.0], 2.0, 1.0).validate();
        assert!(report.is_valid(), "{:?}", report.violations);
    }

    #[test]
    fn rendezvous_is_valid() {
        let report = rendezvous_reference(4.0).validate();
        assert!(report.is_valid(), "{:?}", report.violations);
    }

    #[test]
    fn negative_horizon_reported() {
        let mut p = rendezvous_reference(4.0);
        p.horizon = -1.0;
        let report = p.validate();
        assert!(report.mentions("T must be positive"));
    }

    #[test]
    fn wrong_jacobian_reported() {
        let mut p = rendezvous_reference(4.0);
        p.f0 = SmoothField::new(4, |x, out| out.copy_from_slice(x), |_, out| out.fill(0.0));
        let report = p.validate();
        assert!(
            report.mentions("Jacobian mismatch for f0"),
            "{:?}",
            report.violations
        );
    }

    #[test]
    fn non_finite_history_reported() {
        let mut p = rendezvous_reference(2.0);
        p.history = History::new(-2.0, 4, |t, out| {
            out.fill(if t < -1.0 { f64::NAN } else { 0.0 })
        });
        assert!(p.validate().mentions("history is not finite"));
    }

    #[test]
    fn rendezvous_fields() {
        let p = rendezvous_reference(4.0);
        assert_eq!(p.f1.eval(&[0.0, 0.0, 0.0, 0.5]), vec![0.0, 0.0, 50.0, 0.0]);
        assert_eq!(p.f2.eval(&[3.0, -2.0, 1.0, 7.0]), vec![0.0, 0.0, 0.0, 1.0]);
        // f0 + f1 at a common state is the undelayed right-hand side with u = 0
        let x = [10.0, -4.0, 0.3, 2e-3];
        let sum: Vec<f64> =
            p.f0.eval(&x)
                .iter()
                .zip(p.f1.eval(&x))
                .map(|(a, b)| a + b)
                .collect();
        let expected = [
            100.0 * 0.3f64.cos(),
            100.0 * 0.3f64.sin(),
            100.0 * 2e-3,
            0.0,
        ];
        for (a, b) in sum.iter().zip(expected) {
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }

    #[test]
    fn rendezvous_rejects_bad_parameters() {
        let z = [0.0; 4];
        assert!(rendezvous_problem(0.0, 1.0, z, z, 1.0, 1.0).is_err());
        assert!(rendezvous_problem(1.0, -1.0, z, z, 1.0, 1.0).is_err());
    }

    #[test]
    fn delayed_channel_flagged_unbounded() {
        let p = rendezvous_reference(4.0);
        let opts = ValidationOptions {
            boundedness_box: Some((vec![-1.0; 4], vec![1.0; 4])),
            ..Default::default()
        };
        let report = validate(&p, &opts);
        assert!(report.is_valid());
        assert!(report.warnings.iter().any(|w| w.contains("f1")));
        assert!(!report.warnings.iter().any(|w| w.contains("f0")));
    }
}
