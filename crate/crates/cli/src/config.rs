//! Line-based `key = value` run configuration.
//!
//! ```text
//! # rendezvous, delayed steering
//! problem = rendezvous
//! problem.T = 19
//! tau_target = 2
//! shooting.max_iterations = 50
//! ```
//!
//! Keys may appear in any order; each at most once. Vectors are
//! comma-separated. Angles are in radians.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;

use delayshoot::{pendulum_problem, rendezvous_problem, ContinuationOptions, DelayedOcp};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfigError {
    /// 1-based line of the offending entry, if there is one.
    pub line: Option<usize>,
    pub key: Option<String>,
    pub message: String,
}

impl ConfigError {
    fn at(line: usize, key: &str, message: impl Into<String>) -> Self {
        Self {
            line: Some(line),
            key: Some(key.to_string()),
            message: message.into(),
        }
    }

    fn global(key: &str, message: impl Into<String>) -> Self {
        Self {
            line: None,
            key: Some(key.to_string()),
            message: message.into(),
        }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(line) = self.line {
            write!(f, "line {line}: ")?;
        }
        if let Some(key) = &self.key {
            write!(f, "{key}: ")?;
        }
        f.write_str(&self.message)
    }
}

impl std::error::Error for ConfigError {}

#[derive(Clone, Debug, PartialEq)]
pub enum ProblemPreset {
    Rendezvous {
        v0: f64,
        c0: f64,
        init: [f64; 4],
        target: [f64; 4],
        horizon: f64,
        delay_bound: f64,
    },
    Pendulum {
        damping: f64,
        init: [f64; 2],
        target: [f64; 2],
        horizon: f64,
        delay_bound: f64,
    },
}

impl ProblemPreset {
    pub fn rendezvous() -> Self {
        use std::f64::consts::PI;
        Self::Rendezvous {
            v0: 100.0,
            c0: 1.0,
            init: [0.0, 0.0, PI / 4.0, 5e-4],
            target: [1500.0, 1000.0, PI / 20.0, 0.0],
            horizon: 19.0,
            delay_bound: 7.0,
        }
    }

    pub fn pendulum() -> Self {
        Self::Pendulum {
            damping: 0.5,
            init: [1.0, 0.0],
            target: [0.0, 0.0],
            horizon: 2.0,
            delay_bound: 1.0,
        }
    }

    pub fn delay_bound(&self) -> f64 {
        match self {
            Self::Rendezvous { delay_bound, .. } | Self::Pendulum { delay_bound, .. } => {
                *delay_bound
            }
        }
    }

    pub fn build(&self) -> Result<DelayedOcp, ConfigError> {
        match *self {
            Self::Rendezvous {
                v0,
                c0,
                init,
                target,
                horizon,
                delay_bound,
            } => rendezvous_problem(v0, c0, init, target, horizon, delay_bound)
                .map_err(|e| ConfigError::global("problem", e.to_string())),
            Self::Pendulum {
                damping,
                init,
                target,
                horizon,
                delay_bound,
            } => Ok(pendulum_problem(
                damping,
                init,
                target,
                horizon,
                delay_bound,
            )),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ShootingOverrides {
    pub residual_tol_abs: Option<f64>,
    pub residual_tol_rel: Option<f64>,
    pub max_iterations: Option<usize>,
    pub fd_step: Option<f64>,
    pub max_backtracks: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ContinuationOverrides {
    pub dtau_min: Option<f64>,
    pub refine_passes: Option<usize>,
    pub refine_tol: Option<f64>,
    pub growth: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub problem: ProblemPreset,
    /// Final delay of `solve`; zero means the non-delayed problem only.
    pub tau_target: f64,
    /// Initial delay increment; defaults to a tenth of the largest delay.
    pub dtau: Option<f64>,
    /// Target step; defaults to `T / 2000`.
    pub base_h: Option<f64>,
    pub output_dir: PathBuf,
    /// Delays visited by `sweep` and `gramian`, ascending.
    pub sweep: Option<Vec<f64>>,
    pub shooting: ShootingOverrides,
    pub continuation: ContinuationOverrides,
}

impl RunConfig {
    /// Largest delay this run will reach.
    pub fn max_tau(&self) -> f64 {
        match &self.sweep {
            Some(s) => s.last().copied().unwrap_or(0.0),
            None => self.tau_target,
        }
    }

    /// Solver options for a continuation up to `tau`.
    pub fn options(&self, problem: &DelayedOcp, tau: f64) -> ContinuationOptions {
        let mut opts = ContinuationOptions::new(problem, tau);
        if let Some(d) = self.dtau {
            opts.dtau_init = d;
            opts.dtau_min = d / 100.0;
        }
        if let Some(h) = self.base_h {
            opts.base_h = h;
        }
        let c = &self.continuation;
        if let Some(v) = c.dtau_min {
            opts.dtau_min = v;
        }
        if let Some(v) = c.refine_passes {
            opts.refine_passes = v;
        }
        if let Some(v) = c.refine_tol {
            opts.refine_tol = v;
        }
        if let Some(v) = c.growth {
            opts.growth = v;
        }
        let s = &self.shooting;
        if let Some(v) = s.residual_tol_abs {
            opts.shooting.residual_tol_abs = v;
        }
        if let Some(v) = s.residual_tol_rel {
            opts.shooting.residual_tol_rel = v;
        }
        if let Some(v) = s.max_iterations {
            opts.shooting.max_iterations = v;
        }
        if let Some(v) = s.fd_step {
            opts.shooting.fd_step = v;
        }
        if let Some(v) = s.max_backtracks {
            opts.shooting.max_backtracks = v;
        }
        opts
    }
}

struct Entry {
    line: usize,
    value: String,
}

fn number(key: &str, e: &Entry) -> Result<f64, ConfigError> {
    let v: f64 = e.value.parse().map_err(|_| {
        ConfigError::at(e.line, key, format!("expected a number, got `{}`", e.value))
    })?;
    if !v.is_finite() {
        return Err(ConfigError::at(e.line, key, "must be finite"));
    }
    Ok(v)
}

fn positive(key: &str, e: &Entry) -> Result<f64, ConfigError> {
    let v = number(key, e)?;
    if v > 0.0 {
        Ok(v)
    } else {
        Err(ConfigError::at(
            e.line,
            key,
            format!("must be positive, got {v}"),
        ))
    }
}

fn count(key: &str, e: &Entry) -> Result<usize, ConfigError> {
    e.value.parse().map_err(|_| {
        ConfigError::at(
            e.line,
            key,
            format!("expected a non-negative integer, got `{}`", e.value),
        )
    })
}

fn list(key: &str, e: &Entry) -> Result<Vec<f64>, ConfigError> {
    e.value
        .split(',')
        .map(|part| {
            let part = part.trim();
            part.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| {
                    ConfigError::at(e.line, key, format!("expected a number, got `{part}`"))
                })
        })
        .collect()
}

fn array<const N: usize>(key: &str, e: &Entry) -> Result<[f64; N], ConfigError> {
    let v = list(key, e)?;
    v.as_slice()
        .try_into()
        .map_err(|_| ConfigError::at(e.line, key, format!("expected {N} values, got {}", v.len())))
}

pub fn parse_config(text: &str) -> Result<RunConfig, ConfigError> {
    let mut entries: BTreeMap<String, Entry> = BTreeMap::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let Some((key, value)) = content.split_once('=') else {
            return Err(ConfigError {
                line: Some(line),
                key: None,
                message: format!("expected `key = value`, got `{content}`"),
            });
        };
        let (key, value) = (key.trim(), value.trim());
        if key.is_empty() {
            return Err(ConfigError {
                line: Some(line),
                key: None,
                message: "missing key".into(),
            });
        }
        if value.is_empty() {
            return Err(ConfigError::at(line, key, "missing value"));
        }
        if let Some(prev) = entries.get(key) {
            return Err(ConfigError::at(
                line,
                key,
                format!("already set on line {}", prev.line),
            ));
        }
        entries.insert(
            key.to_string(),
            Entry {
                line,
                value: value.to_string(),
            },
        );
    }

    let mut problem = match entries.remove("problem") {
        None => ProblemPreset::rendezvous(),
        Some(e) => match e.value.as_str() {
            "rendezvous" => ProblemPreset::rendezvous(),
            "pendulum" => ProblemPreset::pendulum(),
            other => {
                return Err(ConfigError::at(
                    e.line,
                    "problem",
                    format!("unknown preset `{other}` (expected rendezvous or pendulum)"),
                ))
            }
        },
    };

    let mut config = RunConfig {
        problem: problem.clone(),
        tau_target: 0.0,
        dtau: None,
        base_h: None,
        output_dir: PathBuf::from("."),
        sweep: None,
        shooting: ShootingOverrides::default(),
        continuation: ContinuationOverrides::default(),
    };
    let mut tau_line = None;
    let mut sweep_line = None;

    for (key, e) in &entries {
        let k = key.as_str();
        match (&mut problem, k) {
            (ProblemPreset::Rendezvous { v0, .. }, "problem.v0") => *v0 = positive(k, e)?,
            (ProblemPreset::Rendezvous { c0, .. }, "problem.c0") => *c0 = positive(k, e)?,
            (ProblemPreset::Rendezvous { init, .. }, "problem.init") => *init = array(k, e)?,
            (ProblemPreset::Rendezvous { target, .. }, "problem.target") => *target = array(k, e)?,
            (ProblemPreset::Pendulum { damping, .. }, "problem.damping") => {
                *damping = number(k, e)?
            }
            (ProblemPreset::Pendulum { init, .. }, "problem.init") => *init = array(k, e)?,
            (ProblemPreset::Pendulum { target, .. }, "problem.target") => *target = array(k, e)?,
            (
                ProblemPreset::Rendezvous { horizon, .. } | ProblemPreset::Pendulum { horizon, .. },
                "problem.T",
            ) => *horizon = positive(k, e)?,
            (
                ProblemPreset::Rendezvous { delay_bound, .. }
                | ProblemPreset::Pendulum { delay_bound, .. },
                "problem.M",
            ) => *delay_bound = positive(k, e)?,
            (_, "tau_target") => {
                let v = number(k, e)?;
                if v < 0.0 {
                    return Err(ConfigError::at(
                        e.line,
                        k,
                        format!("must be non-negative, got {v}"),
                    ));
                }
                config.tau_target = v;
                tau_line = Some(e.line);
            }
            (_, "dtau") => config.dtau = Some(positive(k, e)?),
            (_, "base_h") => config.base_h = Some(positive(k, e)?),
            (_, "output_dir") => config.output_dir = PathBuf::from(&e.value),
            (_, "sweep") => {
                let v = list(k, e)?;
                if v.iter().any(|&t| t < 0.0) {
                    return Err(ConfigError::at(e.line, k, "delays must be non-negative"));
                }
                if v.windows(2).any(|w| !(w[1] > w[0])) {
                    return Err(ConfigError::at(
                        e.line,
                        k,
                        "delays must be strictly ascending",
                    ));
                }
                config.sweep = Some(v);
                sweep_line = Some(e.line);
            }
            (_, "shooting.residual_tol_abs") => {
                config.shooting.residual_tol_abs = Some(positive(k, e)?)
            }
            (_, "shooting.residual_tol_rel") => {
                config.shooting.residual_tol_rel = Some(positive(k, e)?)
            }
            (_, "shooting.max_iterations") => config.shooting.max_iterations = Some(count(k, e)?),
            (_, "shooting.fd_step") => config.shooting.fd_step = Some(positive(k, e)?),
            (_, "shooting.max_backtracks") => config.shooting.max_backtracks = Some(count(k, e)?),
            (_, "continuation.dtau_min") => config.continuation.dtau_min = Some(positive(k, e)?),
            (_, "continuation.refine_passes") => {
                config.continuation.refine_passes = Some(count(k, e)?)
            }
            (_, "continuation.refine_tol") => {
                config.continuation.refine_tol = Some(positive(k, e)?)
            }
            (_, "continuation.growth") => config.continuation.growth = Some(number(k, e)?),
            _ => return Err(ConfigError::at(e.line, k, "unknown key")),
        }
    }
    config.problem = problem;

    let bound = config.problem.delay_bound();
    if config.tau_target > bound {
        return Err(ConfigError {
            line: tau_line,
            key: Some("tau_target".into()),
            message: format!("exceeds the delay bound M = {bound}"),
        });
    }
    if let Some(s) = &config.sweep {
        if s.last().is_some_and(|&t| t > bound) {
            return Err(ConfigError {
                line: sweep_line,
                key: Some("sweep".into()),
                message: format!("exceeds the delay bound M = {bound}"),
            });
        }
    }
    let problem = config.problem.build()?;
    let opts = config.options(&problem, config.max_tau());
    opts.check()
        .map_err(|e| ConfigError::global("options", e.to_string()))?;
    Ok(config)
}
