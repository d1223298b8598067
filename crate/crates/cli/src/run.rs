//! `solve`, `sweep` and `gramian` runs and their CSV artifacts.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use delayshoot::{
    continuation_solve_through, controllability_gramian, ContinuationStep, ContinuationTrace,
    DelayedOcp, ExtremalLift, GramianReport, SolverError,
};

use crate::config::{ConfigError, RunConfig};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(#[from] ConfigError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("solver: {0}")]
    Solver(#[from] SolverError),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        2
    }
}

/// Result of a run that got far enough to write artifacts.
#[derive(Debug)]
pub struct RunOutcome {
    pub succeeded: bool,
    pub files: Vec<PathBuf>,
}

impl RunOutcome {
    pub fn exit_code(&self) -> i32 {
        if self.succeeded {
            0
        } else {
            1
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn prepare_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    // probe writability up front so no solve is wasted
    let probe = dir.join(".delayshoot-write-probe");
    fs::write(&probe, b"").map_err(io_err(dir))?;
    fs::remove_file(&probe).map_err(io_err(dir))
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(contents.as_bytes()).map_err(io_err(path))
}

/// 17 significant digits, enough to round-trip binary64.
fn num(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn trajectory_file_name(tau: f64) -> String {
    format!("trajectory_tau{tau}.csv")
}

/// `t,x1..xn,p1..pn,u`, one row per grid node.
pub fn trajectory_csv(lift: &ExtremalLift) -> String {
    let n = lift.state.dim();
    let mut out = String::from("t");
    for prefix in ["x", "p"] {
        for i in 1..=n {
            out.push_str(&format!(",{prefix}{i}"));
        }
    }
    out.push_str(",u\n");
    let grid = lift.grid();
    for i in 0..=grid.steps() {
        let mut row = vec![num(grid.node(i))];
        row.extend(lift.state.node(i).iter().map(|&v| num(v)));
        row.extend(lift.adjoint.node(i).iter().map(|&v| num(v)));
        row.push(num(lift.control.node(i)[0]));
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

/// `tau,cost,converged,newton_iters,p0_1..p0_n`.
pub fn summary_csv<'a>(n: usize, steps: impl IntoIterator<Item = &'a ContinuationStep>) -> String {
    let mut out = String::from("tau,cost,converged,newton_iters");
    for i in 1..=n {
        out.push_str(&format!(",p0_{i}"));
    }
    out.push('\n');
    for s in steps {
        let r = &s.result;
        let mut row = vec![
            num(s.tau),
            num(r.lift.cost),
            r.converged.to_string(),
            r.iterations.to_string(),
        ];
        row.extend(r.p0.iter().map(|&v| num(v)));
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

/// `tau,lambda_min,trace,surjective`.
pub fn gramian_csv<'a>(reports: impl IntoIterator<Item = &'a GramianReport>) -> String {
    let mut out = String::from("tau,lambda_min,trace,surjective\n");
    for r in reports {
        out.push_str(&format!(
            "{},{},{},{}\n",
            num(r.tau),
            num(r.min_eigenvalue),
            num(r.trace),
            r.surjective
        ));
    }
    out
}

fn continuation(
    config: &RunConfig,
    stops: &[f64],
) -> Result<(DelayedOcp, ContinuationTrace), CliError> {
    let problem = config.problem.build()?;
    let tau = stops.last().copied().unwrap_or(0.0);
    let opts = config.options(&problem, tau);
    let p0 = vec![0.0; problem.n];
    let trace = continuation_solve_through(&problem, stops, &p0, &opts)?;
    if !trace.succeeded {
        log::warn!(
            "continuation stopped at tau = {}",
            trace.last().map_or(0.0, |s| s.tau)
        );
    }
    Ok((problem, trace))
}

fn requested<'a>(trace: &'a ContinuationTrace, taus: &[f64]) -> Vec<&'a ContinuationStep> {
    taus.iter().filter_map(|&t| trace.at(t)).collect()
}

/// Continuation to `tau_target`: one summary row per step and the final
/// trajectory. On failure the partial summary and the last converged
/// trajectory are still written.
pub fn run_solve(config: &RunConfig) -> Result<RunOutcome, CliError> {
    let dir = &config.output_dir;
    prepare_dir(dir)?;
    let (problem, trace) = continuation(config, &[config.tau_target])?;
    let mut files = Vec::new();
    if let Some(last) = trace.last() {
        let path = dir.join(trajectory_file_name(last.tau));
        write_file(&path, &trajectory_csv(&last.result.lift))?;
        files.push(path);
    }
    let path = dir.join("summary.csv");
    write_file(&path, &summary_csv(problem.n, &trace.steps))?;
    files.push(path);
    Ok(RunOutcome {
        succeeded: trace.succeeded,
        files,
    })
}

/// One continuation through every swept delay, with a summary row and a
/// trajectory file per swept delay.
pub fn run_sweep(config: &RunConfig) -> Result<RunOutcome, CliError> {
    let Some(sweep) = config.sweep.as_deref().filter(|s| !s.is_empty()) else {
        return Err(ConfigError {
            line: None,
            key: Some("sweep".into()),
            message: "a non-empty sweep is required".into(),
        }
        .into());
    };
    let dir = &config.output_dir;
    prepare_dir(dir)?;
    let (problem, trace) = continuation(config, sweep)?;
    let visited = requested(&trace, sweep);
    let mut files = Vec::new();
    for step in &visited {
        let path = dir.join(trajectory_file_name(step.tau));
        write_file(&path, &trajectory_csv(&step.result.lift))?;
        files.push(path);
    }
    let path = dir.join("summary.csv");
    write_file(&path, &summary_csv(problem.n, visited.iter().copied()))?;
    files.push(path);
    Ok(RunOutcome {
        succeeded: trace.succeeded,
        files,
    })
}

/// Gramian of each requested lift.
pub fn gramian_reports(
    problem: &DelayedOcp,
    steps: &[&ContinuationStep],
) -> Result<Vec<GramianReport>, CliError> {
    steps
        .iter()
        .map(|s| Ok(controllability_gramian(problem, &s.result.lift)?))
        .collect()
}

/// Gramian check at `tau = 0`, or at every swept delay.
pub fn run_gramian(config: &RunConfig) -> Result<RunOutcome, CliError> {
    let dir = &config.output_dir;
    prepare_dir(dir)?;
    let taus = config.sweep.clone().unwrap_or_else(|| vec![0.0]);
    let (problem, trace) = continuation(config, &taus)?;
    let reports = gramian_reports(&problem, &requested(&trace, &taus))?;
    for r in &reports {
        log::info!(
            "tau = {}: lambda_min {:.3e}, scaled {:.3e}, surjective {}",
            r.tau,
            r.min_eigenvalue,
            r.scaled_min_eigenvalue,
            r.surjective
        );
    }
    let path = dir.join("gramian.csv");
    write_file(&path, &gramian_csv(&reports))?;
    Ok(RunOutcome {
        succeeded: trace.succeeded,
        files: vec![path],
    })
}
