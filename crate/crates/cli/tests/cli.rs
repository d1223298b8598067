use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use delayshoot::{
    solve_nondelayed, ContinuationOptions, ContinuationStep, DelayedOcp, History, SmoothField,
};
use delayshoot_cli::run::gramian_reports;

fn delayshoot(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_delayshoot"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

fn rows(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

fn column(table: &[Vec<String>], name: &str) -> Vec<f64> {
    let idx = table[0]
        .iter()
        .position(|h| h == name)
        .expect("column present");
    table[1..].iter().map(|r| r[idx].parse().unwrap()).collect()
}

fn run_in(dir: &Path, cmd: &str, config: &str) -> Output {
    let cfg = write_config(dir, "run.cfg", config);
    let out = dir.join("out");
    delayshoot(&[cmd, &cfg, "--output-dir", out.to_str().unwrap()])
}

#[test]
fn pendulum_solve_writes_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run_in(
        tmp.path(),
        "solve",
        "problem = pendulum\ntau_target = 0.2\n",
    );
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let dir = tmp.path().join("out");

    let summary = rows(&dir.join("summary.csv"));
    assert_eq!(
        summary[0].join(","),
        "tau,cost,converged,newton_iters,p0_1,p0_2"
    );
    assert_eq!(summary.len(), 12);
    let taus = column(&summary, "tau");
    assert_eq!(taus[0], 0.0);
    assert_eq!(*taus.last().unwrap(), 0.2);
    assert!(summary[1..].iter().all(|r| r[2] == "true"));
    assert!(column(&summary, "cost")
        .iter()
        .all(|c| c.is_finite() && *c >= 0.0));

    let traj = fs::read_to_string(dir.join("trajectory_tau0.2.csv")).unwrap();
    assert!(!traj.contains('\r'));
    let traj = rows(&dir.join("trajectory_tau0.2.csv"));
    assert_eq!(traj[0].join(","), "t,x1,x2,p1,p2,u");
    assert_eq!(traj.len(), 2001 + 1);
    // 17 significant digits in scientific notation
    assert!(traj[5][1].contains('e'));
    assert_eq!(
        traj[5][1]
            .split('e')
            .next()
            .unwrap()
            .replace(['-', '.'], "")
            .len(),
        17
    );
}

#[test]
fn rendezvous_nondelayed_sweep() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run_in(tmp.path(), "sweep", "problem = rendezvous\nsweep = 0\n");
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let dir = tmp.path().join("out");
    let summary = rows(&dir.join("summary.csv"));
    assert_eq!(summary.len(), 2);
    let cost = column(&summary, "cost")[0];
    assert!((cost - 6.09179e-7).abs() <= 0.02 * 6.09179e-7, "{cost:e}");
    let traj = rows(&dir.join("trajectory_tau0.csv"));
    let u = column(&traj, "u");
    assert!(u.iter().any(|&v| v > 0.0) && u.iter().any(|&v| v < 0.0));
}

#[test]
fn rendezvous_sweep_matches_reference_costs() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run_in(
        tmp.path(),
        "sweep",
        "problem = rendezvous\nsweep = 0, 2, 4\ndtau = 0.4\n",
    );
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let dir = tmp.path().join("out");
    for tau in ["0", "2", "4"] {
        assert!(dir.join(format!("trajectory_tau{tau}.csv")).exists());
    }
    let summary = rows(&dir.join("summary.csv"));
    assert_eq!(column(&summary, "tau"), vec![0.0, 2.0, 4.0]);
    let expected = [6.09179e-7, 6.05183e-7, 8.68821e-7];
    for (c, e) in column(&summary, "cost").iter().zip(expected) {
        assert!((c - e).abs() <= 0.02 * e, "{c:e} vs {e:e}");
    }
}

#[test]
fn rendezvous_solve_to_four() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run_in(
        tmp.path(),
        "solve",
        "problem = rendezvous\ntau_target = 4\n",
    );
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let summary = rows(&tmp.path().join("out/summary.csv"));
    let last = summary.last().unwrap();
    assert_eq!(last[0].parse::<f64>().unwrap(), 4.0);
    let cost: f64 = last[1].parse().unwrap();
    assert!((cost - 8.68821e-7).abs() <= 0.02 * 8.68821e-7, "{cost:e}");
}

#[test]
fn gramian_is_deterministic_and_surjective() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "g.cfg", "problem = rendezvous\n");
    let mut files = Vec::new();
    for name in ["a", "b"] {
        let dir = tmp.path().join(name);
        let out = delayshoot(&["gramian", &cfg, "--output-dir", dir.to_str().unwrap()]);
        assert_eq!(
            out.status.code(),
            Some(0),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
        files.push(fs::read(dir.join("gramian.csv")).unwrap());
    }
    assert_eq!(files[0], files[1]);
    let text = String::from_utf8(files.remove(0)).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("tau,lambda_min,trace,surjective"));
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(row[3], "true");
    assert!(row[1].parse::<f64>().unwrap() > 0.0);
}

#[test]
fn solve_outputs_are_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "p.cfg",
        "problem = pendulum\ntau_target = 0.1\n",
    );
    let mut contents = Vec::new();
    for name in ["a", "b"] {
        let dir = tmp.path().join(name);
        let out = delayshoot(&["solve", &cfg, "--output-dir", dir.to_str().unwrap()]);
        assert_eq!(out.status.code(), Some(0));
        contents.push((
            fs::read(dir.join("summary.csv")).unwrap(),
            fs::read(dir.join("trajectory_tau0.1.csv")).unwrap(),
        ));
    }
    assert_eq!(contents[0], contents[1]);
}

#[test]
fn missing_control_direction_not_surjective() {
    let problem = DelayedOcp {
        n: 2,
        f0: SmoothField::linear(2, vec![0.0, 1.0, -1.0, 0.0]),
        f1: SmoothField::zero(2),
        f2: SmoothField::zero(2),
        history: History::constant(-1.0, vec![0.0, 0.0]),
        delay_bound: 1.0,
        horizon: 1.0,
        target: vec![0.0, 0.0],
    };
    let opts = ContinuationOptions::new(&problem, 0.0);
    let result = solve_nondelayed(&problem, &[0.0, 0.0], &opts).unwrap();
    let step = ContinuationStep {
        tau: 0.0,
        result,
        refinements: 0,
        consistency: 0.0,
    };
    let reports = gramian_reports(&problem, &[&step]).unwrap();
    assert_eq!(reports[0].min_eigenvalue, 0.0);
    assert!(!reports[0].surjective);
    let csv = delayshoot_cli::run::gramian_csv(&reports);
    assert!(csv.lines().nth(1).unwrap().ends_with(",false"));
}

#[test]
fn config_errors_exit_two() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run_in(tmp.path(), "sweep", "sweep = 2, 1\n");
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 1"), "{err}");

    let out = run_in(tmp.path(), "solve", "tau_target = -1\n");
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("tau_target"));

    let out = run_in(tmp.path(), "sweep", "problem = pendulum\n");
    assert_eq!(out.status.code(), Some(2));

    let out = delayshoot(&["solve", tmp.path().join("absent.cfg").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unwritable_output_dir_exits_two() {
    let tmp = tempfile::tempdir().unwrap();
    let blocker = tmp.path().join("file");
    fs::write(&blocker, "not a directory").unwrap();
    let cfg = write_config(tmp.path(), "p.cfg", "problem = pendulum\n");
    let target = blocker.join("out");
    let out = delayshoot(&["solve", &cfg, "--output-dir", target.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!String::from_utf8_lossy(&out.stderr).is_empty());
}

#[test]
fn failed_continuation_exits_one_with_partial_files() {
    let tmp = tempfile::tempdir().unwrap();
    // a residual tolerance below rounding cannot be met
    let out = run_in(
        tmp.path(),
        "solve",
        "problem = pendulum\ntau_target = 0.5\nshooting.residual_tol_abs = 1e-300\n",
    );
    assert_eq!(
        out.status.code(),
        Some(1),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let summary = rows(&tmp.path().join("out/summary.csv"));
    assert_eq!(summary[0][0], "tau");
}
