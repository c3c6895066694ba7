//! The work behind each subcommand. Every function writes its CSV and
//! snapshot outputs into the given directory and returns a small summary.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use thiserror::Error;
use tumorctl_core::cost::evaluate_cost;
use tumorctl_core::optimizer::{clamp_characterization_residual, optimize, Termination};
use tumorctl_core::potentials::PotentialSpec;
use tumorctl_core::problem::ControlProblem;
use tumorctl_core::sensitivity::duality_gap;
use tumorctl_core::state::{ControlField, StateSnapshot, StateTrajectory};
use tumorctl_core::verification::{
    continuous_adjoint_crosscheck, default_fd_step, fd_gradient, frechet_order_probe, lipschitz_probe,
    mass_identity_residuals, random_direction, relative_error, separation_report, tangent_consistency_probe,
};

use crate::config::{ConfigError, RunConfig, Settings};
use crate::row;
use crate::snapshot::{write_snapshot, Snapshot, SnapshotError};
use crate::table::Table;

#[derive(Debug, Error)]
pub enum RunError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Solver(#[from] tumorctl_core::Error),
    #[error("{context}: {source}")]
    Io { context: String, source: io::Error },
    #[error("{0}")]
    Snapshot(#[from] SnapshotError),
    #[error("{0}")]
    Verification(String),
}

impl RunError {
    pub fn exit_code(&self) -> u8 {
        match self {
            RunError::Usage(_) | RunError::Config(_) => 1,
            RunError::Solver(_) | RunError::Io { .. } | RunError::Snapshot(_) => 2,
            RunError::Verification(_) => 3,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            RunError::Usage(_) => "usage",
            RunError::Config(_) => "config",
            RunError::Solver(_) => "solver",
            RunError::Io { .. } => "io",
            RunError::Snapshot(_) => "snapshot",
            RunError::Verification(_) => "verification",
        }
    }
}

fn io_err(context: &Path) -> impl FnOnce(io::Error) -> RunError + '_ {
    move |source| RunError::Io { context: context.display().to_string(), source }
}

fn write_table(table: &Table, path: &Path) -> Result<(), RunError> {
    table.write(path).map_err(io_err(path))
}

fn prepare(out: &Path, cfg: &RunConfig) -> Result<(), RunError> {
    fs::create_dir_all(out).map_err(io_err(out))?;
    let p = out.join("effective.ini");
    fs::write(&p, cfg.settings.render()).map_err(io_err(&p))
}

/// Applies `f` to every item on up to `jobs` threads; results keep item order.
pub fn parallel_map<T, R, F>(items: &[T], jobs: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<R>>> = items.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..jobs.clamp(1, items.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                *slots[i].lock().expect("no panics while holding the slot") = Some(r);
            });
        }
    });
    slots.into_iter().map(|m| m.into_inner().expect("slot lock").expect("every slot filled")).collect()
}

fn state_snapshot(s: &StateSnapshot) -> Snapshot {
    Snapshot::from_fields(s.domain(), &[("mu", &s.mu), ("phi", &s.phi), ("sigma", &s.sigma)])
}

fn controls_snapshot(c: &ControlField) -> Snapshot {
    let names: Vec<(String, &tumorctl_core::grid::Field)> = (0..c.steps())
        .map(|k| (format!("u_{k:05}"), &c.u[k]))
        .chain((0..c.steps()).map(|k| (format!("w_{k:05}"), &c.w[k])))
        .collect();
    let refs: Vec<(&str, &tumorctl_core::grid::Field)> = names.iter().map(|(n, f)| (n.as_str(), *f)).collect();
    Snapshot::from_fields(c.u[0].domain(), &refs)
}

fn write_trajectory(traj: &StateTrajectory, every: usize, out: &Path) -> Result<(), RunError> {
    let tau = traj.model().tau();
    let mut mon = Table::new(&["level", "t", "min_phi", "max_phi", "mass_mu_phi", "mass_sigma"]);
    for (n, m) in traj.monitors().iter().enumerate() {
        mon.push(row![n, n as f64 * tau, m.min_phi, m.max_phi, m.mass_mu_phi, m.mass_sigma]);
    }
    write_table(&mon, &out.join("monitors.csv"))?;

    let mut newton = Table::new(&["step", "iterations", "initial_residual", "residual", "threshold"]);
    for (k, s) in traj.step_stats().iter().enumerate() {
        newton.push(row![k + 1, s.iterations, s.initial_residual, s.residual, s.threshold]);
    }
    write_table(&newton, &out.join("newton.csv"))?;

    let mass = mass_identity_residuals(traj);
    let mut t = Table::new(&["step", "sigma_residual", "sigma_scale", "combined_residual", "combined_scale"]);
    for k in 0..mass.sigma.len() {
        t.push(row![k + 1, mass.sigma[k], mass.sigma_scale[k], mass.combined[k], mass.combined_scale[k]]);
    }
    write_table(&t, &out.join("mass.csv"))?;

    let dir = out.join("snapshots");
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let last = traj.steps();
    for n in (0..=last).filter(|n| n % every == 0 || *n == last) {
        write_snapshot(&dir.join(format!("level_{n:05}.tgf")), &state_snapshot(traj.snapshot(n)))?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulateSummary {
    pub cost: f64,
    pub min_phi: f64,
    pub max_phi: f64,
    pub mass_max_relative: f64,
}

/// Forward solve at the box midpoint.
pub fn simulate(cfg: &RunConfig, out: &Path) -> Result<SimulateSummary, RunError> {
    prepare(out, cfg)?;
    let problem = cfg.problem()?;
    let controls = cfg.control_box()?.midpoint();
    let traj = problem.solve(&controls)?;
    write_trajectory(&traj, cfg.output.snapshot_every, out)?;
    let sep = separation_report(&traj);
    Ok(SimulateSummary {
        cost: evaluate_cost(&traj, &controls, &problem.cost)?,
        min_phi: sep.min_phi,
        max_phi: sep.max_phi,
        mass_max_relative: mass_identity_residuals(&traj).max_relative(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizeSummary {
    pub cost: f64,
    pub stationarity: f64,
    pub iterations: usize,
    pub termination: Termination,
    /// `None` when γ₅ or γ₆ vanishes.
    pub clamp_residuals: Option<(f64, f64)>,
    pub min_phi: f64,
    pub max_phi: f64,
}

pub fn optimize_run(cfg: &RunConfig, out: &Path) -> Result<OptimizeSummary, RunError> {
    prepare(out, cfg)?;
    let problem = cfg.problem()?;
    let bounds = cfg.control_box()?;
    let rep = optimize(&problem, &bounds, &cfg.optimizer, None)?;

    let mut hist = Table::new(&["iter", "J", "stationarity", "step", "armijo_rejections"]);
    for h in &rep.history {
        hist.push(row![h.iter, h.cost, h.stationarity, h.step, h.armijo_rejections]);
    }
    write_table(&hist, &out.join("history.csv"))?;
    write_snapshot(&out.join("controls.tgf"), &controls_snapshot(&rep.controls))?;
    write_trajectory(&rep.last.trajectory, cfg.output.snapshot_every, out)?;

    let clamp = clamp_characterization_residual(&rep.controls, &rep.last.adjoint, &rep.last.trajectory, &cfg.cost.gammas, &bounds).ok();
    let sep = separation_report(&rep.last.trajectory);
    let summary = OptimizeSummary {
        cost: rep.final_cost(),
        stationarity: rep.stationarity,
        iterations: rep.history.len() - 1,
        termination: rep.termination,
        clamp_residuals: clamp,
        min_phi: sep.min_phi,
        max_phi: sep.max_phi,
    };
    if rep.termination == Termination::LineSearchStall {
        return Err(RunError::Solver(tumorctl_core::Error::LineSearchStall {
            iteration: summary.iterations,
            step: rep.history.last().map_or(0.0, |h| h.step),
        }));
    }
    Ok(summary)
}

pub const GRADCHECK_DIRECTIONS: u64 = 5;
pub const GRADCHECK_THRESHOLD: f64 = 1e-6;

/// Adjoint gradient against central differences in seeded random directions.
pub fn gradcheck(cfg: &RunConfig, out: &Path, jobs: usize) -> Result<f64, RunError> {
    prepare(out, cfg)?;
    let problem = cfg.problem()?;
    let controls = cfg.control_box()?.midpoint();
    let eval = problem.cost_and_gradient(&controls)?;
    let step = default_fd_step(&controls);
    let seeds: Vec<u64> = (0..GRADCHECK_DIRECTIONS).map(|i| cfg.seed.wrapping_add(i)).collect();
    let fds = parallel_map(&seeds, jobs, |&s| {
        let d = random_direction(&cfg.domain, cfg.time.steps, s);
        fd_gradient(&problem, &controls, &d, step).map(|fd| (eval.gradient.plain_dot(&d), fd))
    });
    let mut t = Table::new(&["direction", "seed", "analytic", "finite_difference", "rel_err"]);
    let mut worst: f64 = 0.0;
    for (i, (seed, r)) in seeds.iter().zip(fds).enumerate() {
        let (a, fd) = r?;
        let e = relative_error(a, fd);
        worst = worst.max(e);
        t.push(row![i, *seed, a, fd, e]);
    }
    write_table(&t, &out.join("gradcheck.csv"))?;
    Ok(worst)
}

/// One line of the verification battery.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeRow {
    pub probe: &'static str,
    pub statistic: &'static str,
    pub value: f64,
    pub threshold: f64,
    pub pass: bool,
}

impl ProbeRow {
    fn at_most(probe: &'static str, statistic: &'static str, value: f64, threshold: f64) -> Self {
        ProbeRow { probe, statistic, value, threshold, pass: value <= threshold }
    }

    fn at_least(probe: &'static str, statistic: &'static str, value: f64, threshold: f64) -> Self {
        ProbeRow { probe, statistic, value, threshold, pass: value >= threshold }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Probe {
    Duality,
    Gradient,
    Frechet,
    Tangent,
    Lipschitz,
    Separation,
    Mass,
    ContinuousAdjoint,
}

const PROBES: [Probe; 8] = [
    Probe::Duality,
    Probe::Gradient,
    Probe::Frechet,
    Probe::Tangent,
    Probe::Lipschitz,
    Probe::Separation,
    Probe::Mass,
    Probe::ContinuousAdjoint,
];

fn run_probe(probe: Probe, cfg: &RunConfig, problem: &ControlProblem, c: &ControlField) -> Result<Vec<ProbeRow>, RunError> {
    let (d, n, seed) = (&cfg.domain, cfg.time.steps, cfg.seed);
    let dir = |i: u64| random_direction(d, n, seed.wrapping_add(i));
    Ok(match probe {
        Probe::Duality => {
            let traj = problem.solve(c)?;
            let mut worst: f64 = 0.0;
            for i in 0..3 {
                worst = worst.max(duality_gap(&traj, &dir(i), seed.wrapping_add(100 + i))?);
            }
            vec![ProbeRow::at_most("duality", "max_relative_gap", worst, 1e-10)]
        }
        Probe::Gradient => {
            let eval = problem.cost_and_gradient(c)?;
            let mut worst: f64 = 0.0;
            for i in 0..3 {
                let fd = fd_gradient(problem, c, &dir(i), default_fd_step(c))?;
                worst = worst.max(relative_error(eval.gradient.plain_dot(&dir(i)), fd));
            }
            vec![ProbeRow::at_most("gradient", "max_rel_err", worst, GRADCHECK_THRESHOLD)]
        }
        Probe::Frechet => {
            let p = frechet_order_probe(problem, c, &dir(0), &[1e-1, 3e-2, 1e-2, 3e-3])?;
            let slope = if p.monotone { p.slope } else { f64::NAN };
            vec![ProbeRow { pass: slope >= 1.9, ..ProbeRow::at_least("frechet", "remainder_slope", slope, 1.9) }]
        }
        Probe::Tangent => {
            let p = tangent_consistency_probe(problem, c, &dir(0), &[1e-1, 1e-2, 1e-3])?;
            vec![ProbeRow::at_least("tangent", "error_slope", p.slope, 0.9)]
        }
        Probe::Lipschitz => {
            let mut spread: f64 = 1.0;
            for i in 0..3 {
                let pairs: Vec<_> = [0.1, 0.05, 0.025].iter().map(|s| (c.axpy(*s, &dir(i)), c.clone())).collect();
                let ratios = lipschitz_probe(problem, &pairs)?;
                let (lo, hi) = ratios.iter().fold((f64::INFINITY, 0.0f64), |(a, b), r| (a.min(*r), b.max(*r)));
                spread = spread.max(hi / lo);
            }
            vec![ProbeRow::at_most("lipschitz", "max_ratio_spread", spread, 2.0)]
        }
        Probe::Separation => {
            let rep = separation_report(&problem.solve(c)?);
            if rep.applicable {
                let margin = rep.margin_low.min(rep.margin_high);
                vec![ProbeRow { pass: margin > 0.0, ..ProbeRow::at_least("separation", "min_margin", margin, 0.0) }]
            } else {
                vec![ProbeRow { probe: "separation", statistic: "not_applicable", value: f64::INFINITY, threshold: 0.0, pass: true }]
            }
        }
        Probe::Mass => {
            let rep = mass_identity_residuals(&problem.solve(c)?);
            vec![ProbeRow::at_most("mass", "max_relative_residual", rep.max_relative(), 1e-10)]
        }
        Probe::ContinuousAdjoint => {
            let build = |steps: usize| {
                let mut sub = cfg.clone();
                sub.potential = PotentialSpec::Regular;
                sub.time = tumorctl_core::state::TimeGrid::new(cfg.time.t_final, steps)?;
                let p = sub.problem()?;
                Ok((p, sub.control_box()?.midpoint()))
            };
            let study = continuous_adjoint_crosscheck(build, &[n, 2 * n, 4 * n])?;
            vec![ProbeRow::at_least("continuous_adjoint", "min_order", study.min_order(), 0.9)]
        }
    })
}

/// The full probe battery at the box midpoint.
pub fn verify(cfg: &RunConfig, out: &Path, jobs: usize) -> Result<Vec<ProbeRow>, RunError> {
    prepare(out, cfg)?;
    let problem = cfg.problem()?;
    let c = cfg.control_box()?.midpoint();
    let results = parallel_map(&PROBES, jobs, |&p| run_probe(p, cfg, &problem, &c));
    let mut rows = Vec::new();
    for r in results {
        rows.extend(r?);
    }
    let mut t = Table::new(&["probe", "statistic", "value", "threshold", "pass"]);
    for r in &rows {
        t.push(row![r.probe, r.statistic, r.value, r.threshold, r.pass]);
    }
    write_table(&t, &out.join("verify.csv"))?;
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepTask {
    Simulate,
    Optimize,
}

/// `key=v1,v2,...`.
pub fn parse_vary(spec: &str) -> Result<(String, Vec<String>), RunError> {
    let (key, values) = spec.split_once('=').ok_or_else(|| RunError::Usage(format!("--vary {spec:?}: expected key=v1,v2,...")))?;
    let values: Vec<String> = values.split(',').map(|v| v.trim().to_string()).filter(|v| !v.is_empty()).collect();
    if values.is_empty() {
        return Err(RunError::Usage(format!("--vary {spec:?}: no values")));
    }
    Ok((key.trim().to_string(), values))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSummary {
    pub runs: usize,
    pub failures: usize,
}

/// Runs every combination of the varied keys (last key fastest) in its own
/// subdirectory and writes `summary.csv`.
pub fn sweep(base: &Settings, vary: &[(String, Vec<String>)], task: SweepTask, out: &Path, jobs: usize) -> Result<SweepSummary, RunError> {
    fs::create_dir_all(out).map_err(io_err(out))?;
    let mut combos: Vec<Vec<&str>> = vec![vec![]];
    for (_, values) in vary {
        combos = combos.iter().flat_map(|c| values.iter().map(move |v| [c.clone(), vec![v.as_str()]].concat())).collect();
    }
    let indexed: Vec<(usize, Vec<&str>)> = combos.into_iter().enumerate().collect();
    let results = parallel_map(&indexed, jobs, |(i, values)| -> Result<(f64, Option<f64>, f64, f64), RunError> {
        let dir: PathBuf = out.join(format!("run_{i:03}"));
        let mut s = base.clone();
        for ((key, _), v) in vary.iter().zip(values) {
            s.apply_override(&format!("{key}={v}"))?;
        }
        let cfg = RunConfig::from_settings(s)?;
        match task {
            SweepTask::Simulate => simulate(&cfg, &dir).map(|r| (r.cost, None, r.min_phi, r.max_phi)),
            SweepTask::Optimize => optimize_run(&cfg, &dir).map(|r| (r.cost, Some(r.stationarity), r.min_phi, r.max_phi)),
        }
    });
    let mut header = vec!["run".to_string()];
    header.extend(vary.iter().map(|(k, _)| k.clone()));
    header.extend(["status", "cost", "stationarity", "min_phi", "max_phi", "message"].map(String::from));
    let mut t = Table::new(&header);
    let mut failures = 0;
    for ((i, values), r) in indexed.iter().zip(results) {
        let mut line = vec![format!("run_{i:03}")];
        line.extend(values.iter().map(|v| v.to_string()));
        match r {
            Ok((cost, stat, lo, hi)) => line.extend(row!["ok", cost, stat.map_or(String::new(), |s| format!("{s:e}")), lo, hi, ""]),
            Err(e) => {
                failures += 1;
                line.extend(row!["failed", "", "", "", "", e.to_string()]);
            }
        }
        t.push(line);
    }
    write_table(&t, &out.join("summary.csv"))?;
    Ok(SweepSummary { runs: indexed.len(), failures })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parallel_map_keeps_order() {
        let items: Vec<u64> = (0..37).collect();
        for jobs in [1, 3, 64] {
            assert_eq!(parallel_map(&items, jobs, |x| x * x), items.iter().map(|x| x * x).collect::<Vec<_>>());
        }
        assert!(parallel_map(&Vec::<u8>::new(), 4, |x| *x).is_empty());
    }

    #[test]
    fn vary_syntax() {
        assert_eq!(parse_vary("model.chi=0.5, 1").unwrap(), ("model.chi".into(), vec!["0.5".into(), "1".into()]));
        assert!(parse_vary("model.chi").is_err());
        assert!(parse_vary("model.chi=").is_err());
    }
}
