//! Argument parsing and dispatch.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 solver or IO
//! failure, 3 verification threshold missed. Every failure also prints one
//! `error kind=... exit=... message=...` line on standard error.

use std::ffi::OsString;
use std::fs;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::{RunConfig, Settings};
use crate::run::{self, RunError, SweepTask, GRADCHECK_THRESHOLD};

#[derive(Debug, Parser)]
#[command(name = "tumorctl", version, about = "Simulate, optimize and verify the chemotactic tumor-growth control model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// INI configuration file.
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Output directory (defaults to output.directory).
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Seed for randomized probes (overrides the config).
    #[arg(long)]
    seed: Option<u64>,
    /// `section.key=value`; beats the file. Repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Debug, Args)]
struct Jobs {
    /// Worker threads for independent solves.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum TaskArg {
    Simulate,
    Optimize,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Forward solve at the box midpoint with monitors and snapshots.
    Simulate(Common),
    /// Projected-gradient optimization.
    Optimize(Common),
    /// Adjoint gradient against central finite differences.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        jobs: Jobs,
    },
    /// The full verification battery.
    Verify {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        jobs: Jobs,
    },
    /// Independent runs over a grid of overrides.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        jobs: Jobs,
        /// `section.key=v1,v2,...`; combinations of all given keys are run. Repeatable.
        #[arg(long, value_name = "KEY=V1,V2")]
        vary: Vec<String>,
        /// What each run does.
        #[arg(long, value_enum, default_value_t = TaskArg::Simulate)]
        task: TaskArg,
    },
}

fn load(common: &Common) -> Result<(Settings, PathBuf), RunError> {
    let text = fs::read_to_string(&common.config)
        .map_err(|e| RunError::Usage(format!("cannot read config {}: {e}", common.config.display())))?;
    let mut settings = Settings::from_ini(&text)?;
    if let Some(seed) = common.seed {
        settings.apply_override(&format!("seed={seed}"))?;
    }
    for o in &common.overrides {
        settings.apply_override(o)?;
    }
    let out = match &common.out {
        Some(p) => p.clone(),
        None => PathBuf::from(settings.get("output.directory")),
    };
    Ok((settings, out))
}

fn dispatch(command: Command) -> Result<(), RunError> {
    match command {
        Command::Simulate(common) => {
            let (s, out) = load(&common)?;
            let cfg = RunConfig::from_settings(s)?;
            let r = run::simulate(&cfg, &out)?;
            println!("simulate cost={:e} min_phi={:e} max_phi={:e} mass_max_relative={:e}", r.cost, r.min_phi, r.max_phi, r.mass_max_relative);
        }
        Command::Optimize(common) => {
            let (s, out) = load(&common)?;
            let cfg = RunConfig::from_settings(s)?;
            let r = run::optimize_run(&cfg, &out)?;
            let clamp = r.clamp_residuals.map_or("n/a".to_string(), |(u, w)| format!("{u:e},{w:e}"));
            println!(
                "optimize termination={:?} iterations={} J={:e} stationarity={:e} clamp_residuals={clamp}",
                r.termination, r.iterations, r.cost, r.stationarity
            );
        }
        Command::Gradcheck { common, jobs } => {
            let (s, out) = load(&common)?;
            let cfg = RunConfig::from_settings(s)?;
            let worst = run::gradcheck(&cfg, &out, jobs.jobs)?;
            let pass = worst <= GRADCHECK_THRESHOLD;
            println!("gradcheck max_rel_err={worst:e} threshold={GRADCHECK_THRESHOLD:e} pass={pass}");
            if !pass {
                return Err(RunError::Verification(format!("max_rel_err {worst:e} exceeds {GRADCHECK_THRESHOLD:e}")));
            }
        }
        Command::Verify { common, jobs } => {
            let (s, out) = load(&common)?;
            let cfg = RunConfig::from_settings(s)?;
            let rows = run::verify(&cfg, &out, jobs.jobs)?;
            for r in &rows {
                println!("verify {} {}={:e} threshold={:e} pass={}", r.probe, r.statistic, r.value, r.threshold, r.pass);
            }
            let failed: Vec<&str> = rows.iter().filter(|r| !r.pass).map(|r| r.probe).collect();
            if !failed.is_empty() {
                return Err(RunError::Verification(format!("failed probes: {}", failed.join(" "))));
            }
        }
        Command::Sweep { common, jobs, vary, task } => {
            let (s, out) = load(&common)?;
            // validate the base before fanning out
            RunConfig::from_settings(s.clone())?;
            let vary = vary.iter().map(|v| run::parse_vary(v)).collect::<Result<Vec<_>, _>>()?;
            let task = match task {
                TaskArg::Simulate => SweepTask::Simulate,
                TaskArg::Optimize => SweepTask::Optimize,
            };
            let r = run::sweep(&s, &vary, task, &out, jobs.jobs)?;
            println!("sweep runs={} failures={}", r.runs, r.failures);
            if r.failures > 0 {
                return Err(RunError::Solver(tumorctl_core::Error::InvalidParameter {
                    name: "sweep",
                    reason: format!("{} of {} runs failed; see summary.csv", r.failures, r.runs),
                }));
            }
        }
    }
    Ok(())
}

fn report(kind: &str, code: u8, message: &str) {
    eprintln!("error kind={kind} exit={code} message={message:?}");
}

/// Parses `args` (program name first) and runs the command; returns the exit code.
pub fn run_cli<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                report("usage", 1, e.kind().as_str().unwrap_or("invalid arguments"));
                1
            } else {
                0
            };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            let code = e.exit_code();
            report(e.kind(), code, &e.to_string());
            code
        }
    }
}
