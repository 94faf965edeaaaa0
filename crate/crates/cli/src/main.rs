//! `aggnash`: validate, solve, sweep and evaluate configured Cournot
//! experiments. Exit codes: 0 ok, 1 invalid input or failed validation,
//! 2 runtime failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use aggnash::config::ExperimentConfig;
use aggnash::experiment::{self, provenance_line};
use aggnash::quality::{epsilon_nash, feasibility_check, vi_residual};
use aggnash::{Error, Mode, Rounds};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "aggnash", version, about = "Distributed equilibria of average aggregative games")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides output.dir.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides solver.mode.
    #[arg(long, value_parser = ["nash", "wardrop"])]
    mode: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Check the communication matrix and monotonicity, report the step-size bound.
    Validate(Common),
    /// Run the distributed iteration and write the equilibrium, trace and quality report.
    Solve(Common),
    /// Solve for every ν of sweep.nu and compare against the exact-average reference.
    Sweep(Common),
    /// Evaluate a profile CSV written by `solve`.
    Epsilon {
        #[command(flatten)]
        common: Common,
        /// Profile CSV (agent,component,value).
        #[arg(long)]
        profile: PathBuf,
    },
}

/// Failure with its exit code.
struct Failure {
    code: u8,
    msg: String,
}

impl Failure {
    fn input(msg: impl Into<String>) -> Self {
        Self { code: 1, msg: msg.into() }
    }

    fn runtime(msg: impl Into<String>) -> Self {
        Self { code: 2, msg: msg.into() }
    }
}

/// Bad input is the caller's to fix; everything else happened while running.
impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidInput(_) | Error::Dimension(_) | Error::Parse { .. } | Error::Unsupported(_) => Failure::input(e.to_string()),
            _ => Failure::runtime(e.to_string()),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}

fn load(common: &Common) -> Result<ExperimentConfig, Failure> {
    let mut cfg = ExperimentConfig::load(&common.config).map_err(|e| Failure::input(format!("{}: {e}", common.config.display())))?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(mode) = &common.mode {
        cfg.solver.mode = mode.clone();
    }
    if let Some(out) = &common.out {
        cfg.output.dir = out.clone();
    }
    Ok(cfg)
}

fn write(dir: &Path, name: &str, text: &str) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| Failure::runtime(format!("creating {}: {e}", dir.display())))?;
    let path = dir.join(name);
    fs::write(&path, text).map_err(|e| Failure::runtime(format!("writing {}: {e}", path.display())))?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::Validate(common) => {
            let cfg = load(&common)?;
            let (game, comm) = cfg.build()?;
            let summary = experiment::validate(&cfg, &game, &comm)?;
            print!("{}", summary.to_kv());
            if summary.tau_exceeds_bound() {
                eprintln!("warning: tau = {:e} is not below the sufficient bound {:e}", summary.tau, summary.bound.map_or(f64::NAN, |b| b.tau_max));
            }
            if summary.ok() {
                Ok(())
            } else {
                Err(Failure::input("validation failed"))
            }
        }
        Command::Solve(common) => {
            let cfg = load(&common)?;
            let (game, comm) = cfg.build()?;
            let summary = experiment::validate(&cfg, &game, &comm)?;
            if summary.tau_exceeds_bound() {
                eprintln!(
                    "warning: tau = {:e} is not below the sufficient bound {:e}; running anyway",
                    summary.tau,
                    summary.bound.map_or(f64::NAN, |b| b.tau_max)
                );
            }
            let dir = cfg.output.dir.clone();
            let mut trace = Vec::new();
            let outcome = match experiment::solve(&cfg, &game, &comm, &mut trace) {
                Ok(o) => o,
                Err(e) => {
                    write(&dir, "trace.csv", &experiment::trace_csv(&cfg, &trace))?;
                    return Err(e.into());
                }
            };
            write(&dir, "equilibrium.csv", &experiment::profile_csv(&cfg, &outcome.report.profile))?;
            write(&dir, "sales.csv", &experiment::sales_csv(&cfg, &game, &outcome.report.profile))?;
            write(&dir, "trace.csv", &experiment::trace_csv(&cfg, &outcome.report.trace))?;
            let report = provenance_line(&cfg) + &outcome.summary_kv();
            write(&dir, "quality.txt", &report)?;
            print!("{}", outcome.summary_kv());
            if !outcome.report.converged {
                eprintln!("warning: stopped at the iteration cap without meeting the stop tolerance");
            }
            Ok(())
        }
        Command::Sweep(common) => {
            let cfg = load(&common)?;
            let (game, comm) = cfg.build()?;
            let out = experiment::sweep(&cfg, &game, &comm)?;
            let csv = experiment::sweep_csv(&cfg, &out.rows);
            write(&cfg.output.dir, "sweep.csv", &csv)?;
            print!("{}", csv);
            if out.rows.iter().all(|r| r.error.is_some()) {
                return Err(Failure::runtime("every sweep value failed"));
            }
            Ok(())
        }
        Command::Epsilon { common, profile } => {
            let cfg = load(&common)?;
            let (game, comm) = cfg.build()?;
            let text = fs::read_to_string(&profile).map_err(|e| Failure::input(format!("{}: {e}", profile.display())))?;
            let x = experiment::read_profile_csv(&text, &game.game.dims()).map_err(|e| Failure::input(format!("{}: {e}", profile.display())))?;
            let solver = cfg.solver_config()?;
            let feas = feasibility_check(&game.game, &x, cfg.quality.feasibility_tol)?;
            let vi = vi_residual(&game.game, &comm, Rounds::Finite(solver.nu), &x, solver.mode)?;
            let mut report = format!("mode = {}\ncoupling_residual = {:e}\nvi_residual = {:e}\n", solver.mode, feas.coupling_residual, vi);
            if solver.mode == Mode::Wardrop {
                eprintln!("note: eps_rel measures unilateral improvement of the Nash costs");
            }
            let q = epsilon_nash(&game.game, &x, &cfg.epsilon_options())?;
            report.push_str(&q.to_kv());
            write(&cfg.output.dir, "epsilon.txt", &(provenance_line(&cfg) + &report))?;
            print!("{report}");
            Ok(())
        }
    }
}
