//! End-to-end runs driven by an [`ExperimentConfig`]: validation summary,
//! a single solve with its quality report, and the ν-sweep against the
//! exact-average reference. Results render to CSV and flat text.

use rayon::prelude::*;

use crate::config::ExperimentConfig;
use crate::cournot::CournotGame;
use crate::game::Rounds;
use crate::quality::{epsilon_nash, feasibility_check, vi_residual, Feasibility};
use crate::solver::{run_distributed, run_distributed_traced, step_size_bound, trace_table, StepBound, TracePoint};
use crate::{CommMatrix, EquilibriumReport, Error, QualityReport, Result, StrategyProfile, ValidationReport};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// First line of every CSV written for a config.
pub fn provenance_line(cfg: &ExperimentConfig) -> String {
    format!("# aggnash {VERSION} config {}\n", cfg.hash())
}

#[derive(Clone, Debug, PartialEq)]
pub struct ValidationSummary {
    pub comm: ValidationReport,
    /// Closed-form constants, when the price model allows them.
    pub alpha: Option<f64>,
    pub lipschitz: Option<f64>,
    pub norm_a: Option<f64>,
    pub bound: Option<StepBound>,
    /// Sampled smallest eigenvalue of the symmetrized operator Jacobian.
    pub alpha_sampled: f64,
    pub tau: f64,
}

impl ValidationSummary {
    /// Communication matrix admissible and the operator sampled strongly
    /// monotone.
    pub fn ok(&self) -> bool {
        self.comm.ok() && self.alpha_sampled > 0.0
    }

    pub fn tau_exceeds_bound(&self) -> bool {
        self.bound.is_some_and(|b| self.tau >= b.tau_max)
    }

    pub fn to_kv(&self) -> String {
        let opt = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:e}"));
        format!(
            "doubly_stochastic = {}\nprimitive = {}\nalpha = {}\nalpha_sampled = {:e}\nlipschitz = {}\nnorm_a = {}\ntau_max = {}\ntau = {:e}\nok = {}\n",
            self.comm.doubly_stochastic,
            self.comm.primitive,
            opt(self.alpha),
            self.alpha_sampled,
            opt(self.lipschitz),
            opt(self.norm_a),
            opt(self.bound.map(|b| b.tau_max)),
            self.tau,
            self.ok()
        )
    }
}

pub fn validate(cfg: &ExperimentConfig, game: &CournotGame, comm: &CommMatrix) -> Result<ValidationSummary> {
    let solver = cfg.solver_config()?;
    let report = comm.validate()?;
    let rounds = Rounds::Finite(solver.nu);
    let constants = game.constants(comm, rounds).ok();
    let bound = match constants {
        Some(c) if c.norm_a > 0.0 => Some(step_size_bound(c.alpha, c.lipschitz, c.norm_a)?),
        _ => None,
    };
    // sampling needs a doubly stochastic matrix to mix with
    let alpha_sampled = if report.doubly_stochastic {
        game.game
            .estimate_monotonicity_with(comm, rounds, cfg.quality.monotonicity_samples.max(1), cfg.seed, solver.mode, crate::game::FD_STEP)?
    } else {
        f64::NAN
    };
    Ok(ValidationSummary {
        comm: report,
        alpha: constants.map(|c| c.alpha),
        lipschitz: constants.map(|c| c.lipschitz),
        norm_a: constants.map(|c| c.norm_a),
        bound,
        alpha_sampled,
        tau: solver.tau,
    })
}

#[derive(Clone, Debug)]
pub struct SolveOutcome {
    pub report: EquilibriumReport,
    pub feasibility: Feasibility,
    pub vi_residual: f64,
    /// The quality report, or why it could not be computed.
    pub quality: Option<std::result::Result<QualityReport, String>>,
}

/// Solves and evaluates. When the solver fails, the trace recorded up to the
/// failure is left in `trace`.
pub fn solve(cfg: &ExperimentConfig, game: &CournotGame, comm: &CommMatrix, trace: &mut Vec<TracePoint>) -> Result<SolveOutcome> {
    let solver = cfg.solver_config()?;
    let report = run_distributed_traced(&game.game, comm, &solver, None, trace)?;
    let feasibility = feasibility_check(&game.game, &report.profile, cfg.quality.feasibility_tol)?;
    let vi = vi_residual(&game.game, comm, Rounds::Finite(solver.nu), &report.profile, solver.mode)?;
    let quality = cfg
        .quality
        .enabled
        .then(|| epsilon_nash(&game.game, &report.profile, &cfg.epsilon_options()).map_err(|e| e.to_string()));
    Ok(SolveOutcome {
        report,
        feasibility,
        vi_residual: vi,
        quality,
    })
}

impl SolveOutcome {
    pub fn summary_kv(&self) -> String {
        let r = &self.report;
        let mut s = format!(
            "mode = {}\nconverged = {}\niterations = {}\nlast_delta = {:e}\ncoupling_residual = {:e}\nvi_residual = {:e}\n",
            r.mode, r.converged, r.iterations, r.last_delta, self.feasibility.coupling_residual, self.vi_residual
        );
        match &self.quality {
            None => {}
            Some(Ok(q)) => s.push_str(&q.to_kv()),
            Some(Err(e)) => s.push_str(&format!("quality_error = {e}\n")),
        }
        s
    }
}

/// `agent,component,value` with 1-based indices.
pub fn profile_csv(cfg: &ExperimentConfig, x: &StrategyProfile) -> String {
    let mut s = provenance_line(cfg);
    s.push_str("agent,component,value\n");
    for (i, xi) in x.0.iter().enumerate() {
        for (k, v) in xi.iter().enumerate() {
            s.push_str(&format!("{},{},{:.12e}\n", i + 1, k + 1, v));
        }
    }
    s
}

/// `firm,market,sales,production` with 1-based indices.
pub fn sales_csv(cfg: &ExperimentConfig, game: &CournotGame, x: &StrategyProfile) -> String {
    let mut s = provenance_line(cfg);
    s.push_str("firm,market,sales,production\n");
    let prod = game.production(x);
    for (i, y) in game.sales(x).iter().enumerate() {
        for (v, val) in y.iter().enumerate() {
            s.push_str(&format!("{},{},{:.12e},{:.12e}\n", i + 1, v + 1, val, prod[i]));
        }
    }
    s
}

pub fn trace_csv(cfg: &ExperimentConfig, trace: &[TracePoint]) -> String {
    provenance_line(cfg) + &trace_table(trace)
}

/// Reads a profile written by [`profile_csv`]; comment lines start with `#`.
pub fn read_profile_csv(text: &str, dims: &[usize]) -> Result<StrategyProfile> {
    let mut x = StrategyProfile::zeros(dims);
    let mut seen: Vec<Vec<bool>> = dims.iter().map(|&d| vec![false; d]).collect();
    let mut header = false;
    for (k, raw) in text.lines().enumerate() {
        let line = k + 1;
        let l = raw.trim();
        if l.is_empty() || l.starts_with('#') {
            continue;
        }
        if !header {
            if l != "agent,component,value" {
                return Err(Error::Parse {
                    line,
                    msg: "expected header \"agent,component,value\"".into(),
                });
            }
            header = true;
            continue;
        }
        let f: Vec<&str> = l.split(',').map(str::trim).collect();
        let bad = |msg: String| Error::Parse { line, msg };
        if f.len() != 3 {
            return Err(bad("expected three fields".into()));
        }
        let i: usize = f[0].parse().map_err(|_| bad(format!("invalid agent {:?}", f[0])))?;
        let c: usize = f[1].parse().map_err(|_| bad(format!("invalid component {:?}", f[1])))?;
        let v: f64 = f[2].parse().map_err(|_| bad(format!("invalid value {:?}", f[2])))?;
        if i == 0 || i > dims.len() || c == 0 || c > dims[i - 1] {
            return Err(bad(format!("entry ({i}, {c}) outside the game's dimensions")));
        }
        x.0[i - 1][c - 1] = v;
        seen[i - 1][c - 1] = true;
    }
    if let Some((i, c)) = seen.iter().enumerate().find_map(|(i, s)| s.iter().position(|&b| !b).map(|c| (i, c))) {
        return Err(Error::InvalidInput(format!("profile is missing agent {} component {}", i + 1, c + 1)));
    }
    Ok(x)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub nu: u32,
    pub iterations: usize,
    pub converged: bool,
    pub eps_rel: Option<f64>,
    /// `‖x̄_ν − x̄_∞‖₂`.
    pub distance: Option<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug)]
pub struct SweepOutcome {
    pub reference: EquilibriumReport,
    pub rows: Vec<SweepRow>,
}

/// Solves the reference with exact averaging (uniform matrix, one round),
/// then every ν of the sweep with the configured matrix. A failing ν is
/// recorded in its row and the sweep continues.
pub fn sweep(cfg: &ExperimentConfig, game: &CournotGame, comm: &CommMatrix) -> Result<SweepOutcome> {
    if cfg.sweep.nu.is_empty() {
        return Err(Error::InvalidInput("sweep.nu is empty".into()));
    }
    let base = cfg.solver_config()?;
    let uniform = CommMatrix::uniform(game.game.num_agents());
    let reference = run_distributed(&game.game, &uniform, &crate::SolverConfig { nu: 1, ..base.clone() }, None)?;
    let eps_opts = cfg.epsilon_options();
    let rows = cfg
        .sweep
        .nu
        .par_iter()
        .map(|&nu| {
            let solver = crate::SolverConfig { nu, ..base.clone() };
            match run_distributed(&game.game, comm, &solver, None) {
                Err(e) => SweepRow {
                    nu,
                    iterations: 0,
                    converged: false,
                    eps_rel: None,
                    distance: None,
                    error: Some(e.to_string()),
                },
                Ok(r) => {
                    let (eps_rel, error) = match epsilon_nash(&game.game, &r.profile, &eps_opts) {
                        Ok(q) => (Some(q.eps_rel), None),
                        Err(e) => (None, Some(e.to_string())),
                    };
                    SweepRow {
                        nu,
                        iterations: r.iterations,
                        converged: r.converged,
                        eps_rel,
                        distance: Some(r.profile.distance(&reference.profile)),
                        error,
                    }
                }
            }
        })
        .collect();
    Ok(SweepOutcome { reference, rows })
}

pub fn sweep_csv(cfg: &ExperimentConfig, rows: &[SweepRow]) -> String {
    let mut s = provenance_line(cfg);
    s.push_str("nu,eps_rel,distance,iterations,converged,error\n");
    let opt = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:.12e}"));
    for r in rows {
        let err = r.error.as_deref().unwrap_or("").replace([',', '\n'], ";");
        s.push_str(&format!("{},{},{},{},{},{}\n", r.nu, opt(r.eps_rel), opt(r.distance), r.iterations, r.converged, err));
    }
    s
}
