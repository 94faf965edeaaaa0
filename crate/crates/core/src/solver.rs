//! The distributed primal-dual iteration.
//!
//! Every iteration runs four phases separated by barriers:
//!
//! 1. dual communication: `μⁱ ← λⁱ`, then `ν` rounds over out-neighbors;
//! 2. primal update: `xⁱ ← Π_{Xⁱ}[xⁱ − τ(Fⁱ + Hⁱᵀ Âᵀ μⁱ)]`;
//! 3. primal communication: `σⁱ ← Hⁱxⁱ + hⁱ`, then `ν` rounds over
//!    in-neighbors;
//! 4. dual update: `λⁱ ← Π_{≥0}[λⁱ − τ(b̂ − 2Âσⁱ_new + Âσⁱ_old)]`.
//!
//! Within a phase agents only read values produced by the previous phase, so
//! the per-agent work can run in parallel and still be deterministic.
//! [`CompactIteration`] performs the same update with dense stacked algebra
//! and serves as a cross-check.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::game::Rounds;
use crate::linalg::max_abs_diff;
use crate::projection::{project_nonneg, DEFAULT_TOL};
use crate::{CommMatrix, Direction, Error, Game, Mode, Result, StrategyProfile};

/// How the stopping test measures the change between iterates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum StopNorm {
    /// `max{‖Δx‖_∞, ‖Δλ‖_∞}`.
    #[default]
    Max,
    /// Euclidean norm of the stacked change `(Δx, Δλ)`.
    Euclidean,
}

impl std::str::FromStr for StopNorm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "max" | "inf" => Ok(StopNorm::Max),
            "euclidean" | "l2" | "2" => Ok(StopNorm::Euclidean),
            other => Err(Error::InvalidInput(format!("unknown stop norm {other:?} (expected max or euclidean)"))),
        }
    }
}

impl std::fmt::Display for StopNorm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            StopNorm::Max => "max",
            StopNorm::Euclidean => "euclidean",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolverConfig {
    pub tau: f64,
    pub nu: u32,
    pub stop_tol: f64,
    pub stop_norm: StopNorm,
    pub max_iter: usize,
    pub mode: Mode,
    /// Keep one trace point every `record_every` iterations (plus the last).
    pub record_every: usize,
    /// Tolerance handed to the polyhedral projections.
    pub projection_tol: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            tau: 0.005,
            nu: 10,
            stop_tol: 1e-4,
            stop_norm: StopNorm::Max,
            max_iter: 1_000_000,
            mode: Mode::Nash,
            record_every: 10,
            projection_tol: DEFAULT_TOL,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::InvalidInput(format!("step size tau = {} must be positive", self.tau)));
        }
        if !(self.stop_tol > 0.0) {
            return Err(Error::InvalidInput(format!("stop tolerance {} must be positive", self.stop_tol)));
        }
        if self.nu < 1 {
            return Err(Error::InvalidInput("at least one communication round per iteration is required".into()));
        }
        if !(self.projection_tol > 0.0) {
            return Err(Error::InvalidInput("projection tolerance must be positive".into()));
        }
        Ok(())
    }

    fn record_every(&self) -> usize {
        self.record_every.max(1)
    }
}

/// One agent's local variables.
#[derive(Clone, Debug, PartialEq)]
pub struct AgentState {
    pub x: DVector<f64>,
    pub lambda: DVector<f64>,
    /// Local primal average `σⁱ_ν`.
    pub sigma: DVector<f64>,
    /// Local dual average `μⁱ_ν`.
    pub mu: DVector<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TracePoint {
    pub iter: usize,
    pub dx_inf: f64,
    pub dlambda_inf: f64,
    /// Largest violation of `Â σ_∞(x) ≤ b̂`.
    pub feas_residual: f64,
}

#[derive(Clone, Debug)]
pub struct EquilibriumReport {
    pub profile: StrategyProfile,
    pub duals: Vec<DVector<f64>>,
    pub iterations: usize,
    pub trace: Vec<TracePoint>,
    pub converged: bool,
    /// Last measured change, in the configured stop norm.
    pub last_delta: f64,
    pub mode: Mode,
}

impl EquilibriumReport {
    pub fn trace_csv(&self) -> String {
        trace_table(&self.trace)
    }
}

/// `iter,dx_inf,dlambda_inf,feas_residual` rows with a header.
pub fn trace_table(points: &[TracePoint]) -> String {
    let mut s = String::from("iter,dx_inf,dlambda_inf,feas_residual\n");
    for p in points {
        s.push_str(&format!("{},{:e},{:e},{:e}\n", p.iter, p.dx_inf, p.dlambda_inf, p.feas_residual));
    }
    s
}

/// Right-hand side of the step-size condition guaranteeing convergence,
/// together with the cap `1/‖A‖` it implies.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepBound {
    pub rhs: f64,
    pub tau_max: f64,
}

/// `τ < (−L² + √(L⁴ + 4α²‖A‖²)) / (2α‖A‖²)` for an `α`-strongly monotone,
/// `L`-Lipschitz operator and coupling matrix norm `‖A‖`.
pub fn step_size_bound(alpha: f64, lipschitz: f64, norm_a: f64) -> Result<StepBound> {
    for (name, v) in [("monotonicity constant", alpha), ("Lipschitz constant", lipschitz), ("coupling norm", norm_a)] {
        if !(v > 0.0 && v.is_finite()) {
            return Err(Error::InvalidInput(format!("{name} must be positive, got {v}")));
        }
    }
    let l2 = lipschitz * lipschitz;
    let a2 = norm_a * norm_a;
    let disc = 4.0 * alpha * alpha * a2;
    // √(L⁴ + d) − L² = d / (√(L⁴ + d) + L²), without cancellation
    let numerator = disc / ((l2 * l2 + disc).sqrt() + l2);
    let rhs = numerator / (2.0 * alpha * a2);
    Ok(StepBound {
        rhs,
        tau_max: rhs.min(1.0 / norm_a),
    })
}

/// Default starting point: every agent at the projection of the origin onto
/// its local set, all duals zero.
pub fn default_init(game: &Game) -> Result<(StrategyProfile, Vec<DVector<f64>>)> {
    let x = game
        .agents()
        .iter()
        .enumerate()
        .map(|(i, a)| a.set.project(&DVector::zeros(a.dim())).map_err(|e| e.for_agent(i + 1)))
        .collect::<Result<Vec<_>>>()?;
    let m = game.coupling().rows();
    Ok((StrategyProfile(x), vec![DVector::zeros(m); game.num_agents()]))
}

fn check_init(game: &Game, x0: &StrategyProfile, l0: &[DVector<f64>]) -> Result<()> {
    game.check_profile(x0)?;
    let m = game.coupling().rows();
    if l0.len() != game.num_agents() || l0.iter().any(|l| l.len() != m) {
        return Err(Error::Dimension(format!("initial duals must be {} vectors of length {m}", game.num_agents())));
    }
    if let Some(i) = l0.iter().position(|l| l.iter().any(|&v| v < 0.0)) {
        return Err(Error::InvalidInput(format!("agent {}: initial dual is negative", i + 1)));
    }
    for (i, (xi, a)) in x0.0.iter().zip(game.agents()).enumerate() {
        if !a.set.contains(xi, 1e-9) {
            return Err(Error::InvalidInput(format!("agent {}: initial strategy lies outside its local set", i + 1)));
        }
    }
    Ok(())
}

fn check_finite(v: &DVector<f64>, iteration: usize, agent: usize) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Divergence { iteration, agent: agent + 1 })
    }
}

/// Change between consecutive iterates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepDelta {
    pub dx_inf: f64,
    pub dlambda_inf: f64,
    pub euclidean: f64,
}

impl StepDelta {
    fn measure(x_old: &[DVector<f64>], x_new: &[DVector<f64>], l_old: &[DVector<f64>], l_new: &[DVector<f64>]) -> Self {
        let dx_inf = x_old.iter().zip(x_new).map(|(a, b)| max_abs_diff(a, b)).fold(0.0, f64::max);
        let dlambda_inf = l_old.iter().zip(l_new).map(|(a, b)| max_abs_diff(a, b)).fold(0.0, f64::max);
        let sq: f64 = x_old.iter().zip(x_new).map(|(a, b)| (a - b).norm_squared()).sum::<f64>()
            + l_old.iter().zip(l_new).map(|(a, b)| (a - b).norm_squared()).sum::<f64>();
        Self {
            dx_inf,
            dlambda_inf,
            euclidean: sq.sqrt(),
        }
    }

    pub fn in_norm(&self, norm: StopNorm) -> f64 {
        match norm {
            StopNorm::Max => self.dx_inf.max(self.dlambda_inf),
            StopNorm::Euclidean => self.euclidean,
        }
    }
}

/// A steppable form of the iteration; both implementations share the
/// driver loop in [`drive`].
pub trait Iteration {
    fn step(&mut self) -> Result<StepDelta>;
    fn primal(&self) -> StrategyProfile;
    fn duals(&self) -> Vec<DVector<f64>>;
    fn iteration(&self) -> usize;
}

/// Agent-by-agent execution using only neighbor reads.
pub struct DistributedIteration<'a> {
    game: &'a Game,
    comm: &'a CommMatrix,
    cfg: SolverConfig,
    states: Vec<AgentState>,
    self_weights: Vec<f64>,
    /// Per-agent projection multipliers reused as warm starts.
    warm: Vec<DVector<f64>>,
    k: usize,
}

impl<'a> DistributedIteration<'a> {
    pub fn new(game: &'a Game, comm: &'a CommMatrix, cfg: &SolverConfig, x0: StrategyProfile, l0: Vec<DVector<f64>>) -> Result<Self> {
        cfg.validate()?;
        comm.require_doubly_stochastic()?;
        if comm.size() != game.num_agents() {
            return Err(Error::Dimension(format!("communication matrix is {0}x{0} for {1} agents", comm.size(), game.num_agents())));
        }
        check_init(game, &x0, &l0)?;
        let p = comm.power(cfg.nu);
        let self_weights = (0..game.num_agents()).map(|i| p[(i, i)]).collect();
        // initial primal communication so that σ is the ν-round mix of x₀
        let images = game.images(&x0);
        let sigma = comm.consensus_rounds(&images, cfg.nu, Direction::In)?;
        let states = x0
            .0
            .into_iter()
            .zip(l0)
            .zip(sigma)
            .map(|((x, lambda), sigma)| AgentState {
                mu: lambda.clone(),
                x,
                lambda,
                sigma,
            })
            .collect();
        Ok(Self {
            game,
            comm,
            cfg: cfg.clone(),
            states,
            self_weights,
            warm: vec![DVector::zeros(0); game.num_agents()],
            k: 0,
        })
    }

    pub fn states(&self) -> &[AgentState] {
        &self.states
    }
}

impl Iteration for DistributedIteration<'_> {
    fn step(&mut self) -> Result<StepDelta> {
        let game = self.game;
        let coupling = game.coupling();
        let cfg = &self.cfg;
        let k = self.k;

        // dual communication
        let lambdas: Vec<_> = self.states.iter().map(|s| s.lambda.clone()).collect();
        let mus = self.comm.consensus_rounds(&lambdas, cfg.nu, Direction::Out)?;

        // primal update
        let self_weights = &self.self_weights;
        let new_x = self
            .states
            .par_iter()
            .zip(mus.par_iter())
            .zip(self.warm.par_iter_mut())
            .enumerate()
            .map(|(i, ((s, mu), warm))| {
                let agent = game.agent(i);
                let mut g = game.operator_block(i, &s.x, &s.sigma, self_weights[i], cfg.mode)?;
                if coupling.rows() > 0 {
                    let amu = coupling.a_hat.tr_mul(mu);
                    g.gemv_tr(1.0, &agent.selection, &amu, 1.0);
                }
                let y = &s.x - g * cfg.tau;
                check_finite(&y, k + 1, i)?;
                agent.set.project_warm(&y, cfg.projection_tol, warm).map_err(|e| e.for_agent(i + 1))
            })
            .collect::<Result<Vec<_>>>()?;

        // primal communication
        let images: Vec<_> = new_x.iter().enumerate().map(|(i, x)| game.agent(i).image(x)).collect();
        let new_sigma = self.comm.consensus_rounds(&images, cfg.nu, Direction::In)?;

        // dual update
        let new_lambda = self
            .states
            .iter()
            .zip(&new_sigma)
            .enumerate()
            .map(|(i, (s, sig_new))| {
                if coupling.rows() == 0 {
                    return Ok(s.lambda.clone());
                }
                let step = &coupling.b_hat - &coupling.a_hat * sig_new * 2.0 + &coupling.a_hat * &s.sigma;
                let l = project_nonneg(&(&s.lambda - step * cfg.tau));
                check_finite(&l, k + 1, i)?;
                Ok(l)
            })
            .collect::<Result<Vec<_>>>()?;

        let old_x: Vec<_> = self.states.iter().map(|s| s.x.clone()).collect();
        let delta = StepDelta::measure(&old_x, &new_x, &lambdas, &new_lambda);
        for (((s, x), sigma), (lambda, mu)) in self.states.iter_mut().zip(new_x).zip(new_sigma).zip(new_lambda.into_iter().zip(mus)) {
            s.x = x;
            s.sigma = sigma;
            s.lambda = lambda;
            s.mu = mu;
        }
        self.k += 1;
        Ok(delta)
    }

    fn primal(&self) -> StrategyProfile {
        StrategyProfile(self.states.iter().map(|s| s.x.clone()).collect())
    }

    fn duals(&self) -> Vec<DVector<f64>> {
        self.states.iter().map(|s| s.lambda.clone()).collect()
    }

    fn iteration(&self) -> usize {
        self.k
    }
}

/// Dense stacked form:
/// `x⁺ = Π_X[x − τ(F_ν(x) + A_νᵀλ)]`,
/// `λ⁺ = Π_{≥0}[λ − τ(b − 2A_ν x⁺ + A_ν x)]`
/// with `A_ν = (T^ν ⊗ Â) H_blkd` and `b = 1 ⊗ b̂` (shifted by the offsets).
pub struct CompactIteration<'a> {
    game: &'a Game,
    comm: &'a CommMatrix,
    cfg: SolverConfig,
    a_nu: DMatrix<f64>,
    b: DVector<f64>,
    x: StrategyProfile,
    lambda: DVector<f64>,
    warm: Vec<DVector<f64>>,
    k: usize,
}

impl<'a> CompactIteration<'a> {
    pub fn new(game: &'a Game, comm: &'a CommMatrix, cfg: &SolverConfig, x0: StrategyProfile, l0: Vec<DVector<f64>>) -> Result<Self> {
        cfg.validate()?;
        comm.require_doubly_stochastic()?;
        if comm.size() != game.num_agents() {
            return Err(Error::Dimension(format!("communication matrix is {0}x{0} for {1} agents", comm.size(), game.num_agents())));
        }
        check_init(game, &x0, &l0)?;
        let (a_nu, b) = game.coupling_matrices(comm, Rounds::Finite(cfg.nu));
        let lambda = StrategyProfile(l0).stack();
        Ok(Self {
            game,
            comm,
            cfg: cfg.clone(),
            a_nu,
            b,
            x: x0,
            lambda,
            warm: vec![DVector::zeros(0); game.num_agents()],
            k: 0,
        })
    }

    pub fn coupling_matrix(&self) -> &DMatrix<f64> {
        &self.a_nu
    }
}

impl Iteration for CompactIteration<'_> {
    fn step(&mut self) -> Result<StepDelta> {
        let game = self.game;
        let dims = game.dims();
        let tau = self.cfg.tau;
        let f = game.eval_operator(self.comm, Rounds::Finite(self.cfg.nu), &self.x, self.cfg.mode)?;
        let x_stack = self.x.stack();
        let y = x_stack.clone() - (f.stack() + self.a_nu.tr_mul(&self.lambda)) * tau;
        let y = StrategyProfile::unstack(&y, &dims)?;
        let (k, tol) = (self.k, self.cfg.projection_tol);
        let new_x = y
            .0
            .par_iter()
            .zip(self.warm.par_iter_mut())
            .enumerate()
            .map(|(i, (yi, warm))| {
                check_finite(yi, k + 1, i)?;
                game.agent(i).set.project_warm(yi, tol, warm).map_err(|e| e.for_agent(i + 1))
            })
            .collect::<Result<Vec<_>>>()
            .map(StrategyProfile)?;
        let xn_stack = new_x.stack();
        let new_lambda = project_nonneg(&(&self.lambda - (&self.b - &self.a_nu * &xn_stack * 2.0 + &self.a_nu * &x_stack) * tau));
        let m = game.coupling().rows();
        if m > 0 {
            if let Some(pos) = new_lambda.iter().position(|v| !v.is_finite()) {
                return Err(Error::Divergence { iteration: self.k + 1, agent: pos / m + 1 });
            }
        }
        let old_l = self.duals();
        let old_x = std::mem::replace(&mut self.x, new_x);
        self.lambda = new_lambda;
        let delta = StepDelta::measure(&old_x.0, &self.x.0, &old_l, &self.duals());
        self.k += 1;
        Ok(delta)
    }

    fn primal(&self) -> StrategyProfile {
        self.x.clone()
    }

    fn duals(&self) -> Vec<DVector<f64>> {
        let m = self.game.coupling().rows();
        (0..self.game.num_agents()).map(|i| self.lambda.rows(i * m, m).into_owned()).collect()
    }

    fn iteration(&self) -> usize {
        self.k
    }
}

/// Steps until convergence or the cap. Trace points accumulate in `trace`
/// and move into the report on success; on error the points recorded so far
/// stay with the caller.
fn drive(game: &Game, cfg: &SolverConfig, it: &mut impl Iteration, trace: &mut Vec<TracePoint>) -> Result<EquilibriumReport> {
    let mut last_delta = f64::INFINITY;
    let mut converged = false;
    let feas = |x: &StrategyProfile| -> Result<f64> {
        Ok(game.coupling().violation(&game.global_aggregate(x)?))
    };
    while it.iteration() < cfg.max_iter {
        let d = it.step()?;
        last_delta = d.in_norm(cfg.stop_norm);
        converged = last_delta < cfg.stop_tol;
        let k = it.iteration();
        if k % cfg.record_every() == 0 || converged || k == cfg.max_iter {
            trace.push(TracePoint {
                iter: k,
                dx_inf: d.dx_inf,
                dlambda_inf: d.dlambda_inf,
                feas_residual: feas(&it.primal())?,
            });
        }
        if converged {
            break;
        }
    }
    Ok(EquilibriumReport {
        profile: it.primal(),
        duals: it.duals(),
        iterations: it.iteration(),
        trace: std::mem::take(trace),
        converged,
        last_delta,
        mode: cfg.mode,
    })
}

fn init_or_default(game: &Game, init: Option<(StrategyProfile, Vec<DVector<f64>>)>) -> Result<(StrategyProfile, Vec<DVector<f64>>)> {
    match init {
        Some(i) => Ok(i),
        None => default_init(game),
    }
}

/// Runs the distributed iteration until the change drops below
/// `cfg.stop_tol` or `cfg.max_iter` iterations have been performed.
/// Hitting the cap is not an error: the report has `converged == false`.
pub fn run_distributed(
    game: &Game,
    comm: &CommMatrix,
    cfg: &SolverConfig,
    init: Option<(StrategyProfile, Vec<DVector<f64>>)>,
) -> Result<EquilibriumReport> {
    run_distributed_traced(game, comm, cfg, init, &mut Vec::new())
}

/// [`run_distributed`] with the trace kept in `trace` when the run fails.
pub fn run_distributed_traced(
    game: &Game,
    comm: &CommMatrix,
    cfg: &SolverConfig,
    init: Option<(StrategyProfile, Vec<DVector<f64>>)>,
    trace: &mut Vec<TracePoint>,
) -> Result<EquilibriumReport> {
    let (x0, l0) = init_or_default(game, init)?;
    let mut it = DistributedIteration::new(game, comm, cfg, x0, l0)?;
    drive(game, cfg, &mut it, trace)
}

/// Same iteration in dense stacked form.
pub fn run_compact(
    game: &Game,
    comm: &CommMatrix,
    cfg: &SolverConfig,
    init: Option<(StrategyProfile, Vec<DVector<f64>>)>,
) -> Result<EquilibriumReport> {
    let (x0, l0) = init_or_default(game, init)?;
    let mut it = CompactIteration::new(game, comm, cfg, x0, l0)?;
    drive(game, cfg, &mut it, &mut Vec::new())
}

/// Fixed-point residuals of a report: the max-norm change one more
/// projected step would make to `x` and to `λ`.
pub fn fixed_point_residual(game: &Game, comm: &CommMatrix, cfg: &SolverConfig, x: &StrategyProfile, duals: &[DVector<f64>]) -> Result<(f64, f64)> {
    let mut it = CompactIteration::new(game, comm, cfg, x.clone(), duals.to_vec())?;
    let d = it.step()?;
    Ok((d.dx_inf, d.dlambda_inf))
}
