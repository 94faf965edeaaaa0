//! Quality of a candidate profile: feasibility of the exact-average
//! coupling, Nash gaps from per-agent best responses, and a natural-map
//! residual of the variational inequality.

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::game::Rounds;
use crate::projection::Halfspace;
use crate::{CommMatrix, Error, Game, LocalSet, Mode, Result, StrategyProfile};

/// Whether a best response must respect the coupling constraint given the
/// other agents' strategies.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum CouplingMode {
    #[default]
    With,
    Without,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BestResponseOptions {
    /// Stop when the projected-gradient fixed-point residual drops below.
    pub tol: f64,
    pub max_iter: usize,
    /// Gradient-difference pairs used to estimate the Lipschitz constant.
    pub lipschitz_samples: usize,
    pub seed: u64,
}

impl Default for BestResponseOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 1_000_000,
            lipschitz_samples: 32,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BestResponse {
    pub strategy: DVector<f64>,
    /// Cost at the best response, with the exact average.
    pub value: f64,
    pub iterations: usize,
}

/// Exact-average cost of agent `i` as a function of its own strategy, the
/// others held fixed.
struct Unilateral<'a> {
    game: &'a Game,
    i: usize,
    /// `(1/N) Σ_{j≠i} (Hʲxʲ + hʲ)`.
    rest: DVector<f64>,
    inv_n: f64,
}

impl<'a> Unilateral<'a> {
    fn new(game: &'a Game, i: usize, x: &StrategyProfile) -> Self {
        let inv_n = 1.0 / game.num_agents() as f64;
        let mut rest = DVector::zeros(game.agg_dim());
        for (j, a) in game.agents().iter().enumerate() {
            if j != i {
                rest.axpy(inv_n, &a.image(&x[j]), 1.0);
            }
        }
        Self { game, i, rest, inv_n }
    }

    fn aggregate(&self, z: &DVector<f64>) -> DVector<f64> {
        &self.rest + self.game.agent(self.i).image(z) * self.inv_n
    }

    fn value(&self, z: &DVector<f64>) -> Result<f64> {
        self.game.agent(self.i).cost.value(z, &self.aggregate(z))
    }

    fn gradient(&self, z: &DVector<f64>) -> Result<DVector<f64>> {
        self.game.operator_block(self.i, z, &self.aggregate(z), self.inv_n, Mode::Nash)
    }

    /// `Â(Hⁱz + hⁱ)/N ≤ b̂ − Â·rest + slack`, one halfspace per coupling
    /// row.
    fn coupling_halfspaces(&self, slack: &DVector<f64>, tol: f64) -> Result<Vec<Halfspace>> {
        let agent = self.game.agent(self.i);
        let c = self.game.coupling();
        let rows = &c.a_hat * &agent.selection * self.inv_n;
        let rhs = &c.b_hat - &c.a_hat * (&self.rest + &agent.offset * self.inv_n) + slack;
        let mut out = Vec::new();
        for r in 0..c.rows() {
            let row: Vec<f64> = rows.row(r).iter().copied().collect();
            if row.iter().all(|&v| v == 0.0) {
                // the agent cannot influence this row
                if rhs[r] < -tol {
                    return Err(Error::Infeasible(format!(
                        "coupling row {} is violated by {:e} regardless of agent {}",
                        r + 1,
                        -rhs[r],
                        self.i + 1
                    )));
                }
                continue;
            }
            out.push(Halfspace::from_dense(&row, rhs[r])?);
        }
        Ok(out)
    }
}

/// Largest sampled ratio `‖∇φ(a) − ∇φ(b)‖ / ‖a − b‖` over points of `set`.
fn sampled_lipschitz(f: &Unilateral<'_>, set: &LocalSet, around: &DVector<f64>, samples: usize, seed: u64) -> Result<f64> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = set.dim();
    let draw = |rng: &mut ChaCha8Rng| -> Result<DVector<f64>> {
        let raw = DVector::from_fn(n, |k, _| {
            let (lo, hi) = (set.lower()[k], set.upper()[k]);
            if lo.is_finite() && hi.is_finite() {
                lo + (hi - lo) * rng.random::<f64>()
            } else {
                around[k] + rng.random::<f64>() - 0.5
            }
        });
        set.project(&raw)
    };
    let mut best = 0.0_f64;
    for s in 0..samples.max(1) {
        let a = draw(&mut rng)?;
        // half the pairs are short steps away from the current point
        let b = if s % 2 == 0 {
            draw(&mut rng)?
        } else {
            let dir = DVector::from_fn(n, |_, _| rng.random::<f64>() - 0.5);
            around + dir * 1e-3
        };
        let d = (&a - &b).norm();
        if d > 1e-12 {
            best = best.max((f.gradient(&a)? - f.gradient(&b)?).norm() / d);
        }
    }
    Ok(best)
}

/// Minimizes agent `i`'s exact-average cost over its own strategy with the
/// others fixed at `x`, by projected gradient with step `0.9/L̂`, warm
/// started at `xⁱ`. The step is halved whenever the cost increases, which
/// guards against an underestimated `L̂`.
///
/// With coupling, each row is relaxed by the amount `x` itself violates it,
/// so `xⁱ` stays admissible when `x` is only approximately feasible. For a
/// feasible `x` this is exactly the set of coupling-feasible deviations.
pub fn best_response(game: &Game, i: usize, x: &StrategyProfile, coupling: CouplingMode, opts: &BestResponseOptions) -> Result<BestResponse> {
    game.check_profile(x)?;
    if i >= game.num_agents() {
        return Err(Error::InvalidInput(format!("agent {} of {}", i + 1, game.num_agents())));
    }
    let f = Unilateral::new(game, i, x);
    let agent = game.agent(i);
    let set = match coupling {
        CouplingMode::Without => agent.set.clone(),
        CouplingMode::With => {
            let c = game.coupling();
            let slack = (&c.a_hat * game.global_aggregate(x)? - &c.b_hat).map(|v| v.max(0.0));
            agent.set.intersect(f.coupling_halfspaces(&slack, opts.tol)?)?
        }
    };
    let proj_tol = (opts.tol * 1e-3).max(1e-15);
    let mut warm = DVector::zeros(0);
    let mut z = set.project_warm(&x[i], proj_tol, &mut warm)?;
    let lip = sampled_lipschitz(&f, &set, &z, opts.lipschitz_samples, opts.seed ^ (i as u64).wrapping_mul(0x9e37_79b9))?;
    let mut step = if lip > 0.0 { 0.9 / lip } else { 1.0 };
    let mut value = f.value(&z)?;
    let mut residual = f64::INFINITY;
    for k in 0..opts.max_iter {
        let g = f.gradient(&z)?;
        let next = set.project_warm(&(&z - &g * step), proj_tol, &mut warm)?;
        residual = (&next - &z).amax();
        if residual < opts.tol {
            return Ok(BestResponse { strategy: next.clone(), value: f.value(&next)?, iterations: k + 1 });
        }
        let next_value = f.value(&next)?;
        if !next_value.is_finite() {
            return Err(Error::Divergence { iteration: k + 1, agent: i + 1 });
        }
        if next_value > value + 1e-14 * value.abs().max(1.0) {
            step *= 0.5;
            continue;
        }
        z = next;
        value = next_value;
    }
    Err(Error::NonConvergence {
        what: "best response",
        iterations: opts.max_iter,
        residual,
    }
    .for_agent(i + 1))
}

/// Violations of the exact-average coupling and of each local set.
#[derive(Clone, Debug, PartialEq)]
pub struct Feasibility {
    pub coupling_residual: f64,
    pub local_residuals: Vec<f64>,
    pub feasible: bool,
}

impl Feasibility {
    pub fn worst(&self) -> f64 {
        self.local_residuals.iter().fold(self.coupling_residual, |m, &v| m.max(v))
    }
}

pub fn feasibility_check(game: &Game, x: &StrategyProfile, tol: f64) -> Result<Feasibility> {
    let sigma = game.global_aggregate(x)?;
    let coupling_residual = game.coupling().violation(&sigma);
    let local_residuals: Vec<f64> = game.agents().iter().zip(&x.0).map(|(a, xi)| a.set.violation(xi)).collect();
    let feasible = coupling_residual <= tol && local_residuals.iter().all(|&v| v <= tol);
    Ok(Feasibility {
        coupling_residual,
        local_residuals,
        feasible,
    })
}

/// One agent's unilateral improvement.
#[derive(Clone, Debug, PartialEq)]
pub struct AgentImprovement {
    pub current: f64,
    pub best: f64,
    /// `current − best`, floored at zero.
    pub gap: f64,
    /// `gap / |current|`.
    pub relative: f64,
    pub iterations: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QualityReport {
    pub feasible: bool,
    pub residual: f64,
    pub eps_abs: f64,
    pub eps_rel: f64,
    pub per_agent: Vec<AgentImprovement>,
}

impl QualityReport {
    /// Flat `key = value` lines.
    pub fn to_kv(&self) -> String {
        let mut s = format!(
            "feasible = {}\nresidual = {:e}\neps_abs = {:e}\neps_rel = {:e}\n",
            self.feasible, self.residual, self.eps_abs, self.eps_rel
        );
        for (i, a) in self.per_agent.iter().enumerate() {
            let k = i + 1;
            s.push_str(&format!(
                "agent{k}.current = {:e}\nagent{k}.best = {:e}\nagent{k}.gap = {:e}\nagent{k}.relative = {:e}\n",
                a.current, a.best, a.gap, a.relative
            ));
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpsilonOptions {
    /// Largest violation tolerated before refusing to evaluate.
    pub feasibility_tol: f64,
    pub best_response: BestResponseOptions,
}

impl Default for EpsilonOptions {
    fn default() -> Self {
        Self {
            feasibility_tol: 1e-6,
            best_response: BestResponseOptions::default(),
        }
    }
}

/// Absolute and relative ε of `x` as a Nash equilibrium of the
/// exact-average game, each agent restricted to the coupling-feasible
/// strategies given the others.
pub fn epsilon_nash(game: &Game, x: &StrategyProfile, opts: &EpsilonOptions) -> Result<QualityReport> {
    let feas = feasibility_check(game, x, opts.feasibility_tol)?;
    if !feas.feasible {
        return Err(Error::Infeasible(format!(
            "profile violates its constraints by {:e} (tolerance {:e}); inspect it with feasibility_check",
            feas.worst(),
            opts.feasibility_tol
        )));
    }
    let per_agent = (0..game.num_agents())
        .into_par_iter()
        .map(|i| {
            let current = game.cost(i, x)?;
            let br = best_response(game, i, x, CouplingMode::With, &opts.best_response).map_err(|e| match e {
                e @ Error::Agent { .. } => e,
                e => e.for_agent(i + 1),
            })?;
            let gap = (current - br.value).max(0.0);
            Ok(AgentImprovement {
                current,
                best: br.value,
                gap,
                relative: if current != 0.0 { gap / current.abs() } else { 0.0 },
                iterations: br.iterations,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(QualityReport {
        feasible: feas.feasible,
        residual: feas.worst(),
        eps_abs: per_agent.iter().map(|a| a.gap).fold(0.0, f64::max),
        eps_rel: per_agent.iter().map(|a| a.relative).fold(0.0, f64::max),
        per_agent,
    })
}

/// Natural-map residual `‖x − Π_Q[x − F(x)]‖_∞` of the variational
/// inequality whose solutions are the variational equilibria, with `Q` the
/// product of the local sets intersected with the stacked coupling.
pub fn vi_residual(game: &Game, comm: &CommMatrix, rounds: Rounds, x: &StrategyProfile, mode: Mode) -> Result<f64> {
    let f = game.eval_operator(comm, rounds, x, mode)?.stack();
    let (a, b) = game.coupling_matrices(comm, rounds);
    let mut rows: Vec<Halfspace> = Vec::with_capacity(a.nrows());
    for r in 0..a.nrows() {
        let row: Vec<f64> = a.row(r).iter().copied().collect();
        if row.iter().all(|&v| v == 0.0) {
            continue;
        }
        let h = Halfspace::from_dense(&row, b[r])?;
        // exact averaging repeats the same rows once per agent
        if !rows.contains(&h) {
            rows.push(h);
        }
    }
    let set = game.stacked_set().intersect(rows)?;
    let xs = x.stack();
    let p = set.project_tol(&(&xs - f), 1e-12)?;
    Ok((xs - p).amax())
}
