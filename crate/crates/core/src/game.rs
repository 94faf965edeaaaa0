//! Game model: agents with local strategy sets, selection matrices mapping
//! strategies into the aggregate space, cost oracles, and the shared affine
//! coupling constraint on the aggregate.
//!
//! Agent `i` contributes `Hⁱxⁱ + hⁱ` to the aggregate. The exact aggregate is
//! the population average of these contributions; the local aggregate seen
//! by agent `i` after `ν` communication rounds weights them by row `i` of
//! `T^ν`.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::linalg::{block_diag, sym_eig_extremes};
use crate::{CommMatrix, Error, LocalSet, Result};

/// Cost `Jⁱ(z₁, z₂)` of one agent, where `z₁` is the agent's own strategy
/// and `z₂` the aggregate it reacts to.
pub trait AgentCost: Send + Sync {
    fn value(&self, own: &DVector<f64>, aggregate: &DVector<f64>) -> Result<f64>;

    /// `∇_{z₁} J`, a vector in the agent's strategy space.
    fn grad_own(&self, own: &DVector<f64>, aggregate: &DVector<f64>) -> Result<DVector<f64>>;

    /// `∇_{z₂} J`, a vector in the aggregate space.
    fn grad_aggregate(&self, own: &DVector<f64>, aggregate: &DVector<f64>) -> Result<DVector<f64>>;
}

/// Number of communication rounds. `Infinite` denotes exact averaging.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Rounds {
    Finite(u32),
    Infinite,
}

impl From<u32> for Rounds {
    fn from(nu: u32) -> Self {
        Rounds::Finite(nu)
    }
}

/// Which equilibrium concept the operator encodes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Mode {
    /// Agents account for their own influence on the aggregate.
    #[default]
    Nash,
    /// Agents take the aggregate as given.
    Wardrop,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "nash" => Ok(Mode::Nash),
            "wardrop" => Ok(Mode::Wardrop),
            other => Err(Error::InvalidInput(format!("unknown mode {other:?} (expected nash or wardrop)"))),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Nash => "nash",
            Mode::Wardrop => "wardrop",
        })
    }
}

#[derive(Clone)]
pub struct Agent {
    pub set: LocalSet,
    /// `Hⁱ`, of shape `n × nᵢ`.
    pub selection: DMatrix<f64>,
    /// `hⁱ`, of length `n`.
    pub offset: DVector<f64>,
    pub cost: Arc<dyn AgentCost>,
}

impl std::fmt::Debug for Agent {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Agent")
            .field("dim", &self.set.dim())
            .field("selection", &self.selection.shape())
            .finish_non_exhaustive()
    }
}

impl Agent {
    /// Agent whose strategy enters the aggregate directly (`H = I`, `h = 0`).
    pub fn direct(set: LocalSet, cost: Arc<dyn AgentCost>) -> Self {
        let n = set.dim();
        Self {
            set,
            selection: DMatrix::identity(n, n),
            offset: DVector::zeros(n),
            cost,
        }
    }

    pub fn dim(&self) -> usize {
        self.set.dim()
    }

    /// `Hⁱxⁱ + hⁱ`.
    pub fn image(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.selection * x + &self.offset
    }
}

/// Coupling constraint `Â σ ≤ b̂` on the aggregate. May have zero rows.
#[derive(Clone, Debug, PartialEq)]
pub struct Coupling {
    pub a_hat: DMatrix<f64>,
    pub b_hat: DVector<f64>,
}

impl Coupling {
    pub fn new(a_hat: DMatrix<f64>, b_hat: DVector<f64>) -> Result<Self> {
        if a_hat.nrows() != b_hat.len() {
            return Err(Error::Dimension(format!(
                "coupling matrix has {} rows but rhs has {} entries",
                a_hat.nrows(),
                b_hat.len()
            )));
        }
        Ok(Self { a_hat, b_hat })
    }

    pub fn none(agg_dim: usize) -> Self {
        Self {
            a_hat: DMatrix::zeros(0, agg_dim),
            b_hat: DVector::zeros(0),
        }
    }

    pub fn rows(&self) -> usize {
        self.b_hat.len()
    }

    /// Largest positive entry of `Â σ − b̂`.
    pub fn violation(&self, sigma: &DVector<f64>) -> f64 {
        (&self.a_hat * sigma - &self.b_hat)
            .iter()
            .fold(0.0_f64, |m, v| m.max(*v))
    }
}

/// Per-agent strategies `[x¹; …; xᴺ]`.
#[derive(Clone, Debug, PartialEq)]
pub struct StrategyProfile(pub Vec<DVector<f64>>);

impl StrategyProfile {
    pub fn zeros(dims: &[usize]) -> Self {
        Self(dims.iter().map(|&d| DVector::zeros(d)).collect())
    }

    pub fn agents(&self) -> usize {
        self.0.len()
    }

    pub fn dims(&self) -> Vec<usize> {
        self.0.iter().map(DVector::len).collect()
    }

    pub fn stack(&self) -> DVector<f64> {
        DVector::from_iterator(
            self.0.iter().map(DVector::len).sum(),
            self.0.iter().flat_map(|v| v.iter().copied()),
        )
    }

    pub fn unstack(stacked: &DVector<f64>, dims: &[usize]) -> Result<Self> {
        let total: usize = dims.iter().sum();
        if stacked.len() != total {
            return Err(Error::Dimension(format!(
                "stacked vector has length {} but blocks sum to {total}",
                stacked.len()
            )));
        }
        let mut offset = 0;
        Ok(Self(
            dims.iter()
                .map(|&d| {
                    let block = stacked.rows(offset, d).into_owned();
                    offset += d;
                    block
                })
                .collect(),
        ))
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| crate::linalg::max_abs_diff(a, b))
            .fold(0.0, f64::max)
    }

    pub fn distance(&self, other: &Self) -> f64 {
        (self.stack() - other.stack()).norm()
    }
}

impl std::ops::Index<usize> for StrategyProfile {
    type Output = DVector<f64>;

    fn index(&self, i: usize) -> &DVector<f64> {
        &self.0[i]
    }
}

#[derive(Clone, Debug)]
pub struct Game {
    agents: Vec<Agent>,
    agg_dim: usize,
    coupling: Coupling,
}

impl Game {
    pub fn new(agents: Vec<Agent>, coupling: Coupling) -> Result<Self> {
        if agents.is_empty() {
            return Err(Error::InvalidInput("a game needs at least one agent".into()));
        }
        let agg_dim = coupling.a_hat.ncols();
        for (i, a) in agents.iter().enumerate() {
            if a.selection.nrows() != agg_dim || a.selection.ncols() != a.dim() {
                return Err(Error::Dimension(format!(
                    "agent {}: selection is {}x{}, expected {agg_dim}x{}",
                    i + 1,
                    a.selection.nrows(),
                    a.selection.ncols(),
                    a.dim()
                )));
            }
            if a.offset.len() != agg_dim {
                return Err(Error::Dimension(format!(
                    "agent {}: offset has length {}, expected {agg_dim}",
                    i + 1,
                    a.offset.len()
                )));
            }
            if a.selection.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidInput(format!("agent {}: non-finite selection matrix", i + 1)));
            }
        }
        Ok(Self {
            agents,
            agg_dim,
            coupling,
        })
    }

    pub fn agents(&self) -> &[Agent] {
        &self.agents
    }

    pub fn agent(&self, i: usize) -> &Agent {
        &self.agents[i]
    }

    pub fn num_agents(&self) -> usize {
        self.agents.len()
    }

    pub fn agg_dim(&self) -> usize {
        self.agg_dim
    }

    pub fn coupling(&self) -> &Coupling {
        &self.coupling
    }

    pub fn with_coupling(&self, coupling: Coupling) -> Result<Self> {
        Self::new(self.agents.clone(), coupling)
    }

    pub fn dims(&self) -> Vec<usize> {
        self.agents.iter().map(Agent::dim).collect()
    }

    pub fn total_dim(&self) -> usize {
        self.dims().iter().sum()
    }

    pub fn check_profile(&self, x: &StrategyProfile) -> Result<()> {
        if x.agents() != self.num_agents() {
            return Err(Error::Dimension(format!(
                "profile has {} agents, game has {}",
                x.agents(),
                self.num_agents()
            )));
        }
        for (i, (xi, a)) in x.0.iter().zip(&self.agents).enumerate() {
            if xi.len() != a.dim() {
                return Err(Error::Dimension(format!(
                    "agent {}: strategy has length {}, expected {}",
                    i + 1,
                    xi.len(),
                    a.dim()
                )));
            }
        }
        Ok(())
    }

    fn check_comm(&self, t: &CommMatrix) -> Result<()> {
        if t.size() != self.num_agents() {
            return Err(Error::Dimension(format!(
                "communication matrix is {0}x{0} for {1} agents",
                t.size(),
                self.num_agents()
            )));
        }
        Ok(())
    }

    pub fn images(&self, x: &StrategyProfile) -> Vec<DVector<f64>> {
        self.agents.iter().zip(&x.0).map(|(a, xi)| a.image(xi)).collect()
    }

    /// `σ_∞(x) = (1/N) Σⱼ (Hʲxʲ + hʲ)`.
    pub fn global_aggregate(&self, x: &StrategyProfile) -> Result<DVector<f64>> {
        self.check_profile(x)?;
        let mut sum = DVector::zeros(self.agg_dim);
        for y in self.images(x) {
            sum += y;
        }
        Ok(sum / self.num_agents() as f64)
    }

    /// `σⁱ_ν(x) = Σⱼ [T^ν]ᵢⱼ (Hʲxʲ + hʲ)`.
    pub fn local_aggregate(&self, t: &CommMatrix, nu: u32, x: &StrategyProfile, i: usize) -> Result<DVector<f64>> {
        self.check_profile(x)?;
        self.check_comm(t)?;
        let p = t.power(nu);
        let mut sum = DVector::zeros(self.agg_dim);
        for (j, y) in self.images(x).iter().enumerate() {
            sum.axpy(p[(i, j)], y, 1.0);
        }
        Ok(sum)
    }

    /// Aggregates seen by every agent, and the self-weights `[T^ν]ᵢᵢ`
    /// (or `1/N` for exact averaging).
    pub fn aggregates(&self, t: &CommMatrix, rounds: Rounds, x: &StrategyProfile) -> Result<(Vec<DVector<f64>>, Vec<f64>)> {
        self.check_profile(x)?;
        let n = self.num_agents();
        match rounds {
            Rounds::Infinite => {
                let s = self.global_aggregate(x)?;
                Ok((vec![s; n], vec![1.0 / n as f64; n]))
            }
            Rounds::Finite(nu) => {
                self.check_comm(t)?;
                let p = t.power(nu);
                let images = self.images(x);
                let sig = (0..n)
                    .map(|i| {
                        let mut sum = DVector::zeros(self.agg_dim);
                        for (j, y) in images.iter().enumerate() {
                            sum.axpy(p[(i, j)], y, 1.0);
                        }
                        sum
                    })
                    .collect();
                Ok((sig, (0..n).map(|i| p[(i, i)]).collect()))
            }
        }
    }

    /// Block `i` of the game operator at strategy `xi` and aggregate
    /// `sigma`: `∇_{z₁}J + w·Hⁱᵀ∇_{z₂}J`, with the second term dropped in
    /// Wardrop mode.
    pub fn operator_block(&self, i: usize, xi: &DVector<f64>, sigma: &DVector<f64>, self_weight: f64, mode: Mode) -> Result<DVector<f64>> {
        let agent = &self.agents[i];
        let mut g = agent.cost.grad_own(xi, sigma).map_err(|e| e.for_agent(i + 1))?;
        if mode == Mode::Nash {
            let gz = agent.cost.grad_aggregate(xi, sigma).map_err(|e| e.for_agent(i + 1))?;
            g.gemv_tr(self_weight, &agent.selection, &gz, 1.0);
        }
        Ok(g)
    }

    /// The game operator `F_ν` (or `F_∞`) evaluated blockwise.
    pub fn eval_operator(&self, t: &CommMatrix, rounds: Rounds, x: &StrategyProfile, mode: Mode) -> Result<StrategyProfile> {
        let (sig, w) = self.aggregates(t, rounds, x)?;
        (0..self.num_agents())
            .map(|i| self.operator_block(i, &x[i], &sig[i], w[i], mode))
            .collect::<Result<Vec<_>>>()
            .map(StrategyProfile)
    }

    /// Cost of agent `i` at the exact average of `x`.
    pub fn cost(&self, i: usize, x: &StrategyProfile) -> Result<f64> {
        let sigma = self.global_aggregate(x)?;
        self.agents[i].cost.value(&x[i], &sigma).map_err(|e| e.for_agent(i + 1))
    }

    /// `H_blkd = blkdiag(H¹, …, Hᴺ)`.
    pub fn selection_blkdiag(&self) -> DMatrix<f64> {
        let blocks: Vec<&DMatrix<f64>> = self.agents.iter().map(|a| &a.selection).collect();
        block_diag(&blocks)
    }

    /// Weight matrix of the rounds: `T^ν`, or `(1/N) 1 1ᵀ`.
    pub fn mixing(&self, t: &CommMatrix, rounds: Rounds) -> DMatrix<f64> {
        let n = self.num_agents();
        match rounds {
            Rounds::Finite(nu) => t.power(nu).as_ref().clone(),
            Rounds::Infinite => DMatrix::from_element(n, n, 1.0 / n as f64),
        }
    }

    /// Stacked coupling `A x ≤ b` with `A = (W ⊗ Â) H_blkd` and
    /// `b = 1 ⊗ b̂ − (W ⊗ Â) h`, where `W` is the mixing matrix.
    pub fn coupling_matrices(&self, t: &CommMatrix, rounds: Rounds) -> (DMatrix<f64>, DVector<f64>) {
        let w = self.mixing(t, rounds);
        let kron = w.kronecker(&self.coupling.a_hat);
        let a = &kron * self.selection_blkdiag();
        let h = DVector::from_iterator(
            self.num_agents() * self.agg_dim,
            self.agents.iter().flat_map(|ag| ag.offset.iter().copied()),
        );
        let mut b = DVector::zeros(self.num_agents() * self.coupling.rows());
        for i in 0..self.num_agents() {
            b.rows_mut(i * self.coupling.rows(), self.coupling.rows())
                .copy_from(&self.coupling.b_hat);
        }
        b -= kron * h;
        (a, b)
    }

    /// Product of all local sets, on the stacked strategy vector.
    pub fn stacked_set(&self) -> LocalSet {
        LocalSet::product(self.agents.iter().map(|a| &a.set))
    }

    /// Central finite-difference Jacobian of the stacked operator.
    pub fn operator_jacobian(&self, t: &CommMatrix, rounds: Rounds, x: &StrategyProfile, mode: Mode, rel_step: f64) -> Result<DMatrix<f64>> {
        let dims = self.dims();
        let base = x.stack();
        let h = rel_step * (1.0 + base.norm());
        let n = base.len();
        let mut jac = DMatrix::zeros(n, n);
        for k in 0..n {
            let mut plus = base.clone();
            plus[k] += h;
            let mut minus = base.clone();
            minus[k] -= h;
            let fp = self.eval_operator(t, rounds, &StrategyProfile::unstack(&plus, &dims)?, mode)?.stack();
            let fm = self.eval_operator(t, rounds, &StrategyProfile::unstack(&minus, &dims)?, mode)?.stack();
            jac.set_column(k, &((fp - fm) / (2.0 * h)));
        }
        Ok(jac)
    }

    /// Draws a point of every local set: uniform in the bounding box, with
    /// rejection; after `attempts` rejections the last box sample is
    /// projected onto the set instead.
    pub fn sample_profile(&self, rng: &mut impl Rng, attempts: usize) -> Result<StrategyProfile> {
        self.agents
            .iter()
            .map(|a| {
                let (lo, hi) = (a.set.lower(), a.set.upper());
                let mut draw = || DVector::from_fn(a.dim(), |k, _| if hi[k] > lo[k] { rng.random_range(lo[k]..=hi[k]) } else { lo[k] });
                let mut last = draw();
                for _ in 1..attempts {
                    if a.set.contains(&last, 0.0) {
                        return Ok(last);
                    }
                    last = draw();
                }
                if a.set.contains(&last, 0.0) {
                    Ok(last)
                } else {
                    a.set.project(&last)
                }
            })
            .collect::<Result<Vec<_>>>()
            .map(StrategyProfile)
    }

    /// Sampled strong-monotonicity estimate: the smallest eigenvalue of the
    /// symmetrized finite-difference Jacobian over `samples` random profiles.
    pub fn estimate_monotonicity(&self, t: &CommMatrix, rounds: Rounds, samples: usize, seed: u64) -> Result<f64> {
        self.estimate_monotonicity_with(t, rounds, samples, seed, Mode::Nash, FD_STEP)
    }

    pub fn estimate_monotonicity_with(&self, t: &CommMatrix, rounds: Rounds, samples: usize, seed: u64, mode: Mode, rel_step: f64) -> Result<f64> {
        if samples < 1 {
            return Err(Error::InvalidInput("monotonicity estimate needs at least one sample".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut alpha = f64::INFINITY;
        for _ in 0..samples {
            let x = self.sample_profile(&mut rng, REJECTION_ATTEMPTS)?;
            let jac = self.operator_jacobian(t, rounds, &x, mode, rel_step)?;
            alpha = alpha.min(sym_eig_extremes(&jac).0);
        }
        Ok(alpha)
    }
}

/// Relative central-difference step, scaled by `1 + ‖x‖`.
pub const FD_STEP: f64 = 1e-6;

const REJECTION_ATTEMPTS: usize = 1000;
