//! Euclidean projections onto the sets the iteration needs: boxes, the
//! nonnegative orthant and bounded polyhedra `{l ≤ x ≤ u, Cx ≤ c}`.
//!
//! Polyhedra are first attempted with a projected Newton method on the dual
//! of the projection problem, whose answer is accepted only if it meets the
//! optimality conditions; otherwise Dykstra's alternating projections
//! between the box and each halfspace take over. Halfspace normals are
//! stored sparsely since the constraint rows met in practice touch only a
//! handful of coordinates.

use nalgebra::{DMatrix, DVector};

use crate::{Error, Result};

pub const DEFAULT_TOL: f64 = 1e-10;
pub const MAX_SWEEPS: usize = 100_000;
const STALL_SWEEPS: usize = 10_000;

/// Clamps every component of `x` into `[lower, upper]`.
pub fn project_box(x: &DVector<f64>, lower: &DVector<f64>, upper: &DVector<f64>) -> Result<DVector<f64>> {
    if x.len() != lower.len() || x.len() != upper.len() {
        return Err(Error::Dimension(format!(
            "box of dimension {}/{} for a vector of length {}",
            lower.len(),
            upper.len(),
            x.len()
        )));
    }
    if let Some(k) = (0..x.len()).find(|&k| lower[k] > upper[k]) {
        return Err(Error::InvalidInput(format!(
            "empty box: lower[{k}] = {} > upper[{k}] = {}",
            lower[k], upper[k]
        )));
    }
    Ok(clamp(x, lower, upper))
}

fn clamp(x: &DVector<f64>, lower: &DVector<f64>, upper: &DVector<f64>) -> DVector<f64> {
    DVector::from_fn(x.len(), |k, _| x[k].max(lower[k]).min(upper[k]))
}

/// Componentwise `max(x, 0)`.
pub fn project_nonneg(x: &DVector<f64>) -> DVector<f64> {
    x.map(|v| v.max(0.0))
}

/// The halfspace `{x : aᵀx ≤ rhs}` with a sparse normal `a`.
#[derive(Clone, Debug, PartialEq)]
pub struct Halfspace {
    normal: Vec<(usize, f64)>,
    rhs: f64,
    norm_sq: f64,
}

impl Halfspace {
    pub fn new(normal: Vec<(usize, f64)>, rhs: f64) -> Result<Self> {
        let normal: Vec<_> = normal.into_iter().filter(|&(_, a)| a != 0.0).collect();
        if normal.iter().any(|(_, a)| !a.is_finite()) || !rhs.is_finite() {
            return Err(Error::InvalidInput("halfspace with non-finite data".into()));
        }
        let norm_sq = normal.iter().map(|(_, a)| a * a).sum();
        Ok(Self { normal, rhs, norm_sq })
    }

    pub fn from_dense(row: &[f64], rhs: f64) -> Result<Self> {
        Self::new(row.iter().copied().enumerate().collect(), rhs)
    }

    pub fn normal(&self) -> &[(usize, f64)] {
        &self.normal
    }

    pub fn rhs(&self) -> f64 {
        self.rhs
    }

    pub fn eval(&self, x: &DVector<f64>) -> f64 {
        self.normal.iter().map(|&(k, a)| a * x[k]).sum()
    }

    pub fn violation(&self, x: &DVector<f64>) -> f64 {
        (self.eval(x) - self.rhs).max(0.0)
    }

    fn max_index(&self) -> Option<usize> {
        self.normal.iter().map(|&(k, _)| k).max()
    }

    fn shifted(&self, offset: usize) -> Self {
        Self {
            normal: self.normal.iter().map(|&(k, a)| (k + offset, a)).collect(),
            rhs: self.rhs,
            norm_sq: self.norm_sq,
        }
    }
}

/// A compact polyhedron `{l ≤ x ≤ u, aₖᵀx ≤ cₖ}`.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalSet {
    lower: DVector<f64>,
    upper: DVector<f64>,
    halfspaces: Vec<Halfspace>,
}

impl LocalSet {
    /// Builds the set and certifies it is nonempty by projecting the box
    /// center onto it.
    pub fn new(lower: DVector<f64>, upper: DVector<f64>, halfspaces: Vec<Halfspace>) -> Result<Self> {
        let set = Self::unchecked(lower, upper, halfspaces)?;
        if !set.halfspaces.is_empty() {
            set.certify_nonempty()?;
        }
        Ok(set)
    }

    pub fn boxed(lower: DVector<f64>, upper: DVector<f64>) -> Result<Self> {
        Self::new(lower, upper, Vec::new())
    }

    /// Builds `{l ≤ x ≤ u, Cx ≤ c}` from a dense `C`.
    pub fn with_linear(
        lower: DVector<f64>,
        upper: DVector<f64>,
        c_mat: &DMatrix<f64>,
        c_vec: &DVector<f64>,
    ) -> Result<Self> {
        if c_mat.nrows() != c_vec.len() || c_mat.ncols() != lower.len() {
            return Err(Error::Dimension(format!(
                "linear constraints {}x{} with rhs of length {} on dimension {}",
                c_mat.nrows(),
                c_mat.ncols(),
                c_vec.len(),
                lower.len()
            )));
        }
        let hs = (0..c_mat.nrows())
            .map(|r| {
                let row: Vec<f64> = c_mat.row(r).iter().copied().collect();
                Halfspace::from_dense(&row, c_vec[r])
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(lower, upper, hs)
    }

    fn unchecked(lower: DVector<f64>, upper: DVector<f64>, halfspaces: Vec<Halfspace>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::Dimension(format!(
                "lower bound has length {}, upper bound {}",
                lower.len(),
                upper.len()
            )));
        }
        for k in 0..lower.len() {
            if !lower[k].is_finite() || !upper[k].is_finite() {
                return Err(Error::InvalidInput(format!(
                    "bounds of component {k} must be finite (local sets are compact)"
                )));
            }
            if lower[k] > upper[k] {
                return Err(Error::InvalidInput(format!(
                    "empty box: lower[{k}] = {} > upper[{k}] = {}",
                    lower[k], upper[k]
                )));
            }
        }
        if let Some(k) = halfspaces.iter().filter_map(Halfspace::max_index).max() {
            if k >= lower.len() {
                return Err(Error::Dimension(format!(
                    "halfspace touches component {k} of a {}-dimensional set",
                    lower.len()
                )));
            }
        }
        Ok(Self {
            lower,
            upper,
            halfspaces,
        })
    }

    fn certify_nonempty(&self) -> Result<()> {
        let center = (&self.lower + &self.upper) * 0.5;
        let mut state = Dykstra::new(self, &center);
        let mut best = f64::INFINITY;
        let mut since_best = 0;
        for _ in 0..MAX_SWEEPS {
            state.sweep(self);
            let viol = self.violation(&state.x);
            if viol <= 1e-9 {
                return Ok(());
            }
            if viol < best * (1.0 - 1e-6) {
                best = viol;
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= STALL_SWEEPS {
                    break;
                }
            }
        }
        Err(Error::Infeasible(format!(
            "alternating projections stalled with constraint violation {best:e}"
        )))
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &DVector<f64> {
        &self.lower
    }

    pub fn upper(&self) -> &DVector<f64> {
        &self.upper
    }

    pub fn halfspaces(&self) -> &[Halfspace] {
        &self.halfspaces
    }

    /// Adds halfspaces, re-certifying nonemptiness.
    pub fn intersect(&self, extra: impl IntoIterator<Item = Halfspace>) -> Result<Self> {
        let mut hs = self.halfspaces.clone();
        hs.extend(extra);
        Self::new(self.lower.clone(), self.upper.clone(), hs)
    }

    /// Cartesian product of several sets, with the halfspaces of each
    /// factor shifted onto its block of coordinates.
    pub fn product<'a>(sets: impl IntoIterator<Item = &'a LocalSet>) -> Self {
        let mut lower = Vec::new();
        let mut upper = Vec::new();
        let mut hs = Vec::new();
        for s in sets {
            let offset = lower.len();
            lower.extend(s.lower.iter());
            upper.extend(s.upper.iter());
            hs.extend(s.halfspaces.iter().map(|h| h.shifted(offset)));
        }
        Self {
            lower: DVector::from_vec(lower),
            upper: DVector::from_vec(upper),
            halfspaces: hs,
        }
    }

    /// Largest violation of any bound or halfspace.
    pub fn violation(&self, x: &DVector<f64>) -> f64 {
        let box_viol = (0..x.len()).fold(0.0_f64, |m, k| {
            m.max(self.lower[k] - x[k]).max(x[k] - self.upper[k])
        });
        self.halfspaces
            .iter()
            .fold(box_viol.max(0.0), |m, h| m.max(h.violation(x)))
    }

    pub fn contains(&self, x: &DVector<f64>, tol: f64) -> bool {
        x.len() == self.dim() && self.violation(x) <= tol
    }

    /// Projection with the default tolerance.
    pub fn project(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.project_tol(x, DEFAULT_TOL)
    }

    /// Euclidean projection onto the set.
    ///
    /// Boxes are clamped exactly. Otherwise the dual Newton method is tried
    /// first, then Dykstra sweeps run until the change between sweeps drops
    /// below `tol / 10` and the iterate is feasible within `tol`. The
    /// tolerance is relative to `max(1, ‖x‖_∞)`, since rounding alone
    /// limits the accuracy for large inputs.
    pub fn project_tol(&self, x: &DVector<f64>, tol: f64) -> Result<DVector<f64>> {
        self.check_projection_input(x, tol)?;
        if self.halfspaces.is_empty() {
            return Ok(clamp(x, &self.lower, &self.upper));
        }
        let tol = scaled(x, tol);
        if let Some((p, _)) = dual_newton(self, x, tol, None) {
            return Ok(p);
        }
        self.dykstra(x, tol)
    }

    /// Like [`project_tol`](Self::project_tol), starting the dual Newton
    /// method from the halfspace multipliers in `warm` and leaving the new
    /// ones there. Repeated projections of nearby points then typically
    /// take a single Newton step.
    pub fn project_warm(&self, x: &DVector<f64>, tol: f64, warm: &mut DVector<f64>) -> Result<DVector<f64>> {
        self.check_projection_input(x, tol)?;
        if self.halfspaces.is_empty() {
            return Ok(clamp(x, &self.lower, &self.upper));
        }
        let tol = scaled(x, tol);
        let start = (warm.len() == self.halfspaces.len()).then_some(&*warm);
        if let Some((p, mu)) = dual_newton(self, x, tol, start) {
            *warm = mu;
            return Ok(p);
        }
        warm.fill(0.0);
        self.dykstra(x, tol)
    }

    /// Projection by Dykstra's method alone.
    pub fn project_dykstra(&self, x: &DVector<f64>, tol: f64) -> Result<DVector<f64>> {
        self.check_projection_input(x, tol)?;
        if self.halfspaces.is_empty() {
            return Ok(clamp(x, &self.lower, &self.upper));
        }
        self.dykstra(x, scaled(x, tol))
    }

    fn check_projection_input(&self, x: &DVector<f64>, tol: f64) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::Dimension(format!(
                "projecting a vector of length {} onto a {}-dimensional set",
                x.len(),
                self.dim()
            )));
        }
        if !(tol > 0.0) {
            return Err(Error::InvalidInput(format!("projection tolerance {tol} must be positive")));
        }
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidInput("projecting a vector with non-finite entries".into()));
        }
        Ok(())
    }

    fn dykstra(&self, x: &DVector<f64>, tol: f64) -> Result<DVector<f64>> {
        let mut state = Dykstra::new(self, x);
        let mut change = f64::INFINITY;
        for _ in 0..MAX_SWEEPS {
            change = state.sweep(self);
            if change < tol / 10.0 && self.violation(&state.x) <= tol {
                return Ok(state.x);
            }
        }
        Err(Error::NonConvergence {
            what: "polyhedral projection",
            iterations: MAX_SWEEPS,
            residual: change.max(self.violation(&state.x)),
        })
    }

    /// A point of the set (the projection of the box center).
    pub fn interior_guess(&self) -> Result<DVector<f64>> {
        self.project(&((&self.lower + &self.upper) * 0.5))
    }
}

fn scaled(x: &DVector<f64>, tol: f64) -> f64 {
    tol * x.amax().max(1.0)
}

const NEWTON_MAX_ITER: usize = 200;

/// Projected Newton on the dual of `min ½‖z − y‖²` over `{l ≤ z ≤ u,
/// aⱼᵀz ≤ cⱼ}` with the box kept in the primal: for multipliers `μ ≥ 0` the
/// minimizer is `z(μ) = clamp(y − Σ μⱼ aⱼ)`, the dual objective is convex
/// and piecewise quadratic with gradient `g(μ) = c − A z(μ)`, and the
/// Hessian on a fixed pattern is `A D Aᵀ` with `D` selecting the coordinates
/// strictly inside the box. Returns `None` when it cannot certify
/// `‖min(μ, g)‖_∞ ≤ tol/100`, e.g. for an empty set.
fn dual_newton(set: &LocalSet, y: &DVector<f64>, tol: f64, start: Option<&DVector<f64>>) -> Option<(DVector<f64>, DVector<f64>)> {
    let m = set.halfspaces.len();
    let n = y.len();
    // rows touching each coordinate, for the sparse Hessian
    let mut by_coord: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    for (j, h) in set.halfspaces.iter().enumerate() {
        for &(k, v) in &h.normal {
            by_coord[k].push((j, v));
        }
    }
    let primal = |mu: &DVector<f64>| -> DVector<f64> {
        let mut w = y.clone();
        for (h, &mj) in set.halfspaces.iter().zip(mu.iter()) {
            if mj != 0.0 {
                for &(k, v) in &h.normal {
                    w[k] -= mj * v;
                }
            }
        }
        clamp(&w, &set.lower, &set.upper)
    };
    let slack = |z: &DVector<f64>| -> DVector<f64> { DVector::from_iterator(m, set.halfspaces.iter().map(|h| h.rhs - h.eval(z))) };
    // dual objective to minimize: −½‖z − y‖² + μᵀ(c − Az)
    let objective = |mu: &DVector<f64>, z: &DVector<f64>, g: &DVector<f64>| -> f64 { -0.5 * (z - y).norm_squared() + mu.dot(g) };

    let mut mu = match start {
        Some(s) => s.map(|v| v.max(0.0)),
        None => DVector::zeros(m),
    };
    let mut z = primal(&mu);
    let mut g = slack(&z);
    let mut psi = objective(&mu, &z, &g);
    for _ in 0..NEWTON_MAX_ITER {
        let natural = (0..m).fold(0.0_f64, |r, j| r.max(mu[j].min(g[j]).abs()));
        if natural <= tol * 1e-2 && set.violation(&z) <= tol {
            return Some((z, mu));
        }
        let eps = natural.min(1e-3);
        let fixed: Vec<bool> = (0..m).map(|j| mu[j] <= eps && g[j] > 0.0).collect();
        let free: Vec<usize> = (0..m).filter(|&j| !fixed[j]).collect();

        let mut p = DVector::from_fn(m, |j, _| if fixed[j] { -g[j] } else { 0.0 });
        if !free.is_empty() {
            let f = free.len();
            let mut slot = vec![usize::MAX; m];
            for (r, &j) in free.iter().enumerate() {
                slot[j] = r;
            }
            let mut hess = DMatrix::zeros(f, f);
            for k in (0..n).filter(|&k| z[k] > set.lower[k] && z[k] < set.upper[k]) {
                for &(j, vj) in &by_coord[k] {
                    if slot[j] == usize::MAX {
                        continue;
                    }
                    for &(l, vl) in &by_coord[k] {
                        if slot[l] != usize::MAX {
                            hess[(slot[j], slot[l])] += vj * vl;
                        }
                    }
                }
            }
            let shift = 1e-12 * (1.0 + hess.diagonal().amax());
            for r in 0..f {
                hess[(r, r)] += shift;
            }
            let rhs = DVector::from_fn(f, |r, _| -g[free[r]]);
            let step = hess.cholesky()?.solve(&rhs);
            for (r, &j) in free.iter().enumerate() {
                p[j] = step[r];
            }
        }

        // Armijo along the projection arc; near the solution the objective
        // decrease drops below rounding, so halving the natural residual
        // without raising the objective also counts as progress
        let mut alpha = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let trial = (&mu + &p * alpha).map(|v| v.max(0.0));
            let zt = primal(&trial);
            let gt = slack(&zt);
            let psit = objective(&trial, &zt, &gt);
            let decrease: f64 = (0..m)
                .map(|j| if fixed[j] { g[j] * (mu[j] - trial[j]) } else { -alpha * g[j] * p[j] })
                .sum();
            let natural_t = (0..m).fold(0.0_f64, |r, j| r.max(trial[j].min(gt[j]).abs()));
            let flat = psit <= psi + 1e-14 * (1.0 + psi.abs());
            if psit <= psi - 1e-4 * decrease || (flat && natural_t <= 0.5 * natural) {
                mu = trial;
                z = zt;
                psi = psit;
                g = gt;
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        if !accepted || !mu.iter().all(|v| v.is_finite()) {
            return None;
        }
    }
    None
}

/// Dykstra state: current iterate, the box increment and one scalar
/// increment per halfspace (each halfspace increment is a multiple of its
/// normal).
struct Dykstra {
    x: DVector<f64>,
    box_inc: DVector<f64>,
    hs_inc: Vec<f64>,
    prev: DVector<f64>,
}

impl Dykstra {
    fn new(set: &LocalSet, x: &DVector<f64>) -> Self {
        Self {
            x: x.clone(),
            box_inc: DVector::zeros(x.len()),
            hs_inc: vec![0.0; set.halfspaces.len()],
            prev: x.clone(),
        }
    }

    /// One cyclic pass; returns the max-norm change of the iterate and of
    /// the increments. The iterate alone can stand still for a whole sweep
    /// while the increments are still being traded between sets.
    fn sweep(&mut self, set: &LocalSet) -> f64 {
        self.prev.copy_from(&self.x);
        let mut inc_change = 0.0_f64;
        for k in 0..self.x.len() {
            let y = self.x[k] + self.box_inc[k];
            let p = y.max(set.lower[k]).min(set.upper[k]);
            inc_change = inc_change.max((y - p - self.box_inc[k]).abs());
            self.box_inc[k] = y - p;
            self.x[k] = p;
        }
        for (h, inc) in set.halfspaces.iter().zip(self.hs_inc.iter_mut()) {
            // y = x + inc·a ; P(y) = y − max(0, (aᵀy − c)/‖a‖²)·a
            let ay = h.eval(&self.x) + *inc * h.norm_sq;
            let shift = ((ay - h.rhs) / h.norm_sq).max(0.0);
            let delta = *inc - shift;
            for &(k, a) in &h.normal {
                self.x[k] += delta * a;
            }
            inc_change = inc_change.max(delta.abs() * h.norm_sq.sqrt());
            *inc = shift;
        }
        self.x
            .iter()
            .zip(self.prev.iter())
            .fold(inc_change, |m, (a, b)| m.max((a - b).abs()))
    }
}
