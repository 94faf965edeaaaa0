//! Python bindings: communication matrices, the built-in Cournot games,
//! the distributed solver and the quality diagnostics.
//!
//! Profiles cross the boundary as lists of per-agent lists of floats.

use std::sync::Arc;

use aggnash::cournot::{build_large_instance, build_ring_comm, build_small_example, small_example_comm, synthetic_network, CournotGame};
use aggnash::quality::{epsilon_nash, feasibility_check, vi_residual as vi_residual_core, EpsilonOptions};
use aggnash::solver::{run_compact, run_distributed, step_size_bound as step_size_bound_core};
use aggnash::{Error, Halfspace, LocalSet, Mode, Rounds, SolverConfig, StrategyProfile};
use nalgebra::DVector;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::InvalidInput(_) | Error::Dimension(_) | Error::Parse { .. } | Error::Unsupported(_) => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn profile_in(x: Vec<Vec<f64>>) -> StrategyProfile {
    StrategyProfile(x.into_iter().map(DVector::from_vec).collect())
}

fn profile_out(x: &StrategyProfile) -> Vec<Vec<f64>> {
    x.0.iter().map(|v| v.iter().copied().collect()).collect()
}

fn rounds(nu: Option<u32>) -> Rounds {
    nu.map_or(Rounds::Infinite, Rounds::Finite)
}

/// Doubly stochastic communication matrix.
#[pyclass(frozen, name = "CommMatrix")]
struct PyCommMatrix {
    inner: aggnash::CommMatrix,
}

#[pymethods]
impl PyCommMatrix {
    #[new]
    fn new(rows: Vec<Vec<f64>>) -> PyResult<Self> {
        Ok(Self {
            inner: aggnash::CommMatrix::from_rows(&rows).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn uniform(n: usize) -> Self {
        Self {
            inner: aggnash::CommMatrix::uniform(n),
        }
    }

    #[staticmethod]
    fn ring(n: usize) -> PyResult<Self> {
        Ok(Self {
            inner: build_ring_comm(n).map_err(to_py)?,
        })
    }

    /// The three-firm example's matrix.
    #[staticmethod]
    fn small_example() -> Self {
        Self { inner: small_example_comm() }
    }

    #[getter]
    fn size(&self) -> usize {
        self.inner.size()
    }

    /// `(doubly_stochastic, primitive)`.
    fn validate(&self) -> PyResult<(bool, bool)> {
        let r = self.inner.validate().map_err(to_py)?;
        Ok((r.doubly_stochastic, r.primitive))
    }

    fn power(&self, nu: u32) -> Vec<Vec<f64>> {
        let p = self.inner.power(nu);
        p.row_iter().map(|r| r.iter().copied().collect()).collect()
    }

    /// `max |T^ν − (1/N) 1 1ᵀ|`.
    fn consensus_gap(&self, nu: u32) -> f64 {
        self.inner.consensus_gap(nu)
    }
}

/// Multi-market Cournot game with transportation costs.
#[pyclass(frozen, name = "CournotGame")]
struct PyCournotGame {
    inner: Arc<CournotGame>,
}

#[pymethods]
impl PyCournotGame {
    /// Three firms on a five-market chain; with `coupled`, market 3 is
    /// limited to an average supply of 1/3.
    #[staticmethod]
    #[pyo3(signature = (coupled = false))]
    fn small_example(coupled: bool) -> PyResult<Self> {
        let (g, _) = build_small_example(coupled).map_err(to_py)?;
        Ok(Self { inner: Arc::new(g) })
    }

    /// Five firms on a synthetic planar road network.
    #[staticmethod]
    #[pyo3(signature = (vertices = 43, roads = 51, seed = 2018, market_capacity = 0.3))]
    fn surrogate(vertices: usize, roads: usize, seed: u64, market_capacity: f64) -> PyResult<Self> {
        let net = synthetic_network(vertices, roads, seed).map_err(to_py)?;
        Ok(Self {
            inner: Arc::new(build_large_instance(&net, market_capacity).map_err(to_py)?),
        })
    }

    #[getter]
    fn num_agents(&self) -> usize {
        self.inner.game.num_agents()
    }

    #[getter]
    fn dims(&self) -> Vec<usize> {
        self.inner.game.dims()
    }

    #[getter]
    fn markets(&self) -> usize {
        self.inner.network.vertices()
    }

    /// Sales per firm and market.
    fn sales(&self, profile: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let x = profile_in(profile);
        self.inner.game.check_profile(&x).map_err(to_py)?;
        Ok(self.inner.sales(&x).iter().map(|y| y.iter().copied().collect()).collect())
    }

    /// Closed-form `(alpha, lipschitz, norm_a)` for `nu` rounds of `comm`.
    fn constants(&self, comm: &PyCommMatrix, nu: u32) -> PyResult<(f64, f64, f64)> {
        let c = self.inner.constants(&comm.inner, Rounds::Finite(nu)).map_err(to_py)?;
        Ok((c.alpha, c.lipschitz, c.norm_a))
    }

    /// Sampled smallest eigenvalue of the symmetrized operator Jacobian.
    #[pyo3(signature = (comm, nu, samples = 8, seed = 0))]
    fn estimate_monotonicity(&self, py: Python<'_>, comm: &PyCommMatrix, nu: u32, samples: usize, seed: u64) -> PyResult<f64> {
        let g = Arc::clone(&self.inner);
        let t = comm.inner.clone();
        py.detach(move || g.game.estimate_monotonicity(&t, Rounds::Finite(nu), samples, seed)).map_err(to_py)
    }
}

/// Result of a solve.
#[pyclass(frozen, get_all, name = "Equilibrium")]
struct PyEquilibrium {
    profile: Vec<Vec<f64>>,
    duals: Vec<Vec<f64>>,
    iterations: usize,
    converged: bool,
    last_delta: f64,
    mode: String,
}

#[pymethods]
impl PyEquilibrium {
    fn __repr__(&self) -> String {
        format!(
            "Equilibrium(mode={}, iterations={}, converged={}, last_delta={:e})",
            self.mode, self.iterations, self.converged, self.last_delta
        )
    }
}

/// Runs the distributed primal-dual iteration; `compact=True` runs the
/// equivalent stacked form instead.
#[pyfunction]
#[pyo3(signature = (game, comm, tau = 0.005, nu = 10, stop_tol = 1e-4, stop_norm = "euclidean", max_iter = 1_000_000, mode = "nash", compact = false))]
#[allow(clippy::too_many_arguments)]
fn solve(
    py: Python<'_>,
    game: &PyCournotGame,
    comm: &PyCommMatrix,
    tau: f64,
    nu: u32,
    stop_tol: f64,
    stop_norm: &str,
    max_iter: usize,
    mode: &str,
    compact: bool,
) -> PyResult<PyEquilibrium> {
    let cfg = SolverConfig {
        tau,
        nu,
        stop_tol,
        stop_norm: stop_norm.parse().map_err(to_py)?,
        max_iter,
        mode: mode.parse().map_err(to_py)?,
        ..SolverConfig::default()
    };
    let g = Arc::clone(&game.inner);
    let t = comm.inner.clone();
    let report = py
        .detach(move || {
            if compact {
                run_compact(&g.game, &t, &cfg, None)
            } else {
                run_distributed(&g.game, &t, &cfg, None)
            }
        })
        .map_err(to_py)?;
    Ok(PyEquilibrium {
        profile: profile_out(&report.profile),
        duals: report.duals.iter().map(|l| l.iter().copied().collect()).collect(),
        iterations: report.iterations,
        converged: report.converged,
        last_delta: report.last_delta,
        mode: report.mode.to_string(),
    })
}

/// `(eps_abs, eps_rel, residual)` of a profile of the exact-average game,
/// `residual` being its worst constraint violation.
#[pyfunction]
#[pyo3(signature = (game, profile, feasibility_tol = 1e-6))]
fn epsilon(py: Python<'_>, game: &PyCournotGame, profile: Vec<Vec<f64>>, feasibility_tol: f64) -> PyResult<(f64, f64, f64)> {
    let g = Arc::clone(&game.inner);
    let x = profile_in(profile);
    let opts = EpsilonOptions {
        feasibility_tol,
        ..EpsilonOptions::default()
    };
    let q = py.detach(move || epsilon_nash(&g.game, &x, &opts)).map_err(to_py)?;
    Ok((q.eps_abs, q.eps_rel, q.residual))
}

/// Largest violation of the exact-average coupling.
#[pyfunction]
fn coupling_residual(game: &PyCournotGame, profile: Vec<Vec<f64>>) -> PyResult<f64> {
    let f = feasibility_check(&game.inner.game, &profile_in(profile), 0.0).map_err(to_py)?;
    Ok(f.coupling_residual)
}

/// Natural-map residual; `nu=None` uses exact averaging.
#[pyfunction]
#[pyo3(signature = (game, comm, profile, nu = None, mode = "nash"))]
fn vi_residual(game: &PyCournotGame, comm: &PyCommMatrix, profile: Vec<Vec<f64>>, nu: Option<u32>, mode: &str) -> PyResult<f64> {
    let mode: Mode = mode.parse().map_err(to_py)?;
    vi_residual_core(&game.inner.game, &comm.inner, rounds(nu), &profile_in(profile), mode).map_err(to_py)
}

/// Largest step size the sufficient condition allows.
#[pyfunction]
fn step_size_bound(alpha: f64, lipschitz: f64, norm_a: f64) -> PyResult<f64> {
    Ok(step_size_bound_core(alpha, lipschitz, norm_a).map_err(to_py)?.tau_max)
}

/// Euclidean projection of `x` onto `{lower ≤ z ≤ upper, aₖᵀz ≤ cₖ}`, the
/// halfspaces given as `(a, c)` pairs.
#[pyfunction]
#[pyo3(signature = (x, lower, upper, halfspaces = Vec::new(), tol = 1e-10))]
fn project(x: Vec<f64>, lower: Vec<f64>, upper: Vec<f64>, halfspaces: Vec<(Vec<f64>, f64)>, tol: f64) -> PyResult<Vec<f64>> {
    let hs = halfspaces
        .iter()
        .map(|(a, c)| Halfspace::from_dense(a, *c))
        .collect::<aggnash::Result<Vec<_>>>()
        .map_err(to_py)?;
    let set = LocalSet::new(DVector::from_vec(lower), DVector::from_vec(upper), hs).map_err(to_py)?;
    let p = set.project_tol(&DVector::from_vec(x), tol).map_err(to_py)?;
    Ok(p.iter().copied().collect())
}

#[pymodule]
fn aggnash_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyCommMatrix>()?;
    m.add_class::<PyCournotGame>()?;
    m.add_class::<PyEquilibrium>()?;
    m.add_function(wrap_pyfunction!(solve, m)?)?;
    m.add_function(wrap_pyfunction!(epsilon, m)?)?;
    m.add_function(wrap_pyfunction!(coupling_residual, m)?)?;
    m.add_function(wrap_pyfunction!(vi_residual, m)?)?;
    m.add_function(wrap_pyfunction!(step_size_bound, m)?)?;
    m.add_function(wrap_pyfunction!(project, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
