//! Multi-market Cournot game with transportation costs.
//!
//! Firm `i` produces `rⁱ` at its location `ℓᵢ` and ships `tⁱₑ ≥ 0` along
//! each directed edge of a transportation network. Its strategy is
//! `xⁱ = [tⁱ; rⁱ]` and its sales per market are `yⁱ = B tⁱ + e_{ℓᵢ} rⁱ =
//! Hⁱ xⁱ`, where `B` is the vertex-by-edge incidence matrix. Prices depend
//! on the average sales `σ = (1/N) Σⱼ yʲ`.
//!
//! Every undirected road is modeled by two opposite directed columns so
//! that a firm can ship either way along it.

use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::game::{Agent, AgentCost, Coupling, Rounds};
use crate::linalg::{spectral_norm, sym_eig_extremes};
use crate::projection::Halfspace;
use crate::{CommMatrix, Error, Game, LocalSet, Result, StrategyProfile};

/// An undirected road between two markets (0-based), with its normalized
/// length `ρ ∈ (0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Road {
    pub from: usize,
    pub to: usize,
    pub length: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransportNetwork {
    vertices: usize,
    roads: Vec<Road>,
    /// `V × E` with one `−1` (tail) and one `+1` (head) per column.
    incidence: DMatrix<f64>,
    /// Normalized length of the road each directed column belongs to.
    edge_length: Vec<f64>,
    coordinates: Option<Vec<(f64, f64)>>,
}

impl TransportNetwork {
    /// Builds the network, giving each road two opposite directed columns
    /// (`u→v` then `v→u`).
    pub fn from_roads(vertices: usize, roads: Vec<Road>) -> Result<Self> {
        if vertices == 0 {
            return Err(Error::InvalidInput("network needs at least one market".into()));
        }
        for (k, r) in roads.iter().enumerate() {
            if r.from >= vertices || r.to >= vertices || r.from == r.to {
                return Err(Error::InvalidInput(format!(
                    "road {} joins markets {} and {} in a network of {vertices}",
                    k + 1,
                    r.from + 1,
                    r.to + 1
                )));
            }
            if !(r.length > 0.0 && r.length <= 1.0) {
                return Err(Error::InvalidInput(format!(
                    "road {} has normalized length {} outside (0, 1]",
                    k + 1,
                    r.length
                )));
            }
        }
        let e = 2 * roads.len();
        let mut incidence = DMatrix::zeros(vertices, e);
        let mut edge_length = Vec::with_capacity(e);
        for (k, r) in roads.iter().enumerate() {
            incidence[(r.from, 2 * k)] = -1.0;
            incidence[(r.to, 2 * k)] = 1.0;
            incidence[(r.to, 2 * k + 1)] = -1.0;
            incidence[(r.from, 2 * k + 1)] = 1.0;
            edge_length.extend([r.length, r.length]);
        }
        Ok(Self {
            vertices,
            roads,
            incidence,
            edge_length,
            coordinates: None,
        })
    }

    /// Builds a network from an explicit incidence matrix, checking that
    /// every column has exactly one `+1` and one `−1`.
    pub fn from_incidence(incidence: DMatrix<f64>, edge_length: Vec<f64>) -> Result<Self> {
        if edge_length.len() != incidence.ncols() {
            return Err(Error::Dimension(format!(
                "{} edge lengths for {} incidence columns",
                edge_length.len(),
                incidence.ncols()
            )));
        }
        for (e, col) in incidence.column_iter().enumerate() {
            let plus = col.iter().filter(|&&v| v == 1.0).count();
            let minus = col.iter().filter(|&&v| v == -1.0).count();
            let zero = col.iter().filter(|&&v| v == 0.0).count();
            if plus != 1 || minus != 1 || plus + minus + zero != col.len() {
                return Err(Error::InvalidInput(format!(
                    "incidence column {} must contain exactly one +1, one -1 and zeros",
                    e + 1
                )));
            }
        }
        Ok(Self {
            vertices: incidence.nrows(),
            roads: Vec::new(),
            incidence,
            edge_length,
            coordinates: None,
        })
    }

    /// Chain `1 – 2 – … – V` with unit-length roads.
    pub fn chain(vertices: usize) -> Result<Self> {
        let roads = (1..vertices)
            .map(|v| Road {
                from: v - 1,
                to: v,
                length: 1.0,
            })
            .collect();
        Self::from_roads(vertices, roads)
    }

    pub fn with_coordinates(mut self, coords: Vec<(f64, f64)>) -> Result<Self> {
        if coords.len() != self.vertices {
            return Err(Error::Dimension(format!("{} coordinates for {} markets", coords.len(), self.vertices)));
        }
        self.coordinates = Some(coords);
        Ok(self)
    }

    pub fn vertices(&self) -> usize {
        self.vertices
    }

    /// Number of directed edge columns.
    pub fn edges(&self) -> usize {
        self.incidence.ncols()
    }

    pub fn roads(&self) -> &[Road] {
        &self.roads
    }

    pub fn incidence(&self) -> &DMatrix<f64> {
        &self.incidence
    }

    pub fn edge_length(&self) -> &[f64] {
        &self.edge_length
    }

    pub fn coordinates(&self) -> Option<&[(f64, f64)]> {
        self.coordinates.as_deref()
    }

    pub fn is_connected(&self) -> bool {
        let mut parent: Vec<usize> = (0..self.vertices).collect();
        for r in &self.roads {
            union(&mut parent, r.from, r.to);
        }
        let root = find(&mut parent, 0);
        (0..self.vertices).all(|v| find(&mut parent, v) == root)
    }

    /// Parses `V E`, then `E` lines `u v length` (1-indexed), then optionally
    /// `V` lines `v x y`. Lengths are divided by the largest one.
    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = content_lines(text);
        let (line, header) = lines.next().ok_or(Error::Parse {
            line: 1,
            msg: "missing \"V E\" header".into(),
        })?;
        let h = parse_numbers(line, header)?;
        if h.len() != 2 {
            return Err(Error::Parse {
                line,
                msg: "header must be \"V E\"".into(),
            });
        }
        let (v, e) = (as_count(line, h[0])?, as_count(line, h[1])?);
        let mut raw = Vec::with_capacity(e);
        for _ in 0..e {
            let (line, l) = lines.next().ok_or(Error::Parse {
                line: text.lines().count(),
                msg: format!("expected {e} edge lines"),
            })?;
            let f = parse_numbers(line, l)?;
            if f.len() != 3 {
                return Err(Error::Parse {
                    line,
                    msg: "edge line must be \"u v length\"".into(),
                });
            }
            let (a, b) = (as_index(line, f[0], v)?, as_index(line, f[1], v)?);
            if !(f[2] > 0.0) {
                return Err(Error::Parse {
                    line,
                    msg: format!("edge length {} must be positive", f[2]),
                });
            }
            raw.push((line, a, b, f[2]));
        }
        let max_len = raw.iter().map(|r| r.3).fold(0.0, f64::max);
        let roads = raw
            .iter()
            .map(|&(line, a, b, len)| {
                if a == b {
                    Err(Error::Parse {
                        line,
                        msg: "self-loop".into(),
                    })
                } else {
                    Ok(Road {
                        from: a,
                        to: b,
                        length: len / max_len,
                    })
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let net = Self::from_roads(v, roads)?;
        let rest: Vec<_> = lines.collect();
        if rest.is_empty() {
            return Ok(net);
        }
        if rest.len() != v {
            return Err(Error::Parse {
                line: rest[0].0,
                msg: format!("expected {v} coordinate lines, found {}", rest.len()),
            });
        }
        let mut coords = vec![(f64::NAN, f64::NAN); v];
        for (line, l) in rest {
            let f = parse_numbers(line, l)?;
            if f.len() != 3 {
                return Err(Error::Parse {
                    line,
                    msg: "coordinate line must be \"v x y\"".into(),
                });
            }
            coords[as_index(line, f[0], v)?] = (f[1], f[2]);
        }
        net.with_coordinates(coords)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Writes the graph file format (lengths as stored, i.e. normalized).
    pub fn to_text(&self) -> String {
        let mut s = format!("{} {}\n", self.vertices, self.roads.len());
        for r in &self.roads {
            s.push_str(&format!("{} {} {}\n", r.from + 1, r.to + 1, r.length));
        }
        if let Some(c) = &self.coordinates {
            for (v, (x, y)) in c.iter().enumerate() {
                s.push_str(&format!("{} {} {}\n", v + 1, x, y));
            }
        }
        s
    }
}

fn find(parent: &mut [usize], mut v: usize) -> usize {
    while parent[v] != v {
        parent[v] = parent[parent[v]];
        v = parent[v];
    }
    v
}

fn union(parent: &mut [usize], a: usize, b: usize) -> bool {
    let (ra, rb) = (find(parent, a), find(parent, b));
    if ra == rb {
        return false;
    }
    parent[ra] = rb;
    true
}

fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(k, l)| (k + 1, l.split('#').next().unwrap_or("").trim()))
        .filter(|(_, l)| !l.is_empty())
}

fn parse_numbers(line: usize, l: &str) -> Result<Vec<f64>> {
    l.split_whitespace()
        .map(|t| {
            t.parse::<f64>().map_err(|_| Error::Parse {
                line,
                msg: format!("invalid number {t:?}"),
            })
        })
        .collect()
}

fn as_count(line: usize, v: f64) -> Result<usize> {
    if v >= 0.0 && v.fract() == 0.0 {
        Ok(v as usize)
    } else {
        Err(Error::Parse {
            line,
            msg: format!("expected a nonnegative integer, found {v}"),
        })
    }
}

fn as_index(line: usize, v: f64, n: usize) -> Result<usize> {
    let k = as_count(line, v)?;
    if k == 0 || k > n {
        return Err(Error::Parse {
            line,
            msg: format!("vertex {k} outside 1..={n}"),
        });
    }
    Ok(k - 1)
}

/// A convex scalar cost with its first two derivatives.
pub trait ScalarCost: Send + Sync {
    fn value(&self, z: f64) -> f64;
    fn derivative(&self, z: f64) -> f64;
    fn second_derivative(&self, z: f64) -> f64;
}

/// `scale · (z − (1 − 1/(1+z)))`: linear cost minus a concave discount,
/// with zero marginal cost at `z = 0`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Canonical {
    pub scale: f64,
}

impl ScalarCost for Canonical {
    fn value(&self, z: f64) -> f64 {
        self.scale * (z - (1.0 - 1.0 / (1.0 + z)))
    }

    fn derivative(&self, z: f64) -> f64 {
        let q = 1.0 + z;
        self.scale * (1.0 - 1.0 / (q * q))
    }

    fn second_derivative(&self, z: f64) -> f64 {
        let q = 1.0 + z;
        self.scale * 2.0 / (q * q * q)
    }
}

/// `β z − γ(z)` for a user-supplied increasing concave discount `γ`.
pub struct LinearMinusDiscount<G> {
    pub beta: f64,
    pub discount: G,
}

/// Discount function `γ` with derivatives.
pub trait Discount: Send + Sync {
    fn value(&self, z: f64) -> f64;
    fn derivative(&self, z: f64) -> f64;
    fn second_derivative(&self, z: f64) -> f64;
}

impl<G: Discount> ScalarCost for LinearMinusDiscount<G> {
    fn value(&self, z: f64) -> f64 {
        self.beta * z - self.discount.value(z)
    }

    fn derivative(&self, z: f64) -> f64 {
        self.beta - self.discount.derivative(z)
    }

    fn second_derivative(&self, z: f64) -> f64 {
        -self.discount.second_derivative(z)
    }
}

#[derive(Clone)]
pub struct FirmSpec {
    /// 0-based market index.
    pub location: usize,
    pub capacity: f64,
    pub production: Arc<dyn ScalarCost>,
    /// Either one cost shared by every edge, or one per directed edge.
    pub transport: Vec<Arc<dyn ScalarCost>>,
}

impl std::fmt::Debug for FirmSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FirmSpec")
            .field("location", &self.location)
            .field("capacity", &self.capacity)
            .finish_non_exhaustive()
    }
}

impl FirmSpec {
    /// Canonical costs: production `production_scale · c(r)`, transport
    /// `ρₑ · transport_scale · c(t)` when `length_weighted`, else
    /// `transport_scale · c(t)`.
    pub fn canonical(location: usize, capacity: f64, net: &TransportNetwork, production_scale: f64, transport_scale: f64, length_weighted: bool) -> Self {
        let transport = net
            .edge_length()
            .iter()
            .map(|&rho| {
                let s = if length_weighted { rho * transport_scale } else { transport_scale };
                Arc::new(Canonical { scale: s }) as Arc<dyn ScalarCost>
            })
            .collect();
        Self {
            location,
            capacity,
            production: Arc::new(Canonical { scale: production_scale }),
            transport,
        }
    }

    fn transport_cost(&self, e: usize) -> &dyn ScalarCost {
        if self.transport.len() == 1 {
            self.transport[0].as_ref()
        } else {
            self.transport[e].as_ref()
        }
    }
}

/// A strictly decreasing price curve for one market.
pub trait PriceCurve: Send + Sync {
    fn value(&self, s: f64) -> f64;
    fn derivative(&self, s: f64) -> f64;
    fn second_derivative(&self, s: f64) -> f64;
}

/// `p(s) = intercept − slope · s`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinearPrice {
    pub intercept: f64,
    pub slope: f64,
}

impl PriceCurve for LinearPrice {
    fn value(&self, s: f64) -> f64 {
        self.intercept - self.slope * s
    }

    fn derivative(&self, _s: f64) -> f64 {
        -self.slope
    }

    fn second_derivative(&self, _s: f64) -> f64 {
        0.0
    }
}

#[derive(Clone)]
pub enum PriceModel {
    /// `p(σ) = d − D σ`.
    Affine { d_mat: DMatrix<f64>, d: DVector<f64> },
    /// `p_v(σ) = p_v(σ_v)` independently per market.
    Separable(Vec<Arc<dyn PriceCurve>>),
}

impl std::fmt::Debug for PriceModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PriceModel::Affine { d_mat, d } => f.debug_struct("Affine").field("d_mat", d_mat).field("d", d).finish(),
            PriceModel::Separable(c) => write!(f, "Separable({} markets)", c.len()),
        }
    }
}

/// Smallest eigenvalue of the symmetric part allowed for a PSD price slope.
pub const PSD_TOL: f64 = 1e-10;

impl PriceModel {
    /// Affine model; rejects a slope matrix whose symmetric part is not
    /// positive semidefinite.
    pub fn affine(d_mat: DMatrix<f64>, d: DVector<f64>) -> Result<Self> {
        if d_mat.nrows() != d_mat.ncols() || d_mat.nrows() != d.len() {
            return Err(Error::Dimension(format!("price slope {}x{} with intercept of length {}", d_mat.nrows(), d_mat.ncols(), d.len())));
        }
        let (lo, _) = sym_eig_extremes(&d_mat);
        if lo < -PSD_TOL {
            return Err(Error::InvalidInput(format!("price slope matrix is not positive semidefinite (smallest eigenvalue {lo:e})")));
        }
        Ok(PriceModel::Affine { d_mat, d })
    }

    /// Separable model; checks each curve is strictly decreasing on a grid
    /// of `[0, upto]`.
    pub fn separable(curves: Vec<Arc<dyn PriceCurve>>, upto: f64) -> Result<Self> {
        for (v, c) in curves.iter().enumerate() {
            let grid = 200;
            for k in 0..=grid {
                let s = upto * k as f64 / grid as f64;
                if !(c.derivative(s) < 0.0) {
                    return Err(Error::InvalidInput(format!("price at market {} is not strictly decreasing at {s}", v + 1)));
                }
            }
        }
        Ok(PriceModel::Separable(curves))
    }

    pub fn markets(&self) -> usize {
        match self {
            PriceModel::Affine { d, .. } => d.len(),
            PriceModel::Separable(c) => c.len(),
        }
    }

    pub fn prices(&self, sigma: &DVector<f64>) -> DVector<f64> {
        match self {
            PriceModel::Affine { d_mat, d } => d - d_mat * sigma,
            PriceModel::Separable(c) => DVector::from_fn(c.len(), |v, _| c[v].value(sigma[v])),
        }
    }

    /// `−(∂p/∂σ)ᵀ y`.
    fn neg_jacobian_tr_mul(&self, sigma: &DVector<f64>, y: &DVector<f64>) -> DVector<f64> {
        match self {
            PriceModel::Affine { d_mat, .. } => d_mat.tr_mul(y),
            PriceModel::Separable(c) => DVector::from_fn(c.len(), |v, _| -c[v].derivative(sigma[v]) * y[v]),
        }
    }
}

/// Cost oracle of one firm: `a(r) + Σₑ cₑ(tₑ) − p(σ)ᵀ H x`.
struct FirmCost {
    firm: FirmSpec,
    selection: DMatrix<f64>,
    price: Arc<PriceModel>,
}

impl FirmCost {
    fn edges(&self) -> usize {
        self.selection.ncols() - 1
    }
}

impl AgentCost for FirmCost {
    fn value(&self, own: &DVector<f64>, agg: &DVector<f64>) -> Result<f64> {
        let e = self.edges();
        let mut v = self.firm.production.value(own[e]);
        for k in 0..e {
            v += self.firm.transport_cost(k).value(own[k]);
        }
        Ok(v - self.price.prices(agg).dot(&(&self.selection * own)))
    }

    fn grad_own(&self, own: &DVector<f64>, agg: &DVector<f64>) -> Result<DVector<f64>> {
        let e = self.edges();
        let mut g = DVector::from_fn(e + 1, |k, _| {
            if k == e {
                self.firm.production.derivative(own[e])
            } else {
                self.firm.transport_cost(k).derivative(own[k])
            }
        });
        g.gemv_tr(-1.0, &self.selection, &self.price.prices(agg), 1.0);
        Ok(g)
    }

    fn grad_aggregate(&self, own: &DVector<f64>, agg: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.price.neg_jacobian_tr_mul(agg, &(&self.selection * own)))
    }
}

/// Which markets carry a storage capacity `σ_v ≤ K_v`.
#[derive(Clone, Debug, PartialEq)]
pub enum MarketCapacity {
    /// Every market, `Â = I`, `b̂ = K`.
    All(DVector<f64>),
    /// Only the listed `(market, capacity)` pairs, one row each.
    Rows(Vec<(usize, f64)>),
}

/// A Cournot game together with the data it was built from.
#[derive(Clone, Debug)]
pub struct CournotGame {
    pub game: Game,
    pub network: TransportNetwork,
    pub firms: Vec<FirmSpec>,
    pub price: Arc<PriceModel>,
}

/// Analytic step-size constants.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CournotConstants {
    pub alpha: f64,
    pub lipschitz: f64,
    pub norm_a: f64,
}

pub fn build_cournot_game(net: &TransportNetwork, firms: Vec<FirmSpec>, price: PriceModel, capacity: MarketCapacity) -> Result<CournotGame> {
    let v = net.vertices();
    let e = net.edges();
    if firms.is_empty() {
        return Err(Error::InvalidInput("at least one firm is required".into()));
    }
    if price.markets() != v {
        return Err(Error::Dimension(format!("price model covers {} markets, network has {v}", price.markets())));
    }
    let coupling = match &capacity {
        MarketCapacity::All(k) => {
            if k.len() != v {
                return Err(Error::Dimension(format!("{} market capacities for {v} markets", k.len())));
            }
            Coupling::new(DMatrix::identity(v, v), k.clone())?
        }
        MarketCapacity::Rows(rows) => {
            let mut a = DMatrix::zeros(rows.len(), v);
            for (r, &(m, _)) in rows.iter().enumerate() {
                if m >= v {
                    return Err(Error::InvalidInput(format!("capacity on market {} of {v}", m + 1)));
                }
                a[(r, m)] = 1.0;
            }
            Coupling::new(a, DVector::from_iterator(rows.len(), rows.iter().map(|r| r.1)))?
        }
    };
    if let Some(k) = coupling.b_hat.iter().find(|&&k| !(k > 0.0)) {
        return Err(Error::InvalidInput(format!("market capacities must be positive, got {k}")));
    }
    let price = Arc::new(price);
    let agents = firms
        .iter()
        .enumerate()
        .map(|(i, f)| {
            if f.location >= v {
                return Err(Error::InvalidInput(format!("firm {} located at market {} of {v}", i + 1, f.location + 1)));
            }
            if !(f.capacity > 0.0 && f.capacity.is_finite()) {
                return Err(Error::InvalidInput(format!("firm {} has capacity {}", i + 1, f.capacity)));
            }
            if f.transport.len() != 1 && f.transport.len() != e {
                return Err(Error::Dimension(format!("firm {}: {} transport costs for {e} edges", i + 1, f.transport.len())));
            }
            let mut h = DMatrix::zeros(v, e + 1);
            h.view_mut((0, 0), (v, e)).copy_from(net.incidence());
            h[(f.location, e)] = 1.0;
            // y = H x ≥ 0  ⇔  −H_v x ≤ 0 for every market v
            let halfspaces = (0..v)
                .map(|m| Halfspace::new((0..=e).map(|k| (k, -h[(m, k)])).collect(), 0.0))
                .collect::<Result<Vec<_>>>()?;
            let set = LocalSet::new(DVector::zeros(e + 1), DVector::from_element(e + 1, f.capacity), halfspaces)
                .map_err(|err| err.for_agent(i + 1))?;
            Ok(Agent {
                set,
                selection: h.clone(),
                offset: DVector::zeros(v),
                cost: Arc::new(FirmCost {
                    firm: f.clone(),
                    selection: h,
                    price: Arc::clone(&price),
                }),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CournotGame {
        game: Game::new(agents, coupling)?,
        network: net.clone(),
        firms,
        price,
    })
}

impl CournotGame {
    /// Sales `yⁱ = Hⁱxⁱ` of every firm.
    pub fn sales(&self, x: &StrategyProfile) -> Vec<DVector<f64>> {
        self.game.images(x)
    }

    /// Production `rⁱ` of every firm.
    pub fn production(&self, x: &StrategyProfile) -> Vec<f64> {
        x.0.iter().map(|xi| xi[xi.len() - 1]).collect()
    }

    pub fn max_capacity(&self) -> f64 {
        self.firms.iter().map(|f| f.capacity).fold(0.0, f64::max)
    }

    /// Closed-form `α = 4/(1 + r̃)³`, `L` as the largest eigenvalue of the
    /// symmetric part of `H_blkdᵀ[(I ⊗ D)(T^ν ⊗ I) + diag(T^ν) ⊗ Dᵀ]H_blkd`,
    /// and `‖Â‖₂`. Requires an affine price.
    pub fn constants(&self, comm: &CommMatrix, rounds: Rounds) -> Result<CournotConstants> {
        let PriceModel::Affine { d_mat, .. } = self.price.as_ref() else {
            return Err(Error::Unsupported("closed-form constants need an affine price; use the sampled estimators".into()));
        };
        let n = self.game.num_agents();
        let v = self.network.vertices();
        let w = self.game.mixing(comm, rounds);
        let eye_n = DMatrix::<f64>::identity(n, n);
        let eye_v = DMatrix::<f64>::identity(v, v);
        let diag_w = DMatrix::from_diagonal(&w.diagonal());
        let middle = eye_n.kronecker(d_mat) * w.kronecker(&eye_v) + diag_w.kronecker(&d_mat.transpose());
        let hb = self.game.selection_blkdiag();
        let p = hb.transpose() * middle * &hb;
        let (_, lipschitz) = sym_eig_extremes(&p);
        let r = self.max_capacity();
        Ok(CournotConstants {
            alpha: 4.0 / (1.0 + r).powi(3),
            lipschitz,
            norm_a: spectral_norm(&self.game.coupling().a_hat),
        })
    }
}

/// Symmetric ring: every agent weights its two neighbors by one half.
pub fn build_ring_comm(n: usize) -> Result<CommMatrix> {
    if n < 3 {
        return Err(Error::InvalidInput(format!("a ring needs at least 3 agents, got {n}")));
    }
    let mut m = DMatrix::zeros(n, n);
    for i in 0..n {
        m[(i, (i + 1) % n)] = 0.5;
        m[(i, (i + n - 1) % n)] = 0.5;
    }
    CommMatrix::new(m)
}

/// Communication matrix of the three-firm chain example.
pub fn small_example_comm() -> CommMatrix {
    CommMatrix::from_rows(&[
        vec![2.0 / 3.0, 1.0 / 3.0, 0.0],
        vec![1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0],
        vec![0.0, 1.0 / 3.0, 2.0 / 3.0],
    ])
    .expect("constant matrix is valid")
}

/// Capacity used when the small example runs without a binding coupling.
pub const UNCONSTRAINED_CAPACITY: f64 = 1e6;

/// The three-firm, five-market chain: firms at markets 1, 3, 5 with
/// capacity 5, transport cost `c(t)`, production cost `2c(r)`, prices
/// `p_v = 10 − σ_v`. With `coupled`, market 3 is limited to `σ₃ ≤ 1/3`;
/// otherwise every market has an ineffective capacity.
pub fn build_small_example(coupled: bool) -> Result<(CournotGame, CommMatrix)> {
    let net = TransportNetwork::chain(5)?;
    let firms = [0, 2, 4]
        .iter()
        .map(|&loc| FirmSpec::canonical(loc, 5.0, &net, 2.0, 1.0, false))
        .collect();
    let price = PriceModel::affine(DMatrix::identity(5, 5), DVector::from_element(5, 10.0))?;
    let capacity = if coupled {
        MarketCapacity::Rows(vec![(2, 1.0 / 3.0)])
    } else {
        MarketCapacity::All(DVector::from_element(5, UNCONSTRAINED_CAPACITY))
    };
    Ok((build_cournot_game(&net, firms, price, capacity)?, small_example_comm()))
}

/// Affine price with cross-market effects.
#[derive(Clone, Debug)]
pub struct PriceMatrix {
    pub model: PriceModel,
    pub min_eigenvalue: f64,
}

impl PriceMatrix {
    pub fn is_psd(&self) -> bool {
        self.min_eigenvalue >= -PSD_TOL
    }
}

/// `D_hh = self_weight`, `D_hk = cross · (1 − ρₑ)` for a road `e` joining
/// `h` and `k`, zero otherwise; `d = base · 1`. The rule does not guarantee
/// `D ⪰ 0` on every graph, so the smallest eigenvalue is reported.
pub fn build_price_matrix(net: &TransportNetwork, base: f64, self_weight: f64, cross: f64) -> PriceMatrix {
    let v = net.vertices();
    let mut d_mat = DMatrix::identity(v, v) * self_weight;
    for r in net.roads() {
        let w = cross * (1.0 - r.length);
        d_mat[(r.from, r.to)] = w;
        d_mat[(r.to, r.from)] = w;
    }
    let (lo, _) = sym_eig_extremes(&d_mat);
    PriceMatrix {
        model: PriceModel::Affine {
            d_mat,
            d: DVector::from_element(v, base),
        },
        min_eigenvalue: lo,
    }
}

/// Parses firm lines `location capacity` (1-indexed location).
pub fn parse_firms(text: &str, vertices: usize) -> Result<Vec<(usize, f64)>> {
    content_lines(text)
        .map(|(line, l)| {
            let f = parse_numbers(line, l)?;
            if f.len() != 2 {
                return Err(Error::Parse {
                    line,
                    msg: "firm line must be \"location capacity\"".into(),
                });
            }
            if !(f[1] > 0.0) {
                return Err(Error::Parse {
                    line,
                    msg: format!("capacity {} must be positive", f[1]),
                });
            }
            Ok((as_index(line, f[0], vertices)?, f[1]))
        })
        .collect()
}

/// Firm locations of the large instance (1-indexed).
pub const LARGE_FIRM_LOCATIONS: [usize; 5] = [37, 20, 11, 6, 35];

/// A connected, planar-ish random road network: uniform points in the unit
/// square, a Euclidean minimum spanning tree, then the shortest extra roads
/// that cross no existing road, until `roads` roads exist (fewer if no
/// non-crossing candidate remains). Lengths are normalized by the longest.
pub fn synthetic_network(vertices: usize, roads: usize, seed: u64) -> Result<TransportNetwork> {
    if vertices < 2 || roads + 1 < vertices {
        return Err(Error::InvalidInput(format!("cannot connect {vertices} markets with {roads} roads")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pts: Vec<(f64, f64)> = (0..vertices).map(|_| (rng.random::<f64>(), rng.random::<f64>())).collect();
    let dist = |a: usize, b: usize| ((pts[a].0 - pts[b].0).powi(2) + (pts[a].1 - pts[b].1).powi(2)).sqrt();
    let mut candidates: Vec<(f64, usize, usize)> = (0..vertices)
        .flat_map(|a| (a + 1..vertices).map(move |b| (a, b)))
        .map(|(a, b)| (dist(a, b), a, b))
        .collect();
    candidates.sort_by(|x, y| x.0.total_cmp(&y.0));
    let mut parent: Vec<usize> = (0..vertices).collect();
    let mut chosen: Vec<(usize, usize)> = Vec::with_capacity(roads);
    let mut rest = Vec::new();
    for &(_, a, b) in &candidates {
        if union(&mut parent, a, b) {
            chosen.push((a, b));
        } else {
            rest.push((a, b));
        }
    }
    for (a, b) in rest {
        if chosen.len() >= roads {
            break;
        }
        let crosses = chosen
            .iter()
            .any(|&(c, d)| segments_cross(pts[a], pts[b], pts[c], pts[d]) && a != c && a != d && b != c && b != d);
        if !crosses {
            chosen.push((a, b));
        }
    }
    let max_len = chosen.iter().map(|&(a, b)| dist(a, b)).fold(0.0, f64::max);
    let list = chosen
        .iter()
        .map(|&(a, b)| Road {
            from: a,
            to: b,
            length: dist(a, b) / max_len,
        })
        .collect();
    TransportNetwork::from_roads(vertices, list)?.with_coordinates(pts)
}

fn segments_cross(p1: (f64, f64), p2: (f64, f64), p3: (f64, f64), p4: (f64, f64)) -> bool {
    let orient = |a: (f64, f64), b: (f64, f64), c: (f64, f64)| (b.0 - a.0) * (c.1 - a.1) - (b.1 - a.1) * (c.0 - a.0);
    let d1 = orient(p3, p4, p1);
    let d2 = orient(p3, p4, p2);
    let d3 = orient(p1, p2, p3);
    let d4 = orient(p1, p2, p4);
    d1 * d2 < 0.0 && d3 * d4 < 0.0
}

/// The large instance on a given road network: five firms with capacity
/// 10 at the fixed locations, transport cost `ρₑ c(t)`, production `2c(r)`,
/// price `10 − Dσ` with the cross-market rule, market capacity `K` per
/// market (on the average).
pub fn build_large_instance(net: &TransportNetwork, market_capacity: f64) -> Result<CournotGame> {
    let v = net.vertices();
    if let Some(&l) = LARGE_FIRM_LOCATIONS.iter().find(|&&l| l > v) {
        return Err(Error::InvalidInput(format!("firm location {l} needs at least {l} markets")));
    }
    let firms = LARGE_FIRM_LOCATIONS
        .iter()
        .map(|&l| FirmSpec::canonical(l - 1, 10.0, net, 2.0, 1.0, true))
        .collect();
    let price = build_price_matrix(net, 10.0, 1.0, 0.3);
    if !price.is_psd() {
        return Err(Error::InvalidInput(format!(
            "price slope matrix is not positive semidefinite (smallest eigenvalue {:e})",
            price.min_eigenvalue
        )));
    }
    build_cournot_game(net, firms, price.model, MarketCapacity::All(DVector::from_element(v, market_capacity)))
}

/// Per-market capacity on the average used by the large instance: a total
/// of 1.5 per market shared by five firms.
pub const LARGE_MARKET_CAPACITY: f64 = 1.5 / 5.0;
