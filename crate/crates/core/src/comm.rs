//! Communication network: a doubly stochastic mixing matrix `T` and the
//! repeated neighbor averaging agents perform over it.
//!
//! Entry `T[i][j]` is the weight agent `i` assigns to what it receives from
//! agent `j`. Agent `j` is an in-neighbor of `i` when `T[i][j] > 0` and an
//! out-neighbor when `T[j][i] > 0`.

use std::collections::HashMap;
use std::path::Path;
use std::sync::{Arc, Mutex};

use nalgebra::{DMatrix, DVector};

use crate::{Error, Result};

/// Absolute tolerance on every row and column sum.
pub const STOCHASTIC_TOL: f64 = 1e-12;

/// Largest agent count accepted by [`CommMatrix::validate`].
pub const MAX_VALIDATED_AGENTS: usize = 2000;

/// Which neighbors an agent reads from during a mixing round.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    /// Agent `i` holds `Σ_j T[i][j] v_j` (primal averaging).
    In,
    /// Agent `i` holds `Σ_j T[j][i] v_j` (dual averaging).
    Out,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ValidationReport {
    pub doubly_stochastic: bool,
    pub primitive: bool,
}

impl ValidationReport {
    pub fn ok(&self) -> bool {
        self.doubly_stochastic && self.primitive
    }
}

#[derive(Debug)]
pub struct CommMatrix {
    entries: DMatrix<f64>,
    powers: Mutex<HashMap<u32, Arc<DMatrix<f64>>>>,
}

impl Clone for CommMatrix {
    fn clone(&self) -> Self {
        Self::from_checked(self.entries.clone())
    }
}

impl PartialEq for CommMatrix {
    fn eq(&self, other: &Self) -> bool {
        self.entries == other.entries
    }
}

impl CommMatrix {
    /// Wraps a square matrix with finite entries in `[0, 1]`.
    ///
    /// Stochasticity is not required here; use [`CommMatrix::validate`] to
    /// check it. Entries are never renormalized.
    pub fn new(entries: DMatrix<f64>) -> Result<Self> {
        if entries.nrows() != entries.ncols() {
            return Err(Error::InvalidInput(format!(
                "communication matrix must be square, got {}x{}",
                entries.nrows(),
                entries.ncols()
            )));
        }
        if entries.nrows() == 0 {
            return Err(Error::InvalidInput("communication matrix is empty".into()));
        }
        for i in 0..entries.nrows() {
            for j in 0..entries.ncols() {
                let v = entries[(i, j)];
                if !v.is_finite() {
                    return Err(Error::InvalidInput(format!(
                        "entry ({}, {}) is not finite",
                        i + 1,
                        j + 1
                    )));
                }
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::InvalidInput(format!(
                        "entry ({}, {}) = {v} lies outside [0, 1]",
                        i + 1,
                        j + 1
                    )));
                }
            }
        }
        Ok(Self::from_checked(entries))
    }

    fn from_checked(entries: DMatrix<f64>) -> Self {
        Self {
            entries,
            powers: Mutex::new(HashMap::new()),
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::InvalidInput(
                "communication matrix rows must all have length N".into(),
            ));
        }
        Self::new(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
    }

    /// `(1/N) 1 1ᵀ`: every agent reads every other agent with equal weight.
    pub fn uniform(n: usize) -> Self {
        Self::from_checked(DMatrix::from_element(n, n, 1.0 / n as f64))
    }

    pub fn identity(n: usize) -> Self {
        Self::from_checked(DMatrix::identity(n, n))
    }

    pub fn size(&self) -> usize {
        self.entries.nrows()
    }

    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[(i, j)]
    }

    pub fn is_symmetric(&self) -> bool {
        self.entries == self.entries.transpose()
    }

    /// Checks double stochasticity (unit row and column sums within
    /// [`STOCHASTIC_TOL`]) and primitivity.
    pub fn validate(&self) -> Result<ValidationReport> {
        let n = self.size();
        if n > MAX_VALIDATED_AGENTS {
            return Err(Error::InvalidInput(format!(
                "validation is limited to {MAX_VALIDATED_AGENTS} agents, got {n}"
            )));
        }
        Ok(ValidationReport {
            doubly_stochastic: is_doubly_stochastic(&self.entries),
            primitive: is_primitive(&self.entries),
        })
    }

    pub(crate) fn require_doubly_stochastic(&self) -> Result<()> {
        if is_doubly_stochastic(&self.entries) {
            Ok(())
        } else {
            Err(Error::InvalidInput(
                "communication matrix is not doubly stochastic".into(),
            ))
        }
    }

    /// `T^ν`, computed by repeated squaring and memoized per `ν`.
    pub fn power(&self, nu: u32) -> Arc<DMatrix<f64>> {
        if let Some(p) = self.powers.lock().expect("power cache poisoned").get(&nu) {
            return Arc::clone(p);
        }
        let p = Arc::new(matrix_power(&self.entries, nu));
        let mut cache = self.powers.lock().expect("power cache poisoned");
        Arc::clone(cache.entry(nu).or_insert(p))
    }

    /// Performs `nu` rounds of neighbor mixing on the per-agent vectors.
    ///
    /// Each round replaces every agent's value by the weighted combination
    /// of its in-neighbors' (or out-neighbors') current values; after `nu`
    /// rounds agent `i` holds `Σ_j [T^ν]_ij v_j` (resp. `[T^ν]_ji`).
    pub fn consensus_rounds(
        &self,
        values: &[DVector<f64>],
        nu: u32,
        direction: Direction,
    ) -> Result<Vec<DVector<f64>>> {
        let n = self.size();
        if values.len() != n {
            return Err(Error::Dimension(format!(
                "expected {n} agent vectors, got {}",
                values.len()
            )));
        }
        let dim = values[0].len();
        if let Some((i, v)) = values.iter().enumerate().find(|(_, v)| v.len() != dim) {
            return Err(Error::Dimension(format!(
                "agent {} holds a vector of length {}, agent 1 of length {dim}",
                i + 1,
                v.len()
            )));
        }
        let mut current = values.to_vec();
        for _ in 0..nu {
            current = self.mix_once(&current, direction);
        }
        Ok(current)
    }

    pub(crate) fn mix_once(&self, values: &[DVector<f64>], direction: Direction) -> Vec<DVector<f64>> {
        let n = self.size();
        (0..n)
            .map(|i| {
                let mut acc = DVector::zeros(values[0].len());
                for (j, v) in values.iter().enumerate() {
                    let w = match direction {
                        Direction::In => self.entries[(i, j)],
                        Direction::Out => self.entries[(j, i)],
                    };
                    if w != 0.0 {
                        acc.axpy(w, v, 1.0);
                    }
                }
                acc
            })
            .collect()
    }

    /// `max |T^ν − (1/N) 1 1ᵀ|`.
    pub fn consensus_gap(&self, nu: u32) -> f64 {
        let p = self.power(nu);
        let avg = 1.0 / self.size() as f64;
        p.iter().fold(0.0_f64, |m, v| m.max((v - avg).abs()))
    }

    /// Parses the dense text format: `N` on the first line, then `N` rows of
    /// `N` whitespace-separated reals. Blank lines and `#` comments are
    /// skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(k, l)| (k + 1, l.split('#').next().unwrap_or("").trim()))
            .filter(|(_, l)| !l.is_empty());
        let (line, header) = lines.next().ok_or(Error::Parse {
            line: 1,
            msg: "missing agent count".into(),
        })?;
        let n: usize = header.parse().map_err(|_| Error::Parse {
            line,
            msg: format!("expected agent count, found {header:?}"),
        })?;
        let mut rows = Vec::with_capacity(n);
        for (line, l) in lines {
            let row = l
                .split_whitespace()
                .map(|t| {
                    t.parse::<f64>().map_err(|_| Error::Parse {
                        line,
                        msg: format!("invalid number {t:?}"),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            if row.len() != n {
                return Err(Error::Parse {
                    line,
                    msg: format!("expected {n} entries, found {}", row.len()),
                });
            }
            rows.push(row);
        }
        if rows.len() != n {
            return Err(Error::Parse {
                line: text.lines().count(),
                msg: format!("expected {n} rows, found {}", rows.len()),
            });
        }
        Self::from_rows(&rows)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        let n = self.size();
        let mut s = format!("{n}\n");
        for i in 0..n {
            let row: Vec<String> = (0..n).map(|j| format!("{}", self.entries[(i, j)])).collect();
            s.push_str(&row.join(" "));
            s.push('\n');
        }
        s
    }
}

fn is_doubly_stochastic(m: &DMatrix<f64>) -> bool {
    let rows_ok = m
        .row_iter()
        .all(|r| (r.iter().sum::<f64>() - 1.0).abs() <= STOCHASTIC_TOL);
    let cols_ok = m
        .column_iter()
        .all(|c| (c.iter().sum::<f64>() - 1.0).abs() <= STOCHASTIC_TOL);
    rows_ok && cols_ok && m.iter().all(|&v| v >= 0.0)
}

pub(crate) fn matrix_power(m: &DMatrix<f64>, mut nu: u32) -> DMatrix<f64> {
    let n = m.nrows();
    let mut result = DMatrix::identity(n, n);
    let mut base = m.clone();
    while nu > 0 {
        if nu & 1 == 1 {
            result = &result * &base;
        }
        nu >>= 1;
        if nu > 0 {
            base = &base * &base;
        }
    }
    result
}

/// Boolean matrix stored as rows of 64-bit words.
#[derive(Clone, PartialEq)]
struct BitMatrix {
    n: usize,
    words: usize,
    bits: Vec<u64>,
}

impl BitMatrix {
    fn pattern(m: &DMatrix<f64>) -> Self {
        let n = m.nrows();
        let words = n.div_ceil(64);
        let mut bits = vec![0u64; n * words];
        for i in 0..n {
            for j in 0..n {
                if m[(i, j)] > 0.0 {
                    bits[i * words + j / 64] |= 1 << (j % 64);
                }
            }
        }
        Self { n, words, bits }
    }

    fn get(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.words + j / 64] >> (j % 64) & 1 == 1
    }

    fn mul(&self, other: &Self) -> Self {
        let mut bits = vec![0u64; self.bits.len()];
        for i in 0..self.n {
            let out = &mut bits[i * self.words..(i + 1) * self.words];
            for j in 0..self.n {
                if self.get(i, j) {
                    let row = &other.bits[j * self.words..(j + 1) * self.words];
                    for (o, r) in out.iter_mut().zip(row) {
                        *o |= r;
                    }
                }
            }
        }
        Self {
            n: self.n,
            words: self.words,
            bits,
        }
    }

    fn all_set(&self) -> bool {
        (0..self.n).all(|i| (0..self.n).all(|j| self.get(i, j)))
    }
}

/// A nonnegative matrix is primitive iff `T^k > 0` for `k = (N−1)² + 1`
/// (Wielandt). Without zero rows, positivity of `T^k` persists for every
/// larger power, so squaring past the bound is equivalent and exits early.
fn is_primitive(m: &DMatrix<f64>) -> bool {
    let n = m.nrows();
    let pattern = BitMatrix::pattern(m);
    if (0..n).any(|i| (0..n).all(|j| !pattern.get(i, j))) {
        return false;
    }
    let bound = (n - 1) * (n - 1) + 1;
    let mut power = pattern;
    let mut exponent = 1usize;
    loop {
        if power.all_set() {
            return true;
        }
        if exponent >= bound {
            return false;
        }
        power = power.mul(&power);
        exponent *= 2;
    }
}
