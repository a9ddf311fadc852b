//! Domain types of the request model and the Markov-chain mathematics built on them.
//!
//! A user who has just consumed content `i` follows one of the `N` recommended
//! items with probability `a` (each item of the list equally likely), and
//! otherwise issues a direct request drawn from the popularity vector `p0`.
//! With `Y` the normalized recommendation matrix this is the chain
//!
//! ```text
//! P = a * Y + (1 - a) * 1 p0^T
//! ```
//!
//! whose stationary distribution solves `pi^T (I - aY) = (1 - a) p0^T`.

use std::collections::HashSet;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Default tolerance used when checking recommendation-matrix feasibility.
pub const DEFAULT_FEASIBILITY_TOL: f64 = 1e-6;

const SIMPLEX_SUM_TOL: f64 = 1e-12;

/// The content catalogue: `K >= 2` opaque, unique identifiers.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Catalog {
    ids: Vec<String>,
}

impl Catalog {
    pub fn new(ids: Vec<String>) -> Result<Self> {
        if ids.len() < 2 {
            return Err(Error::Invalid(format!(
                "catalog needs at least 2 contents, got {}",
                ids.len()
            )));
        }
        let mut seen = HashSet::with_capacity(ids.len());
        for id in &ids {
            if !seen.insert(id.as_str()) {
                return Err(Error::Invalid(format!("duplicate content id {id:?}")));
            }
        }
        Ok(Self { ids })
    }

    /// Catalogue whose ids are the decimal indices `0..k`.
    pub fn indexed(k: usize) -> Result<Self> {
        Self::new((0..k).map(|i| i.to_string()).collect())
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|x| x == id)
    }
}

/// Pairwise content relatedness `u_ij` in `[0, 1]` with a zero diagonal.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    size: usize,
    data: Vec<f64>,
}

impl SimilarityMatrix {
    /// Builds a matrix from row-major entries, checking the invariants.
    pub fn new(size: usize, data: Vec<f64>) -> Result<Self> {
        check_square(size, data.len(), "similarity matrix entries")?;
        for i in 0..size {
            for j in 0..size {
                let u = data[i * size + j];
                if !u.is_finite() || !(0.0..=1.0).contains(&u) {
                    return Err(Error::Invalid(format!(
                        "similarity u[{i}][{j}] = {u} outside [0, 1]"
                    )));
                }
            }
            if data[i * size + i] != 0.0 {
                return Err(Error::Invalid(format!("similarity diagonal u[{i}][{i}] must be 0")));
            }
        }
        Ok(Self { size, data })
    }

    pub fn zeros(size: usize) -> Self {
        Self {
            size,
            data: vec![0.0; size * size],
        }
    }

    /// Builds the matrix from a closure; the diagonal is forced to zero.
    pub fn from_fn(size: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let mut data = vec![0.0; size * size];
        for i in 0..size {
            for j in 0..size {
                if i != j {
                    data[i * size + j] = f(i, j);
                }
            }
        }
        Self::new(size, data)
    }

    pub fn size(&self) -> usize {
        self.size
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.size + j]
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.size..(i + 1) * self.size]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn row_sum(&self, i: usize) -> f64 {
        self.row(i).iter().sum()
    }

    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&u| u == 0.0 || u == 1.0)
    }

    pub fn is_symmetric(&self) -> bool {
        (0..self.size).all(|i| (0..i).all(|j| self.get(i, j) == self.get(j, i)))
    }

    /// Largest achievable `sum_j y_ij u_ij` for row `i` over the row polytope:
    /// mass `1/N` on the `N` largest off-diagonal scores.
    pub fn max_row_quality(&self, i: usize, list_size: usize) -> f64 {
        let mut scores: Vec<f64> = self
            .row(i)
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(_, &u)| u)
            .collect();
        scores.sort_by(|a, b| b.total_cmp(a));
        scores.iter().take(list_size).sum::<f64>() / list_size as f64
    }
}

/// Direct-request popularity `p0`: nonnegative, summing to one.
#[derive(Clone, Debug, PartialEq)]
pub struct PopularityVector(Vec<f64>);

impl PopularityVector {
    pub fn new(entries: Vec<f64>) -> Result<Self> {
        if entries.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::Invalid("popularity entries must be finite and >= 0".into()));
        }
        let sum: f64 = entries.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_SUM_TOL {
            return Err(Error::Invalid(format!("popularity sums to {sum}, expected 1")));
        }
        warn_on_zero_mass(&entries);
        Ok(Self(entries))
    }

    /// Normalizes nonnegative weights into a distribution.
    pub fn from_weights(weights: Vec<f64>) -> Result<Self> {
        if weights.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::Invalid("popularity weights must be finite and >= 0".into()));
        }
        let sum: f64 = weights.iter().sum();
        if sum <= 0.0 {
            return Err(Error::Invalid("popularity weights sum to zero".into()));
        }
        let entries: Vec<f64> = weights.into_iter().map(|w| w / sum).collect();
        warn_on_zero_mass(&entries);
        Ok(Self(entries))
    }

    pub fn uniform(k: usize) -> Self {
        Self(vec![1.0 / k as f64; k])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

fn warn_on_zero_mass(entries: &[f64]) {
    let zeros = entries.iter().filter(|&&p| p == 0.0).count();
    if zeros > 0 {
        log::warn!("{zeros} contents have zero direct-request popularity; the chain may not be ergodic");
    }
}

/// Per-content fetch cost `x_i >= 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct CostVector(Vec<f64>);

impl CostVector {
    pub fn new(entries: Vec<f64>) -> Result<Self> {
        if entries.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(Error::Invalid("costs must be finite and >= 0".into()));
        }
        Ok(Self(entries))
    }

    /// Cost 0 for cached contents and 1 otherwise.
    pub fn cache_indicator(k: usize, cached: &[usize]) -> Result<Self> {
        let mut x = vec![1.0; k];
        for &c in cached {
            if c >= k {
                return Err(Error::Invalid(format!("cached content {c} outside catalog of {k}")));
            }
            x[c] = 0.0;
        }
        Ok(Self(x))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn scaled(&self, factor: f64) -> Result<Self> {
        Self::new(self.0.iter().map(|x| x * factor).collect())
    }
}

/// A constraint violated by a candidate recommendation matrix.
#[derive(Clone, Debug, PartialEq)]
pub enum Violation {
    NonFinite { row: usize, col: usize },
    Negative { row: usize, col: usize, value: f64 },
    AboveCap { row: usize, col: usize, value: f64, cap: f64 },
    Diagonal { row: usize, value: f64 },
    RowSum { row: usize, sum: f64 },
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Violation::NonFinite { row, col } => write!(f, "y[{row}][{col}] is not finite"),
            Violation::Negative { row, col, value } => write!(f, "y[{row}][{col}] = {value:e} < 0"),
            Violation::AboveCap { row, col, value, cap } => {
                write!(f, "y[{row}][{col}] = {value} exceeds 1/N = {cap}")
            }
            Violation::Diagonal { row, value } => write!(f, "diagonal y[{row}][{row}] = {value:e} != 0"),
            Violation::RowSum { row, sum } => write!(f, "row {row} sums to {sum}, expected 1"),
        }
    }
}

/// Normalized recommendation matrix `Y`: row-stochastic, entries in `[0, 1/N]`,
/// zero diagonal. `N * y_ij` is the probability that `j` appears in the list
/// shown after `i`.
///
/// Construction only checks shape and finiteness so that candidate matrices
/// can be inspected with [`validate_rec_matrix`]; solver outputs are validated
/// by their producers.
#[derive(Clone, Debug, PartialEq)]
pub struct RecMatrix {
    size: usize,
    list_size: usize,
    data: Vec<f64>,
    tol: f64,
}

impl RecMatrix {
    pub fn new(size: usize, list_size: usize, data: Vec<f64>) -> Result<Self> {
        check_square(size, data.len(), "recommendation matrix entries")?;
        if list_size == 0 {
            return Err(Error::Invalid("list size N must be >= 1".into()));
        }
        Ok(Self {
            size,
            list_size,
            data,
            tol: DEFAULT_FEASIBILITY_TOL,
        })
    }

    /// Like [`RecMatrix::new`] but rejects matrices with violations above `tol`.
    pub fn validated(size: usize, list_size: usize, data: Vec<f64>, tol: f64) -> Result<Self> {
        let y = Self::new(size, list_size, data)?.with_tolerance(tol);
        let violations = validate_rec_matrix(&y, tol);
        if let Some(v) = violations.first() {
            return Err(Error::Invalid(format!(
                "infeasible recommendation matrix ({} violations, first: {v})",
                violations.len()
            )));
        }
        Ok(y)
    }

    pub fn with_tolerance(mut self, tol: f64) -> Self {
        self.tol = tol;
        self
    }

    /// Recommends the `N` most similar contents of every row at `1/N` each
    /// (ties towards lower index).
    pub fn top_similarity(u: &SimilarityMatrix, list_size: usize) -> Result<Self> {
        let k = u.size();
        if list_size == 0 || list_size >= k {
            return Err(Error::Invalid(format!(
                "list size {list_size} must be in 1..{k} for a catalog of {k}"
            )));
        }
        let cap = 1.0 / list_size as f64;
        let mut data = vec![0.0; k * k];
        let mut order: Vec<usize> = Vec::with_capacity(k);
        for i in 0..k {
            order.clear();
            order.extend((0..k).filter(|&j| j != i));
            let row = u.row(i);
            order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
            for &j in order.iter().take(list_size) {
                data[i * k + j] = cap;
            }
        }
        Self::new(k, list_size, data)
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn list_size(&self) -> usize {
        self.list_size
    }

    pub fn tolerance(&self) -> f64 {
        self.tol
    }

    pub fn cap(&self) -> f64 {
        1.0 / self.list_size as f64
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.size + j]
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.size..(i + 1) * self.size]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    /// `Y^T v`.
    pub fn transpose_mul(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.size];
        for (i, &vi) in v.iter().enumerate() {
            if vi == 0.0 {
                continue;
            }
            for (o, &y) in out.iter_mut().zip(self.row(i)) {
                *o += vi * y;
            }
        }
        out
    }

    /// `Y v`.
    pub fn mul(&self, v: &[f64]) -> Vec<f64> {
        (0..self.size).map(|i| dot(self.row(i), v)).collect()
    }
}

/// Lists every violated invariant of `y` at tolerance `tol`.
pub fn validate_rec_matrix(y: &RecMatrix, tol: f64) -> Vec<Violation> {
    let k = y.size();
    let cap = y.cap();
    let mut out = Vec::new();
    for i in 0..k {
        let row = y.row(i);
        let mut sum = 0.0;
        for (j, &v) in row.iter().enumerate() {
            if !v.is_finite() {
                out.push(Violation::NonFinite { row: i, col: j });
                continue;
            }
            sum += v;
            if i == j {
                if v.abs() > tol {
                    out.push(Violation::Diagonal { row: i, value: v });
                }
                continue;
            }
            if v < -tol {
                out.push(Violation::Negative { row: i, col: j, value: v });
            }
            if v > cap + tol {
                out.push(Violation::AboveCap {
                    row: i,
                    col: j,
                    value: v,
                    cap,
                });
            }
        }
        if sum.is_finite() && (sum - 1.0).abs() > tol {
            out.push(Violation::RowSum { row: i, sum });
        }
    }
    out
}

/// Follow probability `a`, list size `N` and direct popularity `p0`.
#[derive(Clone, Debug, PartialEq)]
pub struct RequestModel {
    popularity: PopularityVector,
    follow_prob: f64,
    list_size: usize,
}

impl RequestModel {
    /// `a` must lie in `[0, 1)`; `a = 1` makes `I - aY` possibly singular.
    pub fn new(popularity: PopularityVector, follow_prob: f64, list_size: usize) -> Result<Self> {
        if !(0.0..1.0).contains(&follow_prob) {
            return Err(Error::Invalid(format!(
                "follow probability a = {follow_prob} must be in [0, 1)"
            )));
        }
        if list_size == 0 || list_size >= popularity.len() {
            return Err(Error::Invalid(format!(
                "list size N = {list_size} must satisfy 1 <= N < K = {}",
                popularity.len()
            )));
        }
        Ok(Self {
            popularity,
            follow_prob,
            list_size,
        })
    }

    pub fn popularity(&self) -> &PopularityVector {
        &self.popularity
    }

    pub fn p0(&self) -> &[f64] {
        self.popularity.as_slice()
    }

    pub fn follow_prob(&self) -> f64 {
        self.follow_prob
    }

    pub fn list_size(&self) -> usize {
        self.list_size
    }

    pub fn size(&self) -> usize {
        self.popularity.len()
    }

    /// Same model with another follow probability.
    pub fn with_follow_prob(&self, follow_prob: f64) -> Result<Self> {
        Self::new(self.popularity.clone(), follow_prob, self.list_size)
    }

    /// `v^T P` without materializing `P`.
    pub fn left_mul_transition(&self, y: &RecMatrix, v: &[f64]) -> Vec<f64> {
        let a = self.follow_prob;
        let mass: f64 = v.iter().sum();
        let mut out = y.transpose_mul(v);
        for (o, &p) in out.iter_mut().zip(self.p0()) {
            *o = a * *o + (1.0 - a) * mass * p;
        }
        out
    }

    /// `P v` without materializing `P`.
    pub fn right_mul_transition(&self, y: &RecMatrix, v: &[f64]) -> Vec<f64> {
        let a = self.follow_prob;
        let pv = dot(self.p0(), v);
        let mut out = y.mul(v);
        for o in out.iter_mut() {
            *o = a * *o + (1.0 - a) * pv;
        }
        out
    }
}

/// Dense row-stochastic transition matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct TransitionMatrix {
    size: usize,
    data: Vec<f64>,
}

impl TransitionMatrix {
    pub fn new(size: usize, data: Vec<f64>) -> Result<Self> {
        check_square(size, data.len(), "transition matrix entries")?;
        Ok(Self { size, data })
    }

    pub fn identity(size: usize) -> Self {
        let mut data = vec![0.0; size * size];
        for i in 0..size {
            data[i * size + i] = 1.0;
        }
        Self { size, data }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.size + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.size..(i + 1) * self.size]
    }

    /// `v^T P`.
    pub fn left_mul(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.size];
        for (i, &vi) in v.iter().enumerate() {
            if vi == 0.0 {
                continue;
            }
            for (o, &p) in out.iter_mut().zip(self.row(i)) {
                *o += vi * p;
            }
        }
        out
    }
}

/// Stationary distribution of the request chain.
#[derive(Clone, Debug, PartialEq)]
pub struct StationaryVector(Vec<f64>);

impl StationaryVector {
    /// Wraps a distribution; entries must be finite and nonnegative.
    pub fn new(entries: Vec<f64>) -> Result<Self> {
        if entries.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::Invalid("stationary entries must be finite and >= 0".into()));
        }
        Ok(Self(entries))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

/// `P = a * Y + (1 - a) * 1 p0^T`.
pub fn build_transition(y: &RecMatrix, m: &RequestModel) -> Result<TransitionMatrix> {
    check_dims(y, m)?;
    let k = y.size();
    let a = m.follow_prob();
    let p0 = m.p0();
    let mut data = Vec::with_capacity(k * k);
    for i in 0..k {
        data.extend(y.row(i).iter().zip(p0).map(|(&yij, &pj)| a * yij + (1.0 - a) * pj));
    }
    TransitionMatrix::new(k, data)
}

/// Solves `pi^T (I - aY) = (1 - a) p0^T` by LU factorization of the
/// transposed system and normalizes the result.
pub fn stationary_direct(y: &RecMatrix, m: &RequestModel) -> Result<StationaryVector> {
    check_dims(y, m)?;
    let k = y.size();
    let a = m.follow_prob();
    let system = DMatrix::from_fn(k, k, |r, c| {
        let id = if r == c { 1.0 } else { 0.0 };
        id - a * y.get(c, r)
    });
    let rhs = DVector::from_iterator(k, m.p0().iter().map(|p| (1.0 - a) * p));
    let sol = system.lu().solve(&rhs).ok_or(Error::Singular)?;
    let total: f64 = sol.iter().sum();
    if !total.is_finite() || total <= 0.0 {
        return Err(Error::Singular);
    }
    // Roundoff can leave entries at -1e-17; clamp before wrapping.
    let pi = sol.iter().map(|p| (p / total).max(0.0)).collect();
    Ok(StationaryVector(pi))
}

/// Power iteration `pi^T <- pi^T P` from the uniform vector until the L1
/// change falls below `tol`.
pub fn stationary_power(p: &TransitionMatrix, tol: f64, max_iter: usize) -> Result<StationaryVector> {
    let k = p.size();
    let mut pi = vec![1.0 / k as f64; k];
    let mut change = f64::INFINITY;
    for _ in 0..max_iter {
        let next = p.left_mul(&pi);
        change = l1_distance(&next, &pi);
        pi = next;
        if change <= tol {
            let total: f64 = pi.iter().sum();
            return Ok(StationaryVector(pi.into_iter().map(|x| x / total).collect()));
        }
    }
    Err(Error::NoConvergence {
        iterations: max_iter,
        residual: change,
    })
}

/// Average cost per request `pi^T x`.
pub fn expected_cost(pi: &StationaryVector, x: &CostVector) -> Result<f64> {
    if pi.len() != x.len() {
        return Err(Error::DimensionMismatch {
            what: "cost vector length",
            expected: pi.len(),
            got: x.len(),
        });
    }
    Ok(dot(pi.as_slice(), x.as_slice()))
}

/// `sum_{m=0}^{M} p0^T P^m x` by repeated vector-matrix products.
pub fn finite_horizon_cost(y: &RecMatrix, m: &RequestModel, x: &CostVector, horizon: usize) -> Result<f64> {
    check_dims(y, m)?;
    if x.len() != y.size() {
        return Err(Error::DimensionMismatch {
            what: "cost vector length",
            expected: y.size(),
            got: x.len(),
        });
    }
    let mut v = m.p0().to_vec();
    let mut total = dot(&v, x.as_slice());
    for _ in 0..horizon {
        v = m.left_mul_transition(y, &v);
        total += dot(&v, x.as_slice());
    }
    Ok(total)
}

/// Long-run fraction of requests that hit the cache, `1 - pi^T x` with the
/// 0/1 miss indicator `x`.
pub fn cache_hit_ratio(y: &RecMatrix, m: &RequestModel, cached: &[usize]) -> Result<f64> {
    let x = CostVector::cache_indicator(y.size(), cached)?;
    let pi = stationary_direct(y, m)?;
    Ok((1.0 - expected_cost(&pi, &x)?).clamp(0.0, 1.0))
}

/// Per-row recommendation quality `sum_j y_ij u_ij`.
pub fn quality_of(y: &RecMatrix, u: &SimilarityMatrix) -> Result<Vec<f64>> {
    if y.size() != u.size() {
        return Err(Error::DimensionMismatch {
            what: "similarity matrix size",
            expected: y.size(),
            got: u.size(),
        });
    }
    Ok((0..y.size()).map(|i| dot(y.row(i), u.row(i))).collect())
}

/// `max_j |(pi^T - pi^T P)_j|`.
pub fn stationarity_residual(pi: &StationaryVector, y: &RecMatrix, m: &RequestModel) -> f64 {
    let next = m.left_mul_transition(y, pi.as_slice());
    next.iter()
        .zip(pi.as_slice())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max)
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn l1_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

fn check_square(size: usize, len: usize, what: &'static str) -> Result<()> {
    if size * size != len {
        return Err(Error::DimensionMismatch {
            what,
            expected: size * size,
            got: len,
        });
    }
    Ok(())
}

fn check_dims(y: &RecMatrix, m: &RequestModel) -> Result<()> {
    if y.size() != m.size() {
        return Err(Error::DimensionMismatch {
            what: "recommendation matrix size",
            expected: m.size(),
            got: y.size(),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model(p0: &[f64], a: f64, n: usize) -> RequestModel {
        RequestModel::new(PopularityVector::new(p0.to_vec()).unwrap(), a, n).unwrap()
    }

    fn swap2() -> RecMatrix {
        RecMatrix::new(2, 1, vec![0.0, 1.0, 1.0, 0.0]).unwrap()
    }

    fn cycle3() -> RecMatrix {
        RecMatrix::new(3, 1, vec![0., 1., 0., 0., 0., 1., 1., 0., 0.]).unwrap()
    }

    #[test]
    fn validate_accepts_unique_feasible_point() {
        assert!(validate_rec_matrix(&swap2(), 1e-9).is_empty());
    }

    #[test]
    fn validate_flags_diagonal() {
        let y = RecMatrix::new(2, 1, vec![0.5, 0.5, 1.0, 0.0]).unwrap();
        let v = validate_rec_matrix(&y, 1e-9);
        assert!(v.contains(&Violation::Diagonal { row: 0, value: 0.5 }), "{v:?}");
    }

    #[test]
    fn validate_flags_box() {
        let y = RecMatrix::new(
            3,
            2,
            vec![0.0, 0.5, 0.5, 0.5, 0.0, 0.5, 0.6, 0.4, 0.0],
        )
        .unwrap();
        let v = validate_rec_matrix(&y, 1e-9);
        assert_eq!(
            v,
            vec![Violation::AboveCap {
                row: 2,
                col: 0,
                value: 0.6,
                cap: 0.5
            }]
        );
    }

    #[test]
    fn validate_flags_row_sum() {
        let y = RecMatrix::new(2, 1, vec![0.0, 0.9, 1.0, 0.0]).unwrap();
        let v = validate_rec_matrix(&y, 1e-6);
        assert!(matches!(v[0], Violation::RowSum { row: 0, .. }));
    }

    #[test]
    fn transition_with_no_follow_is_popularity() {
        let p = build_transition(&swap2(), &model(&[0.3, 0.7], 0.0, 1)).unwrap();
        for i in 0..2 {
            assert_eq!(p.row(i), &[0.3, 0.7]);
        }
    }

    #[test]
    fn transition_near_one_follows_recommendations() {
        let p = build_transition(&swap2(), &model(&[0.5, 0.5], 0.999, 1)).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert!((p.get(i, j) - swap2().get(i, j)).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn transition_direct_evaluation() {
        let p = build_transition(&swap2(), &model(&[0.5, 0.5], 0.8, 1)).unwrap();
        let want = [0.1, 0.9, 0.9, 0.1];
        for (i, w) in want.iter().enumerate() {
            assert!((p.get(i / 2, i % 2) - w).abs() < 1e-15);
        }
        for i in 0..2 {
            assert!((p.row(i).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn follow_prob_one_rejected() {
        let err = RequestModel::new(PopularityVector::uniform(3), 1.0, 1);
        assert!(err.is_err());
        assert!(RequestModel::new(PopularityVector::uniform(3), 0.5, 3).is_err());
    }

    #[test]
    fn stationary_no_follow_is_p0() {
        let m = model(&[0.2, 0.5, 0.3], 0.0, 1);
        let pi = stationary_direct(&cycle3(), &m).unwrap();
        for (a, b) in pi.as_slice().iter().zip(m.p0()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn stationary_symmetric_swap() {
        let pi = stationary_direct(&swap2(), &model(&[0.5, 0.5], 0.8, 1)).unwrap();
        assert!((pi.as_slice()[0] - 0.5).abs() < 1e-14);
        assert!((pi.as_slice()[1] - 0.5).abs() < 1e-14);
    }

    #[test]
    fn stationary_cycle_matches_power_oracle() {
        // Frozen from an independent power iteration (10^4 steps): [27, 24, 19] / 70.
        let want = [27.0 / 70.0, 24.0 / 70.0, 19.0 / 70.0];
        let m = model(&[0.5, 0.3, 0.2], 0.5, 1);
        let pi = stationary_direct(&cycle3(), &m).unwrap();
        for (a, b) in pi.as_slice().iter().zip(want) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        assert!(stationarity_residual(&pi, &cycle3(), &m) <= 1e-10);
    }

    #[test]
    fn power_identity_keeps_uniform() {
        let pi = stationary_power(&TransitionMatrix::identity(2), 1e-12, 10).unwrap();
        assert_eq!(pi.as_slice(), &[0.5, 0.5]);
    }

    #[test]
    fn power_rank_one_converges_in_one_step() {
        let r = [0.1, 0.6, 0.3];
        let p = TransitionMatrix::new(3, r.repeat(3)).unwrap();
        let next = p.left_mul(&[1.0 / 3.0; 3]);
        for (a, b) in next.iter().zip(r) {
            assert!((a - b).abs() < 1e-15);
        }
        let pi = stationary_power(&p, 1e-14, 5).unwrap();
        for (a, b) in pi.as_slice().iter().zip(r) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn power_reports_non_convergence() {
        let p = TransitionMatrix::new(3, vec![0., 1., 0., 0., 0., 1., 0.5, 0.5, 0.]).unwrap();
        match stationary_power(&p, 1e-30, 4) {
            Err(Error::NoConvergence { iterations: 4, residual }) => assert!(residual > 0.0),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn expected_cost_examples() {
        let pi = StationaryVector::new(vec![0.2, 0.3, 0.5]).unwrap();
        let ones = CostVector::new(vec![1.0; 3]).unwrap();
        let zeros = CostVector::new(vec![0.0; 3]).unwrap();
        assert!((expected_cost(&pi, &ones).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(expected_cost(&pi, &zeros).unwrap(), 0.0);
        let x = CostVector::new(vec![1.0, 0.0, 1.0]).unwrap();
        assert!((expected_cost(&pi, &x).unwrap() - 0.7).abs() < 1e-15);
    }

    #[test]
    fn finite_horizon_examples() {
        let m = model(&[0.5, 0.3, 0.2], 0.5, 1);
        let x = CostVector::new(vec![1.0, 0.0, 1.0]).unwrap();
        assert!((finite_horizon_cost(&cycle3(), &m, &x, 0).unwrap() - 0.7).abs() < 1e-15);
        let ones = CostVector::new(vec![1.0; 3]).unwrap();
        assert!((finite_horizon_cost(&cycle3(), &m, &ones, 9).unwrap() - 10.0).abs() < 1e-12);
    }

    #[test]
    fn finite_horizon_average_approaches_stationary_cost() {
        let m = model(&[0.5, 0.3, 0.2], 0.5, 1);
        let x = CostVector::new(vec![1.0, 0.0, 1.0]).unwrap();
        let horizon = 10_000;
        let avg = finite_horizon_cost(&cycle3(), &m, &x, horizon).unwrap() / (horizon + 1) as f64;
        let pi = stationary_direct(&cycle3(), &m).unwrap();
        assert!((avg - expected_cost(&pi, &x).unwrap()).abs() < 1e-3);
    }

    #[test]
    fn cache_hit_ratio_examples() {
        let m = model(&[0.4, 0.35, 0.25], 0.0, 1);
        assert_eq!(cache_hit_ratio(&cycle3(), &m, &[0, 1, 2]).unwrap(), 1.0);
        assert_eq!(cache_hit_ratio(&cycle3(), &m, &[]).unwrap(), 0.0);
        assert!((cache_hit_ratio(&cycle3(), &m, &[0]).unwrap() - 0.4).abs() < 1e-12);
    }

    #[test]
    fn quality_examples() {
        let u = SimilarityMatrix::new(3, vec![0., 1., 0.4, 1., 0., 1., 1., 1., 0.]).unwrap();
        let y = RecMatrix::new(3, 2, vec![0., 0.5, 0.5, 0.5, 0., 0.5, 0.5, 0.5, 0.]).unwrap();
        let q = quality_of(&y, &u).unwrap();
        assert!((q[0] - 0.7).abs() < 1e-15);
        assert_eq!(q[1], 1.0);
        assert_eq!(q[2], 1.0);
        let y0 = RecMatrix::new(3, 1, vec![0., 0., 1., 0., 0., 1., 0., 1., 0.]).unwrap();
        let u0 = SimilarityMatrix::new(3, vec![0., 1., 0., 1., 0., 0., 1., 0., 0.]).unwrap();
        assert_eq!(quality_of(&y0, &u0).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn similarity_rejects_bad_entries() {
        assert!(SimilarityMatrix::new(2, vec![0.0, 1.5, 0.0, 0.0]).is_err());
        assert!(SimilarityMatrix::new(2, vec![0.1, 0.5, 0.0, 0.0]).is_err());
        assert!(SimilarityMatrix::new(2, vec![0.0; 3]).is_err());
    }

    #[test]
    fn catalog_rejects_duplicates_and_tiny() {
        assert!(Catalog::new(vec!["a".into()]).is_err());
        assert!(Catalog::new(vec!["a".into(), "a".into()]).is_err());
        let c = Catalog::new(vec!["a".into(), "b".into()]).unwrap();
        assert_eq!(c.index_of("b"), Some(1));
    }

    #[test]
    fn top_similarity_picks_largest_scores() {
        let u = SimilarityMatrix::new(3, vec![0., 0.2, 0.9, 0.5, 0., 0.5, 0.3, 0.1, 0.]).unwrap();
        let y = RecMatrix::top_similarity(&u, 1).unwrap();
        assert_eq!(y.as_slice(), &[0., 0., 1., 1., 0., 0., 1., 0., 0.]);
    }
}
