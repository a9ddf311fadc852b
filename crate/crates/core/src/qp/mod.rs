//! Convex quadratic programs over simple polytopes.
//!
//! `solve_qp` minimizes `1/2 v'Qv + c'v` over a set with a cheap exact
//! projection (box, simplex, or a stack of recommendation-row polytopes),
//! optionally intersected with general linear equalities `Av = b` and
//! inequalities `Gv >= h`. The projection-friendly part is handled by an
//! accelerated projected gradient method with adaptive restart; the general
//! constraints are moved into an augmented Lagrangian whose multipliers are
//! updated between inner solves.

mod projection;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::Serialize;

use crate::error::{Error, Result};

pub use projection::{max_quality, project_row_polytope, project_simplex, RowSet};

pub const DEFAULT_TOL: f64 = 1e-7;
pub const DEFAULT_MAX_ITER: usize = 50_000;

/// Matrix-vector product `out = Q v`.
pub type MatVec<'a> = dyn Fn(&[f64], &mut [f64]) + Sync + 'a;

pub enum Quadratic<'a> {
    Zero,
    Dense(DMatrix<f64>),
    Operator(Box<MatVec<'a>>),
}

impl Quadratic<'_> {
    fn apply(&self, v: &[f64], out: &mut [f64]) {
        match self {
            Quadratic::Zero => out.fill(0.0),
            Quadratic::Dense(m) => {
                let n = v.len();
                for (i, o) in out.iter_mut().enumerate() {
                    let mut s = 0.0;
                    for j in 0..n {
                        s += m[(i, j)] * v[j];
                    }
                    *o = s;
                }
            }
            Quadratic::Operator(f) => f(v, out),
        }
    }

    fn is_zero(&self) -> bool {
        matches!(self, Quadratic::Zero)
    }
}

/// Sparse linear form `terms . v` compared against `rhs`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearConstraint {
    pub terms: Vec<(usize, f64)>,
    pub rhs: f64,
}

impl LinearConstraint {
    pub fn new(terms: Vec<(usize, f64)>, rhs: f64) -> Self {
        LinearConstraint { terms, rhs }
    }

    pub fn dense(coeffs: &[f64], rhs: f64) -> Self {
        let terms = coeffs
            .iter()
            .enumerate()
            .filter(|(_, &a)| a != 0.0)
            .map(|(j, &a)| (j, a))
            .collect();
        LinearConstraint { terms, rhs }
    }

    fn eval(&self, v: &[f64]) -> f64 {
        self.terms.iter().map(|&(j, a)| a * v[j]).sum::<f64>() - self.rhs
    }

    fn norm_sq(&self) -> f64 {
        self.terms.iter().map(|&(_, a)| a * a).sum()
    }
}

/// Per-row quality floors `scores[i, :] . y[i, :] >= thresholds[i]`.
#[derive(Clone, Copy, Debug)]
pub struct RowQuality<'a> {
    pub scores: &'a [f64],
    pub thresholds: &'a [f64],
}

/// The part of the feasible set handled by exact projection.
#[derive(Clone, Debug)]
pub enum FeasibleSet<'a> {
    Box { lower: Vec<f64>, upper: Vec<f64> },
    Simplex,
    /// `rows x cols` row-major blocks, each with entries in `[0, cap]` summing
    /// to one, optionally zero on the diagonal and above a quality floor.
    RowPolytopes {
        rows: usize,
        cols: usize,
        cap: f64,
        zero_diagonal: bool,
        quality: Option<RowQuality<'a>>,
    },
}

pub struct QpProblem<'a> {
    pub quadratic: Quadratic<'a>,
    pub linear: Vec<f64>,
    pub set: FeasibleSet<'a>,
    pub equalities: Vec<LinearConstraint>,
    pub inequalities: Vec<LinearConstraint>,
    /// Positive diagonal metric for the gradient steps. It must be constant
    /// on every simplex or row block.
    pub metric: Option<Vec<f64>>,
}

impl<'a> QpProblem<'a> {
    pub fn new(quadratic: Quadratic<'a>, linear: Vec<f64>, set: FeasibleSet<'a>) -> Self {
        QpProblem {
            quadratic,
            linear,
            set,
            equalities: Vec::new(),
            inequalities: Vec::new(),
            metric: None,
        }
    }

    pub fn with_equality(mut self, c: LinearConstraint) -> Self {
        self.equalities.push(c);
        self
    }

    pub fn with_inequality(mut self, c: LinearConstraint) -> Self {
        self.inequalities.push(c);
        self
    }

    pub fn with_metric(mut self, metric: Vec<f64>) -> Self {
        self.metric = Some(metric);
        self
    }

    pub fn dim(&self) -> usize {
        self.linear.len()
    }

    pub fn objective(&self, v: &[f64]) -> f64 {
        let mut qv = vec![0.0; v.len()];
        self.quadratic.apply(v, &mut qv);
        objective_with(&qv, &self.linear, v)
    }
}

fn objective_with(qv: &[f64], c: &[f64], v: &[f64]) -> f64 {
    v.iter()
        .zip(qv)
        .zip(c)
        .map(|((x, q), c)| x * (0.5 * q + c))
        .sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum QpStatus {
    Optimal,
    MaxIter,
    Infeasible,
}

#[derive(Clone, Debug)]
pub struct QpSolution {
    pub point: Vec<f64>,
    pub objective: f64,
    pub primal_residual: f64,
    pub stationarity: f64,
    pub complementarity: f64,
    pub iterations: usize,
    pub status: QpStatus,
}

/// One row of the optional solver trace.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub objective: f64,
    pub primal_residual: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct QpOptions<'w> {
    pub tol: f64,
    pub max_iter: usize,
    pub warm_start: Option<&'w [f64]>,
}

impl Default for QpOptions<'_> {
    fn default() -> Self {
        QpOptions {
            tol: DEFAULT_TOL,
            max_iter: DEFAULT_MAX_ITER,
            warm_start: None,
        }
    }
}

pub fn solve_qp(p: &QpProblem, tol: f64, max_iter: usize) -> Result<QpSolution> {
    solve_qp_with(
        p,
        &QpOptions {
            tol,
            max_iter,
            warm_start: None,
        },
        None,
    )
}

pub fn solve_qp_with(
    p: &QpProblem,
    opts: &QpOptions,
    trace: Option<&mut dyn FnMut(&TraceRow)>,
) -> Result<QpSolution> {
    let solver = Solver::new(p)?;
    solver.run(opts, trace)
}

struct Solver<'p, 'a> {
    p: &'p QpProblem<'a>,
    n: usize,
    inv_metric: Vec<f64>,
    metric: Vec<f64>,
}

struct Multipliers {
    eq: Vec<f64>,
    ineq: Vec<f64>,
    sigma: f64,
    /// Zero during the feasibility phase, one afterwards.
    weight: f64,
}

impl<'p, 'a> Solver<'p, 'a> {
    fn new(p: &'p QpProblem<'a>) -> Result<Self> {
        let n = p.dim();
        if n == 0 {
            return Err(Error::Qp("empty problem".into()));
        }
        if p.linear.iter().any(|c| !c.is_finite()) {
            return Err(Error::Qp("non-finite linear term".into()));
        }
        for c in p.equalities.iter().chain(&p.inequalities) {
            if let Some(&(j, _)) = c.terms.iter().find(|&&(j, _)| j >= n) {
                return Err(Error::DimensionMismatch {
                    what: "constraint column",
                    expected: n,
                    got: j + 1,
                });
            }
        }
        if let Quadratic::Dense(m) = &p.quadratic {
            check_dense_psd(m, n)?;
        }
        let metric = match &p.metric {
            Some(d) => {
                if d.len() != n {
                    return Err(Error::DimensionMismatch {
                        what: "metric",
                        expected: n,
                        got: d.len(),
                    });
                }
                if d.iter().any(|&w| !(w > 0.0 && w.is_finite())) {
                    return Err(Error::Qp("metric weights must be positive".into()));
                }
                d.clone()
            }
            None => vec![1.0; n],
        };
        match &p.set {
            FeasibleSet::Box { lower, upper } => {
                if lower.len() != n || upper.len() != n {
                    return Err(Error::DimensionMismatch {
                        what: "box bounds",
                        expected: n,
                        got: lower.len().min(upper.len()),
                    });
                }
                if lower.iter().zip(upper).any(|(l, u)| l > u) {
                    return Err(Error::Qp("box has lower > upper".into()));
                }
            }
            FeasibleSet::Simplex => {
                if metric.iter().any(|&w| w != metric[0]) {
                    return Err(Error::Qp("simplex metric must be constant".into()));
                }
            }
            FeasibleSet::RowPolytopes {
                rows,
                cols,
                cap,
                zero_diagonal,
                quality,
            } => {
                if rows * cols != n {
                    return Err(Error::DimensionMismatch {
                        what: "row polytope variables",
                        expected: rows * cols,
                        got: n,
                    });
                }
                if let Some(qual) = quality {
                    if qual.scores.len() != n || qual.thresholds.len() != *rows {
                        return Err(Error::DimensionMismatch {
                            what: "quality data",
                            expected: n,
                            got: qual.scores.len(),
                        });
                    }
                }
                for i in 0..*rows {
                    let block = &metric[i * cols..(i + 1) * cols];
                    if block.iter().any(|&w| w != block[0]) {
                        return Err(Error::Qp(format!("metric not constant on row {i}")));
                    }
                    row_set(*cols, *cap, *zero_diagonal, quality, i).check(*cols, i)?;
                }
            }
        }
        let inv_metric = metric.iter().map(|w| 1.0 / w).collect();
        Ok(Solver {
            p,
            n,
            inv_metric,
            metric,
        })
    }

    fn project(&self, v: &[f64], out: &mut [f64], scratch: &mut Vec<f64>) {
        match &self.p.set {
            FeasibleSet::Box { lower, upper } => {
                for (((o, &x), &l), &u) in out.iter_mut().zip(v).zip(lower).zip(upper) {
                    *o = x.clamp(l, u);
                }
            }
            FeasibleSet::Simplex => out.copy_from_slice(&project_simplex(v)),
            FeasibleSet::RowPolytopes {
                rows,
                cols,
                cap,
                zero_diagonal,
                quality,
            } => {
                for i in 0..*rows {
                    let r = i * cols..(i + 1) * cols;
                    row_set(*cols, *cap, *zero_diagonal, quality, i).project(
                        &v[r.clone()],
                        &mut out[r],
                        scratch,
                    );
                }
            }
        }
    }

    /// Largest eigenvalue of `D^-1 H` with `H = Q + sigma (A'A + G'G)`.
    fn lipschitz(&self, sigma: f64, weight: f64) -> f64 {
        let n = self.n;
        let has_cons = !self.p.equalities.is_empty() || !self.p.inequalities.is_empty();
        if (weight == 0.0 || self.p.quadratic.is_zero()) && !(has_cons && sigma > 0.0) {
            return 0.0;
        }
        let mut v: Vec<f64> = (0..n).map(|i| 1.0 + 0.5 * ((i as f64) * 0.7).sin()).collect();
        let mut hv = vec![0.0; n];
        let mut est = 0.0;
        for _ in 0..60 {
            let norm = v
                .iter()
                .zip(&self.metric)
                .map(|(x, w)| w * x * x)
                .sum::<f64>()
                .sqrt();
            if norm == 0.0 {
                break;
            }
            v.iter_mut().for_each(|x| *x /= norm);
            self.hessian_apply(sigma, weight, &v, &mut hv);
            let rq: f64 = v.iter().zip(&hv).map(|(a, b)| a * b).sum();
            let converged = (rq - est).abs() <= 1e-6 * rq.abs();
            est = rq;
            for ((x, h), w) in v.iter_mut().zip(&hv).zip(&self.inv_metric) {
                *x = h * w;
            }
            if converged {
                break;
            }
        }
        est.max(0.0) * 1.02
    }

    fn hessian_apply(&self, sigma: f64, weight: f64, v: &[f64], out: &mut [f64]) {
        if weight == 0.0 {
            out.fill(0.0);
        } else {
            self.p.quadratic.apply(v, out);
        }
        if sigma > 0.0 {
            for c in self.p.equalities.iter().chain(&self.p.inequalities) {
                let r = c.eval(v) + c.rhs;
                for &(j, a) in &c.terms {
                    out[j] += sigma * a * r;
                }
            }
        }
    }

    /// Value and gradient of the augmented smooth part at `v` given `Qv`.
    fn smooth(&self, v: &[f64], qv: &[f64], mult: &Multipliers, grad: &mut [f64]) -> f64 {
        let p = self.p;
        let mut value = 0.0;
        let w = mult.weight;
        for (((g, &x), &q), &c) in grad.iter_mut().zip(v).zip(qv).zip(&p.linear) {
            *g = w * (q + c);
            value += w * x * (0.5 * q + c);
        }
        let sigma = mult.sigma;
        for (c, &lam) in p.equalities.iter().zip(&mult.eq) {
            let r = c.eval(v);
            value += -lam * r + 0.5 * sigma * r * r;
            let coef = sigma * r - lam;
            for &(j, a) in &c.terms {
                grad[j] += coef * a;
            }
        }
        for (c, &mu) in p.inequalities.iter().zip(&mult.ineq) {
            let r = c.eval(v);
            if sigma * r < mu {
                value += -mu * r + 0.5 * sigma * r * r;
                let coef = sigma * r - mu;
                for &(j, a) in &c.terms {
                    grad[j] += coef * a;
                }
            } else {
                value -= mu * mu / (2.0 * sigma);
            }
        }
        value
    }

    fn primal_residual(&self, v: &[f64]) -> f64 {
        let eq = self.p.equalities.iter().map(|c| c.eval(v).abs());
        let ineq = self.p.inequalities.iter().map(|c| (-c.eval(v)).max(0.0));
        eq.chain(ineq).fold(0.0, f64::max)
    }

    fn run(
        &self,
        opts: &QpOptions,
        mut trace: Option<&mut dyn FnMut(&TraceRow)>,
    ) -> Result<QpSolution> {
        let n = self.n;
        let p = self.p;
        let mut scratch = Vec::new();
        let mut x = vec![0.0; n];
        match opts.warm_start {
            Some(w) if w.len() == n => self.project(w, &mut x, &mut scratch),
            Some(w) => {
                return Err(Error::DimensionMismatch {
                    what: "warm start",
                    expected: n,
                    got: w.len(),
                })
            }
            None => {
                let zeros = vec![0.0; n];
                self.project(&zeros, &mut x, &mut scratch);
            }
        }
        let has_cons = !p.equalities.is_empty() || !p.inequalities.is_empty();
        let l_q = self.lipschitz(0.0, 1.0);
        let max_row = p
            .equalities
            .iter()
            .chain(&p.inequalities)
            .map(LinearConstraint::norm_sq)
            .fold(0.0, f64::max);
        let mut mult = Multipliers {
            eq: vec![0.0; p.equalities.len()],
            ineq: vec![0.0; p.inequalities.len()],
            sigma: 1.0,
            weight: 0.0,
        };
        // Stationarity is measured relative to the size of a unit gradient step
        // on the linear term.
        let grad_scale = p
            .linear
            .iter()
            .zip(&self.inv_metric)
            .map(|(c, w)| (c * w).abs())
            .fold(1.0, f64::max);
        let stat_tol = opts.tol * grad_scale;
        let inner_tol = if has_cons { 0.5 * stat_tol } else { stat_tol };
        let mut used = 0usize;
        if has_cons {
            // Feasibility phase: least-squares violation over the simple set.
            let (iters, _) = self.inner(&mut x, &mult, 1e-3 * inner_tol, opts.max_iter, 0, &mut None)?;
            used += iters;
            let violation = self.primal_residual(&x);
            if violation > (10.0 * opts.tol).max(1e-9) {
                let mut qx = vec![0.0; n];
                p.quadratic.apply(&x, &mut qx);
                return Ok(QpSolution {
                    objective: objective_with(&qx, &p.linear, &x),
                    point: x,
                    primal_residual: violation,
                    stationarity: f64::NAN,
                    complementarity: f64::NAN,
                    iterations: used,
                    status: QpStatus::Infeasible,
                });
            }
        }
        mult.weight = 1.0;
        mult.sigma = if has_cons {
            10.0 * l_q.max(1.0) / max_row.max(1e-12)
        } else {
            0.0
        };
        let mut prev_primal = f64::INFINITY;
        let mut polished = None;
        let mut status = QpStatus::MaxIter;
        let mut stationarity;
        let mut primal;
        let mut comp;
        loop {
            let budget = opts.max_iter.saturating_sub(used).max(1);
            let (iters, stat) = self.inner(&mut x, &mult, inner_tol, budget, used, &mut trace)?;
            used += iters;
            stationarity = stat;
            let r_eq: Vec<f64> = p.equalities.iter().map(|c| c.eval(&x)).collect();
            let r_in: Vec<f64> = p.inequalities.iter().map(|c| c.eval(&x)).collect();
            for (lam, r) in mult.eq.iter_mut().zip(&r_eq) {
                *lam -= mult.sigma * r;
            }
            for (mu, r) in mult.ineq.iter_mut().zip(&r_in) {
                *mu = (*mu - mult.sigma * r).max(0.0);
            }
            primal = self.primal_residual(&x);
            comp = mult
                .ineq
                .iter()
                .zip(&r_in)
                .map(|(m, r)| (m * r).abs())
                .fold(0.0, f64::max);
            if stationarity <= stat_tol && primal <= opts.tol && comp <= opts.tol {
                status = QpStatus::Optimal;
                break;
            }
            // A certified active-set solve ends degenerate cases where the
            // penalty would otherwise keep growing.
            if has_cons && stationarity <= stat_tol {
                if let Some(px) = self.polish(&x, &mult.ineq, opts.tol) {
                    polished = Some(px);
                    status = QpStatus::Optimal;
                    break;
                }
            }
            if !has_cons || used >= opts.max_iter {
                break;
            }
            if primal > 0.25 * prev_primal {
                if mult.sigma >= 1e10 && (prev_primal - primal).abs() <= 1e-3 * primal {
                    status = QpStatus::Infeasible;
                    break;
                }
                mult.sigma = (mult.sigma * 10.0).min(1e10);
            }
            prev_primal = primal;
        }
        let mut qx = vec![0.0; n];
        p.quadratic.apply(&x, &mut qx);
        let mut objective = objective_with(&qx, &p.linear, &x);
        if status == QpStatus::Optimal && polished.is_none() {
            polished = self.polish(&x, &mult.ineq, opts.tol);
        }
        if let Some((px, pobj)) = polished {
            x = px;
            objective = pobj;
            primal = self.primal_residual(&x);
            comp = 0.0;
        }
        Ok(QpSolution {
            objective,
            point: x,
            primal_residual: primal,
            stationarity,
            complementarity: comp,
            iterations: used,
            status,
        })
    }

    /// Accelerated projected gradient on the augmented smooth part. Returns
    /// the iteration count and the KKT residual at the final point.
    fn inner(
        &self,
        x: &mut Vec<f64>,
        mult: &Multipliers,
        tol: f64,
        budget: usize,
        offset: usize,
        trace: &mut Option<&mut dyn FnMut(&TraceRow)>,
    ) -> Result<(usize, f64)> {
        let n = self.n;
        let p = self.p;
        let c_scale = p
            .linear
            .iter()
            .zip(&self.inv_metric)
            .map(|(c, w)| (c * w).abs())
            .fold(1.0, f64::max);
        let mut lip = self.lipschitz(mult.sigma, mult.weight).max(1e-6 * c_scale);
        let mut scratch = Vec::new();
        let mut qx = vec![0.0; n];
        p.quadratic.apply(x, &mut qx);
        let mut gx = vec![0.0; n];
        let mut fx = self.smooth(x, &qx, mult, &mut gx);
        let mut grad = vec![0.0; n];
        let mut x_prev = x.clone();
        let mut qx_prev = qx.clone();
        let mut y = vec![0.0; n];
        let mut qy = vec![0.0; n];
        let mut z = vec![0.0; n];
        let mut qz = vec![0.0; n];
        let mut step = vec![0.0; n];
        let mut gz = vec![0.0; n];
        let mut t = 1.0f64;
        let mut momentum = false;
        let mut residual = f64::INFINITY;
        let mut k = 0;
        while k < budget {
            k += 1;
            let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
            let beta = if momentum { (t - 1.0) / t_next } else { 0.0 };
            for i in 0..n {
                y[i] = x[i] + beta * (x[i] - x_prev[i]);
                qy[i] = qx[i] + beta * (qx[i] - qx_prev[i]);
            }
            let fy = if beta == 0.0 {
                grad.copy_from_slice(&gx);
                fx
            } else {
                self.smooth(&y, &qy, mult, &mut grad)
            };
            let fz = loop {
                for i in 0..n {
                    step[i] = y[i] - self.inv_metric[i] * grad[i] / lip;
                }
                self.project(&step, &mut z, &mut scratch);
                p.quadratic.apply(&z, &mut qz);
                let fz = self.smooth(&z, &qz, mult, &mut gz);
                let mut lin = 0.0;
                let mut quad = 0.0;
                let mut curv = 0.0;
                for i in 0..n {
                    let d = z[i] - y[i];
                    lin += grad[i] * d;
                    quad += self.metric[i] * d * d;
                    curv += (gz[i] - grad[i]) * d;
                }
                let bound = fy + lin + 0.5 * lip * quad;
                // Near the optimum the value test drowns in cancellation; the
                // gradient-difference curvature test does not.
                if fz <= bound + 1e-12 * fy.abs().max(1e-300) || curv <= lip * quad || lip > 1e300 {
                    break fz;
                }
                lip *= 2.0;
            };
            let moved = z
                .iter()
                .zip(&y)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            if fz > fx && beta != 0.0 {
                // Restart: drop momentum and retake a plain step from x.
                momentum = false;
                t = 1.0;
                x_prev.copy_from_slice(x);
                qx_prev.copy_from_slice(&qx);
                continue;
            }
            std::mem::swap(&mut x_prev, x);
            std::mem::swap(&mut qx_prev, &mut qx);
            x.copy_from_slice(&z);
            qx.copy_from_slice(&qz);
            fx = fz;
            t = if momentum { t_next } else { 1.0 };
            momentum = true;
            gx.copy_from_slice(&gz);
            if let Some(tr) = trace.as_mut() {
                tr(&TraceRow {
                    iteration: offset + k,
                    objective: objective_with(&qx, &p.linear, x),
                    primal_residual: self.primal_residual(x),
                });
            }
            if moved <= tol * (1.0 / lip).max(1.0) {
                residual = self.kkt_residual(x, &gx, &mut step, &mut z, &mut scratch);
                if residual <= tol {
                    break;
                }
            }
        }
        if residual > tol {
            residual = self.kkt_residual(x, &gx, &mut step, &mut z, &mut scratch);
        }
        Ok((k, residual))
    }

    /// Solves the equality-constrained problem on the active set guessed from
    /// `x` and multipliers `mu`. Only for small explicit problems; the result
    /// is returned only if it is feasible to roundoff and its multipliers
    /// certify optimality. When the guess fails on a small problem, each
    /// guessed bound or inequality is released in turn.
    fn polish(&self, x: &[f64], mu: &[f64], tol: f64) -> Option<(Vec<f64>, f64)> {
        const MAX_DIM: usize = 400;
        const MAX_SWAP_DIM: usize = 64;
        let p = self.p;
        let n = self.n;
        if n > MAX_DIM || matches!(p.quadratic, Quadratic::Operator(_)) {
            return None;
        }
        let delta = (10.0 * tol).max(1e-9);
        let (lower, upper, set_eqs, mut ineqs) = self.explicit_set();
        let mut eqs: Vec<(LinearConstraint, bool)> = set_eqs.into_iter().map(|c| (c, false)).collect();
        let mut fixed: Vec<Option<f64>> = vec![None; n];
        for j in 0..n {
            if x[j] <= lower[j] + delta {
                fixed[j] = Some(lower[j]);
            } else if x[j] >= upper[j] - delta {
                fixed[j] = Some(upper[j]);
            }
        }
        eqs.extend(p.equalities.iter().map(|c| (c.clone(), false)));
        for (c, &m) in p.inequalities.iter().zip(mu) {
            if m > 0.0 || c.eval(x).abs() <= delta {
                eqs.push((c.clone(), true));
            }
        }
        ineqs.retain(|c| c.eval(x).abs() <= delta);
        eqs.extend(ineqs.into_iter().map(|c| (c, true)));
        if let Some(found) = self.solve_active(&fixed, &eqs, &lower, &upper, tol) {
            return Some(found);
        }
        if n > MAX_SWAP_DIM {
            return None;
        }
        for j in 0..n {
            if fixed[j].is_some() {
                let mut f = fixed.clone();
                f[j] = None;
                if let Some(found) = self.solve_active(&f, &eqs, &lower, &upper, tol) {
                    return Some(found);
                }
            }
        }
        for k in 0..eqs.len() {
            if eqs[k].1 {
                let mut e = eqs.clone();
                e.remove(k);
                if let Some(found) = self.solve_active(&fixed, &e, &lower, &upper, tol) {
                    return Some(found);
                }
            }
        }
        None
    }

    /// KKT solve with the variables in `fixed` pinned and `eqs` tight; `true`
    /// marks rows that are inequalities.
    fn solve_active(
        &self,
        fixed: &[Option<f64>],
        eqs: &[(LinearConstraint, bool)],
        lower: &[f64],
        upper: &[f64],
        tol: f64,
    ) -> Option<(Vec<f64>, f64)> {
        let p = self.p;
        let n = self.n;
        let free: Vec<usize> = (0..n).filter(|&j| fixed[j].is_none()).collect();
        let mut pos = vec![usize::MAX; n];
        for (k, &j) in free.iter().enumerate() {
            pos[j] = k;
        }
        let nf = free.len();
        let m = eqs.len();
        if nf == 0 {
            return None;
        }
        let q = |i: usize, j: usize| match &p.quadratic {
            Quadratic::Dense(d) => d[(i, j)],
            _ => 0.0,
        };
        let base: Vec<f64> = (0..n).map(|j| fixed[j].unwrap_or(0.0)).collect();
        let mut kkt = DMatrix::zeros(nf + m, nf + m);
        let mut rhs = nalgebra::DVector::zeros(nf + m);
        for (a, &i) in free.iter().enumerate() {
            let mut r = -p.linear[i];
            for j in 0..n {
                if let Some(v) = fixed[j] {
                    r -= q(i, j) * v;
                }
            }
            rhs[a] = r;
            for (b, &j) in free.iter().enumerate() {
                kkt[(a, b)] = q(i, j);
            }
        }
        for (k, (c, _)) in eqs.iter().enumerate() {
            let mut r = c.rhs;
            for &(j, a) in &c.terms {
                if pos[j] == usize::MAX {
                    r -= a * base[j];
                } else {
                    kkt[(nf + k, pos[j])] += a;
                    kkt[(pos[j], nf + k)] += a;
                }
            }
            rhs[nf + k] = r;
        }
        let sol = kkt.full_piv_lu().solve(&rhs)?;
        let mut out = base;
        for (a, &j) in free.iter().enumerate() {
            out[j] = sol[a];
        }
        if out.iter().any(|v| !v.is_finite()) {
            return None;
        }
        let (_, _, all_eqs, all_ineqs) = self.explicit_set();
        let feas = 1e-12 * (1.0 + out.iter().fold(0.0f64, |a, v| a.max(v.abs())));
        let ok = out
            .iter()
            .zip(lower.iter().zip(upper))
            .all(|(v, (l, u))| *v >= l - feas && *v <= u + feas)
            && all_eqs.iter().chain(&p.equalities).all(|c| c.eval(&out).abs() <= feas)
            && all_ineqs.iter().chain(&p.inequalities).all(|c| c.eval(&out) >= -feas);
        if !ok {
            return None;
        }
        for (v, (l, u)) in out.iter_mut().zip(lower.iter().zip(upper)) {
            *v = v.clamp(*l, *u);
        }
        // Certificate: Qx + c + A'nu = 0 on free variables, nu <= 0 on
        // inequality rows, and reduced costs pointing out of active bounds.
        let mut grad = vec![0.0; n];
        p.quadratic.apply(&out, &mut grad);
        for (g, c) in grad.iter_mut().zip(&p.linear) {
            *g += c;
        }
        let scale = 1.0 + grad.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let sign_tol = tol * scale;
        for (k, (c, is_ineq)) in eqs.iter().enumerate() {
            let nu = sol[nf + k];
            if *is_ineq && nu > sign_tol {
                return None;
            }
            for &(j, a) in &c.terms {
                grad[j] += nu * a;
            }
        }
        for j in 0..n {
            let ok = match fixed[j] {
                None => grad[j].abs() <= sign_tol,
                Some(v) if v == lower[j] && v == upper[j] => true,
                Some(v) if v == lower[j] => grad[j] >= -sign_tol,
                Some(_) => grad[j] <= sign_tol,
            };
            if !ok {
                return None;
            }
        }
        let obj = p.objective(&out);
        Some((out, obj))
    }

    /// The simple set as bounds, equalities and inequalities.
    fn explicit_set(&self) -> (Vec<f64>, Vec<f64>, Vec<LinearConstraint>, Vec<LinearConstraint>) {
        let n = self.n;
        match &self.p.set {
            FeasibleSet::Box { lower, upper } => (lower.clone(), upper.clone(), vec![], vec![]),
            FeasibleSet::Simplex => (
                vec![0.0; n],
                vec![f64::INFINITY; n],
                vec![LinearConstraint::new((0..n).map(|j| (j, 1.0)).collect(), 1.0)],
                vec![],
            ),
            FeasibleSet::RowPolytopes {
                rows,
                cols,
                cap,
                zero_diagonal,
                quality,
            } => {
                let mut upper = vec![*cap; n];
                let mut eqs = Vec::new();
                let mut ineqs = Vec::new();
                for i in 0..*rows {
                    if *zero_diagonal && i < *cols {
                        upper[i * cols + i] = 0.0;
                    }
                    eqs.push(LinearConstraint::new(
                        (0..*cols).map(|j| (i * cols + j, 1.0)).collect(),
                        1.0,
                    ));
                    if let Some(q) = quality {
                        ineqs.push(LinearConstraint::new(
                            (0..*cols).map(|j| (i * cols + j, q.scores[i * cols + j])).collect(),
                            q.thresholds[i],
                        ));
                    }
                }
                (vec![0.0; n], upper, eqs, ineqs)
            }
        }
    }

    /// Unit-step projected gradient residual `|x - proj(x - D^-1 g)|_inf`.
    fn kkt_residual(
        &self,
        x: &[f64],
        grad: &[f64],
        step: &mut [f64],
        out: &mut [f64],
        scratch: &mut Vec<f64>,
    ) -> f64 {
        for i in 0..self.n {
            step[i] = x[i] - self.inv_metric[i] * grad[i];
        }
        self.project(step, out, scratch);
        out.iter()
            .zip(x)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

fn row_set<'q>(
    cols: usize,
    cap: f64,
    zero_diagonal: bool,
    quality: &Option<RowQuality<'q>>,
    i: usize,
) -> RowSet<'q> {
    RowSet {
        cap,
        self_idx: (zero_diagonal && i < cols).then_some(i),
        quality: quality.map(|q| (&q.scores[i * cols..(i + 1) * cols], q.thresholds[i])),
    }
}

fn check_dense_psd(m: &DMatrix<f64>, n: usize) -> Result<()> {
    if m.nrows() != n || m.ncols() != n {
        return Err(Error::DimensionMismatch {
            what: "quadratic matrix",
            expected: n,
            got: m.nrows(),
        });
    }
    let scale = m.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    for i in 0..n {
        for j in 0..i {
            if (m[(i, j)] - m[(j, i)]).abs() > 1e-10 * scale {
                return Err(Error::Qp("quadratic matrix is not symmetric".into()));
            }
        }
    }
    let min_eig = SymmetricEigen::new(m.clone())
        .eigenvalues
        .iter()
        .fold(f64::INFINITY, |a, &v| a.min(v));
    if min_eig < -1e-8 {
        return Err(Error::Qp(format!(
            "quadratic matrix is not positive semidefinite (smallest eigenvalue {min_eig:e})"
        )));
    }
    Ok(())
}
