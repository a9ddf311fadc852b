//! Recommendation policies: the one-step (myopic) LP and the alternating
//! augmented-Lagrangian scheme for the long-run stationary cost.

use std::cmp::Ordering;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    dot, expected_cost, stationary_direct, CostVector, RecMatrix, RequestModel, SimilarityMatrix,
    StationaryVector, DEFAULT_FEASIBILITY_TOL,
};
use crate::qp::{
    max_quality, solve_qp_with, FeasibleSet, QpOptions, QpProblem, QpStatus, Quadratic, RowQuality,
};

/// Everything that defines one recommendation problem instance.
#[derive(Clone, Debug)]
pub struct OptimInputs {
    similarity: SimilarityMatrix,
    model: RequestModel,
    cost: CostVector,
    quality: Vec<f64>,
}

impl OptimInputs {
    pub fn new(
        similarity: SimilarityMatrix,
        model: RequestModel,
        cost: CostVector,
        quality: Vec<f64>,
    ) -> Result<Self> {
        let k = model.size();
        for (what, got) in [
            ("similarity size", similarity.size()),
            ("cost length", cost.len()),
            ("quality thresholds", quality.len()),
        ] {
            if got != k {
                return Err(Error::DimensionMismatch {
                    what,
                    expected: k,
                    got,
                });
            }
        }
        let n = model.list_size();
        for (i, &q) in quality.iter().enumerate() {
            if !(0.0..=1.0).contains(&q) {
                return Err(Error::Invalid(format!("quality threshold {q} of row {i} outside [0, 1]")));
            }
            let best = similarity.max_row_quality(i, n);
            if best < q - 1e-12 {
                return Err(Error::InfeasibleRow {
                    row: i,
                    max_quality: best,
                    required: q,
                });
            }
        }
        Ok(OptimInputs {
            similarity,
            model,
            cost,
            quality,
        })
    }

    pub fn uniform(
        similarity: SimilarityMatrix,
        model: RequestModel,
        cost: CostVector,
        q: f64,
    ) -> Result<Self> {
        let k = model.size();
        Self::new(similarity, model, cost, vec![q; k])
    }

    pub fn similarity(&self) -> &SimilarityMatrix {
        &self.similarity
    }

    pub fn model(&self) -> &RequestModel {
        &self.model
    }

    pub fn cost(&self) -> &CostVector {
        &self.cost
    }

    pub fn quality(&self) -> &[f64] {
        &self.quality
    }

    pub fn size(&self) -> usize {
        self.model.size()
    }

    fn row_set(&self) -> FeasibleSet<'_> {
        let k = self.size();
        FeasibleSet::RowPolytopes {
            rows: k,
            cols: k,
            cap: 1.0 / self.model.list_size() as f64,
            zero_diagonal: true,
            quality: self.quality.iter().any(|&q| q > 0.0).then_some(RowQuality {
                scores: self.similarity.as_slice(),
                thresholds: &self.quality,
            }),
        }
    }
}

/// Expected cost of the next request, `p0'(aY + (1-a)P0)x`.
pub fn one_step_cost(y: &RecMatrix, inputs: &OptimInputs) -> f64 {
    let m = inputs.model();
    let x = inputs.cost().as_slice();
    let a = m.follow_prob();
    let p0 = m.p0();
    let rec: f64 = (0..y.size()).map(|i| p0[i] * dot(y.row(i), x)).sum();
    a * rec + (1.0 - a) * dot(p0, x)
}

/// Exact minimizer of `x . y` over one row polytope
/// `{0 <= y <= 1/N, sum y = 1, y_self = 0, u . y >= q}`.
///
/// Without the quality floor the LP is solved by the N cheapest items. With a
/// binding floor the Lagrangian `(x - mu u) . y` is minimized greedily and
/// `mu` is bisected to the breakpoint where the greedy quality crosses `q`;
/// the two greedy vertices on either side are mixed to meet `q` exactly.
pub fn solve_row_lp(
    x: &[f64],
    u: &[f64],
    list_size: usize,
    self_idx: usize,
    q: f64,
    out: &mut [f64],
) -> Result<()> {
    let k = x.len();
    if u.len() != k || out.len() != k {
        return Err(Error::DimensionMismatch {
            what: "row length",
            expected: k,
            got: u.len().min(out.len()),
        });
    }
    if list_size == 0 || list_size >= k {
        return Err(Error::EmptyRowPolytope {
            available: k.saturating_sub(1),
            cap: 1.0 / list_size.max(1) as f64,
        });
    }
    let cap = 1.0 / list_size as f64;
    let best = max_quality(u, cap, Some(self_idx));
    if best < q - 1e-12 {
        return Err(Error::InfeasibleRow {
            row: self_idx,
            max_quality: best,
            required: q,
        });
    }
    let mut idx: Vec<usize> = Vec::with_capacity(k);
    let greedy = |mu: f64, plus: bool, idx: &mut Vec<usize>| -> f64 {
        idx.clear();
        idx.extend((0..k).filter(|&j| j != self_idx));
        let cmp = |&a: &usize, &b: &usize| -> Ordering {
            let ka = x[a] - mu * u[a];
            let kb = x[b] - mu * u[b];
            let ord = ka.total_cmp(&kb);
            let ord = if plus { ord.then(u[b].total_cmp(&u[a])) } else { ord };
            ord.then(a.cmp(&b))
        };
        if list_size < idx.len() {
            idx.select_nth_unstable_by(list_size - 1, cmp);
            idx.truncate(list_size);
        }
        idx.sort_unstable();
        idx.iter().map(|&j| u[j]).sum::<f64>() * cap
    };
    let feasible = |quality: f64| quality >= q - 1e-12;

    out.fill(0.0);
    let mut chosen = Vec::with_capacity(list_size);
    let q0 = greedy(0.0, false, &mut chosen);
    if feasible(q0) {
        for &j in &chosen {
            out[j] = cap;
        }
        return Ok(());
    }
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    while !feasible(greedy(hi, true, &mut idx)) {
        lo = hi;
        hi *= 2.0;
        if !hi.is_finite() {
            return Err(Error::InfeasibleRow {
                row: self_idx,
                max_quality: best,
                required: q,
            });
        }
    }
    for _ in 0..2100 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if feasible(greedy(mid, true, &mut idx)) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let q_minus = greedy(lo, true, &mut chosen);
    if feasible(q_minus) {
        for &j in &chosen {
            out[j] = cap;
        }
        return Ok(());
    }
    let q_plus = greedy(hi, true, &mut idx);
    let theta = ((q - q_minus) / (q_plus - q_minus)).clamp(0.0, 1.0);
    for &j in &chosen {
        out[j] += (1.0 - theta) * cap;
    }
    for &j in &idx {
        out[j] += theta * cap;
    }
    Ok(())
}

/// Minimizes the next-request cost. The objective separates by row, so each
/// row is an independent small LP.
pub fn myopic_solve(inputs: &OptimInputs) -> Result<RecMatrix> {
    let k = inputs.size();
    let n = inputs.model().list_size();
    let x = inputs.cost().as_slice();
    let mut data = vec![0.0; k * k];
    data.par_chunks_mut(k)
        .enumerate()
        .try_for_each(|(i, row)| {
            solve_row_lp(x, inputs.similarity().row(i), n, i, inputs.quality()[i], row)
        })?;
    RecMatrix::validated(k, n, data, DEFAULT_FEASIBILITY_TOL)
}

/// Stationarity residual `c = pi - aY'pi - (1-a)(sum pi) p0`.
pub fn residual_c(pi: &[f64], y: &RecMatrix, m: &RequestModel) -> Vec<f64> {
    let a = m.follow_prob();
    let total: f64 = pi.iter().sum();
    let ytp = y.transpose_mul(pi);
    pi.iter()
        .zip(&ytp)
        .zip(m.p0())
        .map(|((p, t), p0)| p - a * t - (1.0 - a) * total * p0)
        .collect()
}

/// `pi'x + lambda'c + rho/2 |c|^2`.
pub fn augmented_lagrangian(
    pi: &[f64],
    y: &RecMatrix,
    lambda: &[f64],
    rho: f64,
    inputs: &OptimInputs,
) -> f64 {
    let c = residual_c(pi, y, inputs.model());
    dot(pi, inputs.cost().as_slice()) + dot(&c, lambda) + 0.5 * rho * dot(&c, &c)
}

/// Tolerance and iteration budget for the two alternating subproblems.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubproblemOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SubproblemOptions {
    fn default() -> Self {
        SubproblemOptions {
            tol: 1e-7,
            max_iter: 300,
        }
    }
}

/// Minimizes the augmented Lagrangian over the simplex with `Y` fixed.
pub fn cars_pi_step(
    y: &RecMatrix,
    lambda: &[f64],
    rho: f64,
    inputs: &OptimInputs,
    warm: Option<&[f64]>,
    opts: SubproblemOptions,
) -> Result<StationaryVector> {
    let m = inputs.model();
    let k = inputs.size();
    let a = m.follow_prob();
    let p0 = m.p0();
    // c = M pi with M = I - P'.
    let apply_m = move |v: &[f64], out: &mut [f64]| {
        let total: f64 = v.iter().sum();
        let ytv = y.transpose_mul(v);
        for j in 0..k {
            out[j] = v[j] - a * ytv[j] - (1.0 - a) * total * p0[j];
        }
    };
    let apply_mt = move |w: &[f64], out: &mut [f64]| {
        let pw = dot(p0, w);
        let yw = y.mul(w);
        for i in 0..k {
            out[i] = w[i] - a * yw[i] - (1.0 - a) * pw;
        }
    };
    let mut linear = vec![0.0; k];
    apply_mt(lambda, &mut linear);
    for (l, x) in linear.iter_mut().zip(inputs.cost().as_slice()) {
        *l += x;
    }
    let quadratic = if rho > 0.0 {
        Quadratic::Operator(Box::new(move |v: &[f64], out: &mut [f64]| {
            let mut mv = vec![0.0; k];
            apply_m(v, &mut mv);
            apply_mt(&mv, out);
            out.iter_mut().for_each(|o| *o *= rho);
        }))
    } else {
        Quadratic::Zero
    };
    let p = QpProblem::new(quadratic, linear, FeasibleSet::Simplex);
    let sol = solve_qp_with(
        &p,
        &QpOptions {
            tol: opts.tol,
            max_iter: opts.max_iter,
            warm_start: warm,
        },
        None,
    )?;
    if sol.status == QpStatus::Infeasible {
        return Err(Error::Qp("stationary subproblem reported infeasible".into()));
    }
    StationaryVector::new(sol.point)
}

/// Minimizes the augmented Lagrangian over the recommendation polytope with
/// `pi` fixed.
///
/// With `b = pi - (1-a)(sum pi) p0` and `t = b + lambda / rho` the objective
/// is `rho/2 |a Y'pi - t|^2` up to a constant, so the Hessian acts as
/// `(QV)_ij = rho a^2 pi_i (V'pi)_j`. Steps use the diagonal metric `pi_i` per
/// row, under which the operator norm is about `rho a^2`.
pub fn cars_y_step(
    pi: &[f64],
    lambda: &[f64],
    rho: f64,
    inputs: &OptimInputs,
    warm: Option<&RecMatrix>,
    opts: SubproblemOptions,
) -> Result<RecMatrix> {
    let m = inputs.model();
    let k = inputs.size();
    let n = m.list_size();
    let a = m.follow_prob();
    let total: f64 = pi.iter().sum();
    let b: Vec<f64> = pi
        .iter()
        .zip(m.p0())
        .map(|(p, p0)| p - (1.0 - a) * total * p0)
        .collect();
    let mut linear = vec![0.0; k * k];
    for i in 0..k {
        for j in 0..k {
            linear[i * k + j] = -a * pi[i] * (lambda[j] + rho * b[j]);
        }
    }
    let scale = rho * a * a;
    let quadratic = if scale > 0.0 {
        Quadratic::Operator(Box::new(move |v: &[f64], out: &mut [f64]| {
            let mut s = vec![0.0; k];
            for i in 0..k {
                let w = pi[i];
                if w != 0.0 {
                    for (sj, vij) in s.iter_mut().zip(&v[i * k..(i + 1) * k]) {
                        *sj += w * vij;
                    }
                }
            }
            for i in 0..k {
                let w = scale * pi[i];
                for (o, sj) in out[i * k..(i + 1) * k].iter_mut().zip(&s) {
                    *o = w * sj;
                }
            }
        }))
    } else {
        Quadratic::Zero
    };
    let pmax = pi.iter().fold(0.0f64, |acc, &p| acc.max(p));
    let floor = (1e-9 * pmax).max(1e-300);
    let mut metric = vec![0.0; k * k];
    for i in 0..k {
        metric[i * k..(i + 1) * k].fill(pi[i].max(floor));
    }
    let p = QpProblem::new(quadratic, linear, inputs.row_set()).with_metric(metric);
    let sol = solve_qp_with(
        &p,
        &QpOptions {
            tol: opts.tol,
            max_iter: opts.max_iter,
            warm_start: warm.map(RecMatrix::as_slice),
        },
        None,
    )?;
    if sol.status == QpStatus::Infeasible {
        return Err(Error::Qp("recommendation subproblem reported infeasible".into()));
    }
    RecMatrix::validated(k, n, sol.point, DEFAULT_FEASIBILITY_TOL)
}

/// Factor applied to `rho` in the multiplier update.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MultiplierStep {
    #[default]
    HalfRho,
    Rho,
}

impl MultiplierStep {
    pub fn factor(self) -> f64 {
        match self {
            MultiplierStep::HalfRho => 0.5,
            MultiplierStep::Rho => 1.0,
        }
    }
}

/// Starting recommendation matrix of a CARS run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Start {
    /// `1/N` on the `N` most similar contents of every row.
    TopSimilarity,
    /// The myopic solution.
    Myopic,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CarsConfig {
    /// Initial penalty; `None` picks `K/20`, which keeps the penalty on
    /// `|c|^2 ~ 1/K` comparable to the cost term.
    pub rho: Option<f64>,
    pub lambda0: Option<Vec<f64>>,
    /// Explicit starting matrix; replaces `starts`.
    #[serde(skip)]
    pub y0: Option<RecMatrix>,
    /// One run per start; the cheapest result is returned.
    pub starts: Vec<Start>,
    pub acc1: f64,
    pub acc2: f64,
    pub max_iter: usize,
    pub multiplier_step: MultiplierStep,
    /// Factor applied to `rho` after every iteration; 1 keeps it fixed.
    pub rho_growth: f64,
    pub rho_max: f64,
    pub subproblem: SubproblemOptions,
}

impl Default for CarsConfig {
    fn default() -> Self {
        CarsConfig {
            rho: None,
            lambda0: None,
            y0: None,
            starts: vec![Start::TopSimilarity, Start::Myopic],
            acc1: 1e-6,
            acc2: 1e-5,
            max_iter: 30,
            multiplier_step: MultiplierStep::HalfRho,
            rho_growth: 3.0,
            rho_max: 1e8,
            subproblem: SubproblemOptions::default(),
        }
    }
}

impl CarsConfig {
    /// Penalty used in the first iteration for a catalog of `k` items.
    pub fn initial_rho(&self, k: usize) -> f64 {
        self.rho.unwrap_or(k as f64 / 20.0)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(rho) = self.rho {
            if !(rho > 0.0 && rho.is_finite()) {
                return Err(Error::Invalid(format!("rho must be positive, got {rho}")));
            }
        }
        if !(self.acc1 > 0.0 && self.acc2 > 0.0) {
            return Err(Error::Invalid("acc1 and acc2 must be positive".into()));
        }
        if !(self.rho_growth >= 1.0 && self.rho_max > 0.0) {
            return Err(Error::Invalid("rho_growth must be >= 1 and rho_max positive".into()));
        }
        if self.max_iter == 0 {
            return Err(Error::Invalid("max_iter must be positive".into()));
        }
        if self.y0.is_none() && self.starts.is_empty() {
            return Err(Error::Invalid("at least one start is required".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct CarsResult {
    pub best_y: RecMatrix,
    pub best_cost: f64,
    pub best_index: usize,
    /// Entry 0 is the starting point, entry `i` the result of iteration `i`.
    pub cost_trace: Vec<f64>,
    pub virtual_trace: Vec<f64>,
    pub residual_trace: Vec<f64>,
    pub lambda_norm_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub error: Option<String>,
    /// Start of the returned run; `None` for an explicit `y0`.
    pub start: Option<Start>,
}

impl CarsResult {
    /// Writes `iter,actual_cost,virtual_cost,residual_sq,lambda_norm` rows.
    pub fn write_trace_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["iter", "actual_cost", "virtual_cost", "residual_sq", "lambda_norm"])?;
        for i in 0..self.cost_trace.len() {
            wtr.write_record([
                i.to_string(),
                format!("{:.12e}", self.cost_trace[i]),
                format!("{:.12e}", self.virtual_trace[i]),
                format!("{:.12e}", self.residual_trace[i]),
                format!("{:.12e}", self.lambda_norm_trace[i]),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Index of the smallest cost; ties go to the earliest.
pub fn select_best(trace: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &c) in trace.iter().enumerate() {
        if best.is_none_or(|b| c < trace[b]) {
            best = Some(i);
        }
    }
    best
}

/// Alternates the two subproblems with a multiplier update until the
/// residual and the cost change are both small, and returns the cheapest
/// recommendation matrix seen. With several starts each is run and the
/// cheapest run is returned (ties to the earlier start).
pub fn cars_solve(inputs: &OptimInputs, cfg: &CarsConfig) -> Result<CarsResult> {
    cfg.validate()?;
    let m = inputs.model();
    let k = inputs.size();
    if let Some(y0) = &cfg.y0 {
        if y0.size() != k || y0.list_size() != m.list_size() {
            return Err(Error::DimensionMismatch {
                what: "initial recommendation matrix",
                expected: k,
                got: y0.size(),
            });
        }
        return cars_run(inputs, cfg, y0.clone(), None);
    }
    let mut best: Option<CarsResult> = None;
    for &start in &cfg.starts {
        let y0 = match start {
            Start::TopSimilarity => RecMatrix::top_similarity(inputs.similarity(), m.list_size())?,
            Start::Myopic => myopic_solve(inputs)?,
        };
        let r = cars_run(inputs, cfg, y0, Some(start))?;
        if best.as_ref().is_none_or(|b| r.best_cost < b.best_cost) {
            best = Some(r);
        }
    }
    Ok(best.expect("validated nonempty starts"))
}

fn cars_run(inputs: &OptimInputs, cfg: &CarsConfig, y0: RecMatrix, start: Option<Start>) -> Result<CarsResult> {
    let m = inputs.model();
    let k = inputs.size();
    let x = inputs.cost();
    let mut y = y0;
    let mut lambda = match &cfg.lambda0 {
        Some(l) if l.len() == k => l.clone(),
        Some(l) => {
            return Err(Error::DimensionMismatch {
                what: "initial multipliers",
                expected: k,
                got: l.len(),
            })
        }
        None => vec![0.0; k],
    };
    let pi0 = stationary_direct(&y, m)?;
    let cost0 = expected_cost(&pi0, x)?;
    let c0 = residual_c(pi0.as_slice(), &y, m);
    let mut result = CarsResult {
        best_y: y.clone(),
        best_cost: cost0,
        best_index: 0,
        cost_trace: vec![cost0],
        virtual_trace: vec![dot(pi0.as_slice(), x.as_slice())],
        residual_trace: vec![dot(&c0, &c0)],
        lambda_norm_trace: vec![dot(&lambda, &lambda).sqrt()],
        iterations: 0,
        converged: false,
        error: None,
        start,
    };
    let mut pi = pi0.into_vec();
    let mut rho = cfg.initial_rho(k).min(cfg.rho_max);
    for iter in 1..=cfg.max_iter {
        let outcome = (|| -> Result<(Vec<f64>, RecMatrix, f64)> {
            let new_pi = cars_pi_step(&y, &lambda, rho, inputs, Some(&pi), cfg.subproblem)?;
            let new_y = cars_y_step(
                new_pi.as_slice(),
                &lambda,
                rho,
                inputs,
                Some(&y),
                cfg.subproblem,
            )?;
            let cost = expected_cost(&stationary_direct(&new_y, m)?, x)?;
            Ok((new_pi.into_vec(), new_y, cost))
        })();
        let (new_pi, new_y, cost) = match outcome {
            Ok(v) => v,
            Err(e) => {
                log::warn!("iteration {iter} failed: {e}");
                result.error = Some(e.to_string());
                break;
            }
        };
        pi = new_pi;
        y = new_y;
        let c = residual_c(&pi, &y, m);
        let step = cfg.multiplier_step.factor() * rho;
        for (l, ci) in lambda.iter_mut().zip(&c) {
            *l += step * ci;
        }
        let eps1 = dot(&c, &c);
        rho = (rho * cfg.rho_growth).min(cfg.rho_max);
        let prev = *result.cost_trace.last().expect("nonempty trace");
        let eps2 = (cost - prev).abs();
        result.cost_trace.push(cost);
        result.virtual_trace.push(dot(&pi, x.as_slice()));
        result.residual_trace.push(eps1);
        result.lambda_norm_trace.push(dot(&lambda, &lambda).sqrt());
        result.iterations = iter;
        if cost < result.best_cost {
            result.best_cost = cost;
            result.best_index = iter;
            result.best_y = y.clone();
        }
        log::debug!("iter {iter}: cost {cost:.6} residual {eps1:.3e}");
        if eps1 <= cfg.acc1 && eps2 <= cfg.acc2 {
            result.converged = true;
            break;
        }
    }
    Ok(result)
}
