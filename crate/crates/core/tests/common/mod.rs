//! Independent brute-force oracles shared by the integration tests.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};

/// Linear constraint `a . v (= or >=) b` in dense form.
#[derive(Clone, Debug)]
pub struct Row {
    pub a: Vec<f64>,
    pub b: f64,
}

pub fn objective(q: &DMatrix<f64>, c: &[f64], v: &[f64]) -> f64 {
    let n = c.len();
    let mut val = 0.0;
    for i in 0..n {
        val += c[i] * v[i];
        for j in 0..n {
            val += 0.5 * v[i] * q[(i, j)] * v[j];
        }
    }
    val
}

/// Minimizes `1/2 v'Qv + c'v` subject to `eq` and `ineq` by enumerating every
/// subset of active inequalities and solving the KKT system of each. For a
/// convex problem the best feasible candidate is a global optimum.
pub fn brute_force_qp(q: &DMatrix<f64>, c: &[f64], eq: &[Row], ineq: &[Row]) -> Option<(Vec<f64>, f64)> {
    let n = c.len();
    let m = ineq.len();
    assert!(m < 24, "too many inequalities for enumeration");
    let mut best: Option<(Vec<f64>, f64)> = None;
    for mask in 0u32..(1 << m) {
        let active: Vec<&Row> = eq
            .iter()
            .chain((0..m).filter(|k| mask & (1 << k) != 0).map(|k| &ineq[k]))
            .collect();
        let r = active.len();
        if r > n {
            continue;
        }
        let dim = n + r;
        let mut kkt = DMatrix::zeros(dim, dim);
        let mut rhs = DVector::zeros(dim);
        for i in 0..n {
            for j in 0..n {
                kkt[(i, j)] = q[(i, j)];
            }
            rhs[i] = -c[i];
        }
        for (k, row) in active.iter().enumerate() {
            for j in 0..n {
                kkt[(n + k, j)] = row.a[j];
                kkt[(j, n + k)] = row.a[j];
            }
            rhs[n + k] = row.b;
        }
        let lu = kkt.lu();
        let Some(sol) = lu.solve(&rhs) else { continue };
        if sol.iter().any(|v| !v.is_finite()) {
            continue;
        }
        let v: Vec<f64> = sol.iter().take(n).copied().collect();
        let dot = |row: &Row| row.a.iter().zip(&v).map(|(a, x)| a * x).sum::<f64>();
        if eq.iter().any(|row| (dot(row) - row.b).abs() > 1e-9) {
            continue;
        }
        if ineq.iter().any(|row| dot(row) < row.b - 1e-9) {
            continue;
        }
        let val = objective(q, c, &v);
        if best.as_ref().is_none_or(|(_, b)| val < *b - 1e-13) {
            best = Some((v, val));
        }
    }
    best
}

/// Bound rows `lo <= v_j <= hi` for every coordinate.
pub fn box_rows(lower: &[f64], upper: &[f64]) -> Vec<Row> {
    let n = lower.len();
    let mut rows = Vec::new();
    for j in 0..n {
        let mut a = vec![0.0; n];
        a[j] = 1.0;
        rows.push(Row { a: a.clone(), b: lower[j] });
        a[j] = -1.0;
        rows.push(Row { a, b: -upper[j] });
    }
    rows
}

/// Exact stationary distribution by dense Gaussian elimination of
/// `pi' (I - aY) = (1-a) p0'`, written independently of the library.
pub fn stationary_oracle(y: &[f64], k: usize, a: f64, p0: &[f64]) -> Vec<f64> {
    let m = DMatrix::from_fn(k, k, |r, c| f64::from(u8::from(r == c)) - a * y[c * k + r]);
    let rhs = DVector::from_iterator(k, p0.iter().map(|p| (1.0 - a) * p));
    let sol = m.full_piv_lu().solve(&rhs).expect("nonsingular");
    let s: f64 = sol.iter().sum();
    sol.iter().map(|v| v / s).collect()
}

/// Minimum of `pi' x` over all deterministic recommendation matrices with
/// `N = 1` (every row points at one other item `j` with `u_ij >= q`), by
/// exhaustive enumeration. `u` is row-major `k x k`.
pub fn best_deterministic_cost(k: usize, a: f64, p0: &[f64], x: &[f64], u: &[f64], q: f64) -> f64 {
    let choices = (k - 1).pow(k as u32);
    let mut best = f64::INFINITY;
    'codes: for code in 0..choices {
        let mut y = vec![0.0; k * k];
        let mut c = code;
        for i in 0..k {
            let pick = c % (k - 1);
            c /= k - 1;
            let j = if pick >= i { pick + 1 } else { pick };
            if u[i * k + j] < q {
                continue 'codes;
            }
            y[i * k + j] = 1.0;
        }
        let pi = stationary_oracle(&y, k, a, p0);
        let cost: f64 = pi.iter().zip(x).map(|(p, x)| p * x).sum();
        best = best.min(cost);
    }
    best
}

/// Minimum of `x . y` over one recommendation row polytope
/// `{0 <= y <= 1/N, sum y = 1, y_self = 0, u . y >= q}` via the KKT
/// enumeration above with `Q = 0`.
pub fn row_lp_oracle(x: &[f64], u: &[f64], n: usize, self_idx: usize, q: f64) -> (Vec<f64>, f64) {
    let k = x.len();
    let cap = 1.0 / n as f64;
    let mut upper = vec![cap; k];
    upper[self_idx] = 0.0;
    let ineq = {
        let mut rows = box_rows(&vec![0.0; k], &upper);
        rows.push(Row { a: u.to_vec(), b: q });
        rows
    };
    let eq = vec![Row { a: vec![1.0; k], b: 1.0 }];
    brute_force_qp(&DMatrix::zeros(k, k), x, &eq, &ineq).expect("feasible row")
}
