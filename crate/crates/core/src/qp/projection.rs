//! Euclidean projections onto the simplex and onto recommendation-row polytopes.

use crate::error::{Error, Result};

/// Projection onto the probability simplex by sorting and thresholding.
pub fn project_simplex(v: &[f64]) -> Vec<f64> {
    let mut sorted = v.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut tau = 0.0;
    for (i, &s) in sorted.iter().enumerate() {
        cumsum += s;
        let t = (cumsum - 1.0) / (i + 1) as f64;
        if s - t > 0.0 {
            tau = t;
        }
    }
    v.iter().map(|&x| (x - tau).max(0.0)).collect()
}

/// Threshold `tau` such that `sum_j clamp(v_j - tau, 0, cap) = total`.
///
/// The sum is piecewise linear and nonincreasing in `tau`; Newton steps are
/// taken inside a shrinking bracket and replaced by bisection when they leave
/// it. Requires `0 <= total <= v.len() * cap`.
pub(crate) fn capped_threshold(v: &[f64], cap: f64, total: f64) -> f64 {
    let (mut lo, mut hi) = v
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
    if v.is_empty() {
        return 0.0;
    }
    if total <= 0.0 {
        return hi;
    }
    lo -= cap;
    let scale = hi.abs().max(lo.abs()).max(cap);
    let target_tol = 1e-15 * total.max(1.0);
    let mut tau = 0.5 * (lo + hi);
    for _ in 0..200 {
        let mut sum = 0.0;
        let mut active = 0usize;
        for &x in v {
            let d = x - tau;
            if d >= cap {
                sum += cap;
            } else if d > 0.0 {
                sum += d;
                active += 1;
            }
        }
        let f = sum - total;
        if f.abs() <= target_tol {
            break;
        }
        if f > 0.0 {
            lo = tau;
        } else {
            hi = tau;
        }
        if hi - lo <= 4.0 * f64::EPSILON * scale {
            break;
        }
        let newton = if active > 0 { tau + f / active as f64 } else { f64::NAN };
        tau = if newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
    }
    tau
}

/// Projects `v` restricted to the indices accepted by `keep` onto
/// `{y : 0 <= y <= cap, sum y = total}`; all other entries of `out` are
/// left untouched.
fn project_capped_subset(
    v: &[f64],
    cap: f64,
    total: f64,
    keep: impl Fn(usize) -> bool,
    out: &mut [f64],
    scratch: &mut Vec<f64>,
) {
    scratch.clear();
    scratch.extend(v.iter().enumerate().filter(|&(j, _)| keep(j)).map(|(_, &x)| x));
    let tau = capped_threshold(scratch, cap, total);
    let mut sum = 0.0;
    let mut free = 0usize;
    for (j, (o, &x)) in out.iter_mut().zip(v).enumerate() {
        if keep(j) {
            *o = (x - tau).clamp(0.0, cap);
            sum += *o;
            if *o > 0.0 && *o < cap {
                free += 1;
            }
        }
    }
    // Spread the rounding drift of the sum over the interior entries.
    let drift = total - sum;
    if free > 0 && drift != 0.0 {
        let share = drift / free as f64;
        for (j, o) in out.iter_mut().enumerate() {
            if keep(j) && *o > 0.0 && *o < cap {
                *o = (*o + share).clamp(0.0, cap);
            }
        }
    }
}

/// Feasible set of one recommendation row: entries in `[0, cap]`, summing to
/// one, optionally a forced zero at `self_idx`, and optionally a quality floor
/// `scores . y >= threshold`.
#[derive(Clone, Copy, Debug)]
pub struct RowSet<'a> {
    pub cap: f64,
    pub self_idx: Option<usize>,
    pub quality: Option<(&'a [f64], f64)>,
}

impl RowSet<'_> {
    fn admissible(&self, len: usize) -> usize {
        len - usize::from(self.self_idx.is_some_and(|s| s < len))
    }

    /// Checks that the set is nonempty for rows of length `len`.
    pub fn check(&self, len: usize, row: usize) -> Result<()> {
        let available = self.admissible(len);
        if (available as f64) * self.cap < 1.0 - 1e-12 {
            return Err(Error::EmptyRowPolytope {
                available,
                cap: self.cap,
            });
        }
        if let Some((scores, q)) = self.quality {
            let best = max_quality(scores, self.cap, self.self_idx);
            if best < q - 1e-12 {
                return Err(Error::InfeasibleRow {
                    row,
                    max_quality: best,
                    required: q,
                });
            }
        }
        Ok(())
    }

    /// Euclidean projection of `v` onto this row set, written to `out`.
    ///
    /// The caller must have validated the set with [`RowSet::check`].
    pub fn project(&self, v: &[f64], out: &mut [f64], scratch: &mut Vec<f64>) {
        let self_idx = self.self_idx;
        let not_self = |j: usize| Some(j) != self_idx;
        if let Some(s) = self_idx {
            out[s] = 0.0;
        }
        project_capped_subset(v, self.cap, 1.0, not_self, out, scratch);
        let Some((scores, q)) = self.quality else {
            return;
        };
        if dot_masked(scores, out, self_idx) >= q - 1e-12 {
            return;
        }
        let binary = scores
            .iter()
            .enumerate()
            .all(|(j, &u)| !not_self(j) || u == 0.0 || u == 1.0);
        if binary {
            // The quality face decouples into related / unrelated blocks with
            // their own sums.
            let unrelated = scores
                .iter()
                .enumerate()
                .filter(|&(j, &u)| not_self(j) && u == 0.0)
                .count();
            let total_unrelated = (1.0 - q).min(unrelated as f64 * self.cap).max(0.0);
            let total_related = 1.0 - total_unrelated;
            project_capped_subset(
                v,
                self.cap,
                total_related,
                |j| not_self(j) && scores[j] == 1.0,
                out,
                scratch,
            );
            project_capped_subset(
                v,
                self.cap,
                total_unrelated,
                |j| not_self(j) && scores[j] == 0.0,
                out,
                scratch,
            );
            return;
        }
        self.project_general_quality(v, scores, q, out, scratch);
    }

    /// Finds the quality multiplier `mu >= 0` with
    /// `scores . proj(v + mu * scores) = q`.
    fn project_general_quality(
        &self,
        v: &[f64],
        scores: &[f64],
        q: f64,
        out: &mut [f64],
        scratch: &mut Vec<f64>,
    ) {
        let self_idx = self.self_idx;
        let not_self = |j: usize| Some(j) != self_idx;
        let mut shifted = vec![0.0; v.len()];
        let mut eval = |mu: f64, out: &mut [f64], scratch: &mut Vec<f64>| {
            for ((s, &x), &u) in shifted.iter_mut().zip(v).zip(scores) {
                *s = x + mu * u;
            }
            project_capped_subset(&shifted, self.cap, 1.0, not_self, out, scratch);
            dot_masked(scores, out, self_idx) - q
        };
        let (mut lo, mut g_lo) = (0.0, eval(0.0, out, scratch));
        let mut hi = 1.0;
        let mut g_hi = eval(hi, out, scratch);
        let mut doublings = 0;
        while g_hi < 0.0 && doublings < 1100 {
            lo = hi;
            g_lo = g_hi;
            hi *= 2.0;
            g_hi = eval(hi, out, scratch);
            doublings += 1;
        }
        if g_hi < 0.0 {
            return;
        }
        // Illinois false position on the nondecreasing piecewise-linear g.
        let mut side = 0i8;
        let mut mu = hi;
        for _ in 0..200 {
            mu = if g_hi > g_lo {
                hi - g_hi * (hi - lo) / (g_hi - g_lo)
            } else {
                0.5 * (lo + hi)
            };
            if !(mu > lo && mu < hi) {
                mu = 0.5 * (lo + hi);
            }
            let g = eval(mu, out, scratch);
            if g.abs() <= 1e-14 || hi - lo <= 4.0 * f64::EPSILON * hi {
                break;
            }
            if g < 0.0 {
                lo = mu;
                g_lo = g;
                if side == -1 {
                    g_hi *= 0.5;
                }
                side = -1;
            } else {
                hi = mu;
                g_hi = g;
                if side == 1 {
                    g_lo *= 0.5;
                }
                side = 1;
            }
        }
        let g = eval(mu, out, scratch);
        if g < -1e-12 {
            // Land on the feasible side of the bracket.
            eval(hi, out, scratch);
        }
    }
}

fn dot_masked(a: &[f64], b: &[f64], skip: Option<usize>) -> f64 {
    a.iter()
        .zip(b)
        .enumerate()
        .filter(|&(j, _)| Some(j) != skip)
        .map(|(_, (x, y))| x * y)
        .sum()
}

/// Largest `scores . y` over `{0 <= y <= cap, sum y = 1, y[self] = 0}`.
pub fn max_quality(scores: &[f64], cap: f64, self_idx: Option<usize>) -> f64 {
    let mut s: Vec<f64> = scores
        .iter()
        .enumerate()
        .filter(|&(j, _)| Some(j) != self_idx)
        .map(|(_, &u)| u)
        .collect();
    s.sort_by(|a, b| b.total_cmp(a));
    let mut left: f64 = 1.0;
    let mut best = 0.0;
    for u in s {
        if left <= 0.0 {
            break;
        }
        let take = left.min(cap);
        best += take * u;
        left -= take;
    }
    best
}

/// Projection onto `{y : sum y = 1, 0 <= y <= 1/N, y[self_idx] = 0}`.
pub fn project_row_polytope(v: &[f64], list_size: usize, self_idx: usize) -> Result<Vec<f64>> {
    if list_size == 0 {
        return Err(Error::Invalid("list size must be >= 1".into()));
    }
    let set = RowSet {
        cap: 1.0 / list_size as f64,
        self_idx: Some(self_idx),
        quality: None,
    };
    set.check(v.len(), 0)?;
    let mut out = vec![0.0; v.len()];
    set.project(v, &mut out, &mut Vec::new());
    Ok(out)
}
