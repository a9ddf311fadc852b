//! Monte-Carlo sessions over the request model.
//!
//! A session starts with a direct request. Each later request follows the
//! recommendations with probability `a`: a list of exactly `N` distinct
//! contents is drawn from the current row of `Y` by systematic sampling, so
//! that `j` appears with probability `N * y_ij`, and one entry of the list is
//! picked uniformly. Otherwise the request is drawn from `p0`.

use std::io::Write;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{PopularityVector, RecMatrix, RequestModel, SimilarityMatrix};

const MARGINAL_TOL: f64 = 1e-6;

/// The `C` contents held in the local cache.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CachePlacement {
    cached: Vec<usize>,
    mask: Vec<bool>,
}

impl CachePlacement {
    pub fn new(k: usize, mut cached: Vec<usize>) -> Result<Self> {
        cached.sort_unstable();
        cached.dedup();
        let mut mask = vec![false; k];
        for &c in &cached {
            if c >= k {
                return Err(Error::Invalid(format!("cached content {c} outside catalog of {k}")));
            }
            mask[c] = true;
        }
        Ok(Self { cached, mask })
    }

    pub fn capacity(&self) -> usize {
        self.cached.len()
    }

    /// Cached content indices in increasing order.
    pub fn cached(&self) -> &[usize] {
        &self.cached
    }

    #[inline]
    pub fn contains(&self, j: usize) -> bool {
        self.mask[j]
    }

    /// `sum_{j cached} p_j`.
    pub fn hit_mass(&self, p: &[f64]) -> f64 {
        self.cached.iter().map(|&j| p[j]).sum()
    }
}

/// Caches the `C` most popular contents, ties towards the lower index.
pub fn top_c_cache(p0: &PopularityVector, c: usize) -> Result<CachePlacement> {
    let k = p0.len();
    if c > k {
        return Err(Error::Invalid(format!("cache capacity {c} exceeds catalog size {k}")));
    }
    let p = p0.as_slice();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
    order.truncate(c);
    CachePlacement::new(k, order)
}

/// Nonzero inclusion probabilities `min(N * y_j, 1)` of one row.
#[derive(Clone, Debug)]
pub struct RowSampler {
    items: Vec<usize>,
    probs: Vec<f64>,
    total: f64,
    n: usize,
}

impl RowSampler {
    pub fn new(y_row: &[f64], n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::InfeasibleMarginals("list size must be >= 1".into()));
        }
        let mut items = Vec::new();
        let mut probs = Vec::new();
        for (j, &y) in y_row.iter().enumerate() {
            if !y.is_finite() || y < -MARGINAL_TOL {
                return Err(Error::InfeasibleMarginals(format!("entry {j} is {y}")));
            }
            let p = (n as f64 * y).min(1.0);
            if p > 0.0 {
                items.push(j);
                probs.push(p);
            }
        }
        let total: f64 = probs.iter().sum();
        if total < n as f64 - MARGINAL_TOL || items.len() < n {
            return Err(Error::InfeasibleMarginals(format!(
                "inclusion probabilities sum to {total} over {} contents, need {n}",
                items.len()
            )));
        }
        Ok(Self { items, probs, total, n })
    }

    pub fn list_size(&self) -> usize {
        self.n
    }

    /// Systematic sampling with a uniform random start: the points
    /// `(u + m) * T / N`, `m = 0..N`, select the contents whose cumulative
    /// probability interval contains them.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut Vec<usize>) {
        out.clear();
        let step = self.total / self.n as f64;
        let start: f64 = rng.random::<f64>();
        let mut m = 0;
        let mut acc = 0.0;
        for (idx, (&j, &p)) in self.items.iter().zip(&self.probs).enumerate() {
            acc += p;
            let last = idx + 1 == self.items.len();
            while m < self.n && ((start + m as f64) * step < acc || last) {
                if out.last() != Some(&j) {
                    out.push(j);
                }
                m += 1;
            }
        }
        if out.len() < self.n {
            // Rounding put two points into one interval; complete the list
            // with the next unused contents.
            for &j in &self.items {
                if out.len() == self.n {
                    break;
                }
                if !out.contains(&j) {
                    out.push(j);
                }
            }
        }
    }
}

/// Draws `N` distinct contents whose inclusion probabilities are `N * y_j`.
pub fn sample_rec_list<R: Rng + ?Sized>(y_row: &[f64], n: usize, rng: &mut R) -> Result<Vec<usize>> {
    let s = RowSampler::new(y_row, n)?;
    let mut out = Vec::with_capacity(n);
    s.sample(rng, &mut out);
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionLength {
    Fixed(usize),
    /// Geometric on `1, 2, ...` with the given mean.
    Geometric(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SessionConfig {
    pub total_requests: usize,
    pub session_length: SessionLength,
    pub seed: u64,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            total_requests: 40_000,
            session_length: SessionLength::Fixed(200),
            seed: 1,
        }
    }
}

impl SessionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.total_requests == 0 {
            return Err(Error::Invalid("total_requests must be >= 1".into()));
        }
        match self.session_length {
            SessionLength::Fixed(0) => Err(Error::Invalid("fixed session length must be >= 1".into())),
            SessionLength::Geometric(m) if !(m >= 1.0 && m.is_finite()) => {
                Err(Error::Invalid(format!("geometric session mean must be >= 1, got {m}")))
            }
            _ => Ok(()),
        }
    }
}

/// Counters of one or more simulation runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimMetrics {
    pub requests: u64,
    pub hits: u64,
    pub sessions: u64,
    pub followed: u64,
    pub quality_sum: f64,
    pub per_content_counts: Vec<u64>,
}

impl SimMetrics {
    pub fn new(k: usize) -> Self {
        Self {
            requests: 0,
            hits: 0,
            sessions: 0,
            followed: 0,
            quality_sum: 0.0,
            per_content_counts: vec![0; k],
        }
    }

    pub fn empirical_chr(&self) -> f64 {
        if self.requests == 0 {
            0.0
        } else {
            self.hits as f64 / self.requests as f64
        }
    }

    /// Mean `u_ij` over requests that followed a recommendation.
    pub fn mean_quality_served(&self) -> f64 {
        if self.followed == 0 {
            0.0
        } else {
            self.quality_sum / self.followed as f64
        }
    }

    pub fn merge(&mut self, other: &SimMetrics) -> Result<()> {
        if other.per_content_counts.len() != self.per_content_counts.len() {
            return Err(Error::DimensionMismatch {
                what: "content counts",
                expected: self.per_content_counts.len(),
                got: other.per_content_counts.len(),
            });
        }
        self.requests += other.requests;
        self.hits += other.hits;
        self.sessions += other.sessions;
        self.followed += other.followed;
        self.quality_sum += other.quality_sum;
        for (a, b) in self.per_content_counts.iter_mut().zip(&other.per_content_counts) {
            *a += b;
        }
        Ok(())
    }
}

/// Binomial standard deviation of a hit ratio `p` estimated from `n` draws.
pub fn binomial_sigma(p: f64, n: u64) -> f64 {
    (p * (1.0 - p) / n as f64).sqrt()
}

#[derive(Serialize)]
struct LogRow {
    step: u64,
    session: u64,
    content: usize,
    followed_rec: u8,
    hit: u8,
}

pub fn simulate(
    y: &RecMatrix,
    m: &RequestModel,
    cache: &CachePlacement,
    u: &SimilarityMatrix,
    cfg: &SessionConfig,
) -> Result<SimMetrics> {
    simulate_logged(y, m, cache, u, cfg, None::<&mut std::io::Sink>)
}

/// [`simulate`] that also writes every request as a CSV row
/// `step,session,content,followed_rec,hit`.
pub fn simulate_logged<W: Write>(
    y: &RecMatrix,
    m: &RequestModel,
    cache: &CachePlacement,
    u: &SimilarityMatrix,
    cfg: &SessionConfig,
    log: Option<W>,
) -> Result<SimMetrics> {
    cfg.validate()?;
    let k = m.size();
    for (what, got) in [
        ("recommendation matrix", y.size()),
        ("similarity matrix", u.size()),
        ("cache mask", cache.mask.len()),
    ] {
        if got != k {
            return Err(Error::DimensionMismatch { what, expected: k, got });
        }
    }
    if y.list_size() != m.list_size() {
        return Err(Error::DimensionMismatch {
            what: "list size",
            expected: m.list_size(),
            got: y.list_size(),
        });
    }
    let a = m.follow_prob();
    let n = m.list_size();
    let samplers: Vec<Option<RowSampler>> = if a > 0.0 {
        (0..k).map(|i| RowSampler::new(y.row(i), n).map(Some)).collect::<Result<_>>()?
    } else {
        vec![None; k]
    };
    let direct = WeightedIndex::new(m.p0()).map_err(|e| Error::Invalid(format!("popularity: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut writer = log.map(csv::Writer::from_writer);
    let mut metrics = SimMetrics::new(k);
    let mut list = Vec::with_capacity(n);
    let mut remaining = cfg.total_requests as u64;
    while remaining > 0 {
        let len = match cfg.session_length {
            SessionLength::Fixed(l) => l as u64,
            SessionLength::Geometric(mean) => {
                let p = 1.0 / mean;
                let mut l = 1;
                while rng.random::<f64>() >= p {
                    l += 1;
                }
                l
            }
        };
        let len = len.min(remaining);
        let session = metrics.sessions;
        metrics.sessions += 1;
        let mut current = direct.sample(&mut rng);
        for step in 0..len {
            let mut followed = false;
            if step > 0 {
                if a > 0.0 && rng.random::<f64>() < a {
                    let sampler = samplers[current].as_ref().expect("sampler built when a > 0");
                    sampler.sample(&mut rng, &mut list);
                    let next = list[rng.random_range(0..n)];
                    metrics.followed += 1;
                    metrics.quality_sum += u.get(current, next);
                    current = next;
                    followed = true;
                } else {
                    current = direct.sample(&mut rng);
                }
            }
            let hit = cache.contains(current);
            metrics.requests += 1;
            metrics.hits += hit as u64;
            metrics.per_content_counts[current] += 1;
            if let Some(w) = writer.as_mut() {
                w.serialize(LogRow {
                    step: metrics.requests - 1,
                    session,
                    content: current,
                    followed_rec: followed as u8,
                    hit: hit as u8,
                })?;
            }
        }
        remaining -= len;
    }
    if let Some(mut w) = writer {
        w.flush()?;
    }
    Ok(metrics)
}

/// Request counts normalized into a distribution.
pub fn empirical_content_distribution(metrics: &SimMetrics) -> Result<PopularityVector> {
    if metrics.requests == 0 {
        return Err(Error::Invalid("no requests were simulated".into()));
    }
    PopularityVector::from_weights(metrics.per_content_counts.iter().map(|&c| c as f64).collect())
}
