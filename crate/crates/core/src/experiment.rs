//! Parameter sweeps over datasets and policies, with CSV output.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{self, PreparedDataset, SyntheticSimilaritySpec};
use crate::error::{Error, Result};
use crate::model::{
    cache_hit_ratio, finite_horizon_cost, quality_of, validate_rec_matrix, CostVector, RecMatrix, RequestModel, SimilarityMatrix,
};
use crate::optim::{cars_solve, myopic_solve, CarsConfig, CarsResult, OptimInputs};
use crate::sim::{simulate, top_c_cache, CachePlacement, SessionConfig, SessionLength};

pub const SCHEMA_VERSION: u32 = 1;
pub const RESULTS_FILE: &str = "results.csv";
pub const TIMINGS_FILE: &str = "timings.csv";
pub const TRACE_FILE: &str = "trace.csv";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Policy {
    NoRec,
    Myopic,
    Cars,
}

impl Policy {
    pub const ALL: [Policy; 3] = [Policy::NoRec, Policy::Myopic, Policy::Cars];

    pub fn name(self) -> &'static str {
        match self {
            Policy::NoRec => "norec",
            Policy::Myopic => "myopic",
            Policy::Cars => "cars",
        }
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Policy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "norec" => Ok(Policy::NoRec),
            "myopic" => Ok(Policy::Myopic),
            "cars" => Ok(Policy::Cars),
            other => Err(Error::Invalid(format!("unknown policy {other:?}"))),
        }
    }
}

/// Synthetic relatedness; `min_related` defaults to `N + 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSource {
    pub k: usize,
    pub mean_related: f64,
    pub seed: u64,
    #[serde(default)]
    pub min_related: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MovieLensSource {
    pub path: PathBuf,
    #[serde(default = "default_movielens_theta")]
    pub theta: f64,
    #[serde(default = "default_neighbors")]
    pub neighbors: usize,
}

fn default_movielens_theta() -> f64 {
    dataset::DEFAULT_MOVIELENS_THRESHOLD
}

fn default_neighbors() -> usize {
    dataset::DEFAULT_NEIGHBORS
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LastFmSource {
    pub path: PathBuf,
    #[serde(default)]
    pub theta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreparedSource {
    pub dir: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetSource {
    Synthetic(SyntheticSource),
    MovieLens(MovieLensSource),
    LastFm(LastFmSource),
    /// Output directory of `prep-dataset`.
    Prepared(PreparedSource),
}

impl DatasetSource {
    pub fn label(&self) -> &'static str {
        match self {
            DatasetSource::Synthetic(_) => "synthetic",
            DatasetSource::MovieLens(_) => "movielens",
            DatasetSource::LastFm(_) => "lastfm",
            DatasetSource::Prepared(_) => "prepared",
        }
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        match self {
            DatasetSource::Synthetic(_) => {}
            DatasetSource::MovieLens(s) => fix(&mut s.path),
            DatasetSource::LastFm(s) => fix(&mut s.path),
            DatasetSource::Prepared(s) => fix(&mut s.dir),
        }
    }

    /// Relatedness for list size `n`; synthetic graphs shift their seed by
    /// `replicate`.
    pub fn build(&self, n: usize, replicate: u64) -> Result<SimilarityMatrix> {
        match self {
            DatasetSource::Synthetic(s) => {
                let spec = SyntheticSimilaritySpec {
                    k: s.k,
                    mean_related: s.mean_related,
                    seed: s.seed.wrapping_add(replicate),
                };
                dataset::synthetic_similarity(&spec, s.min_related.unwrap_or(n + 1))
            }
            DatasetSource::MovieLens(s) => Ok(dataset::prepare_movielens(&s.path, s.theta, n, s.neighbors)?.similarity),
            DatasetSource::LastFm(s) => Ok(dataset::prepare_lastfm(&s.path, s.theta, n)?.similarity),
            DatasetSource::Prepared(s) => {
                let d = PreparedDataset::load(&s.dir)?;
                if d.provenance.list_size != n {
                    log::warn!(
                        "prepared dataset was pruned for N = {}, used with N = {n}",
                        d.provenance.list_size
                    );
                }
                Ok(d.similarity)
            }
        }
    }
}

/// Swept parameters; the grid is their Cartesian product.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Sweep {
    pub q: Vec<f64>,
    pub cache_fraction: Vec<f64>,
    pub follow_prob: Vec<f64>,
    pub list_size: Vec<usize>,
    pub zipf_s: Vec<f64>,
    /// Session lengths to simulate; empty uses the session config.
    pub session_length: Vec<SessionLength>,
}

impl Default for Sweep {
    fn default() -> Self {
        Self {
            q: vec![0.8],
            cache_fraction: vec![0.05],
            follow_prob: vec![0.8],
            list_size: vec![4],
            zipf_s: vec![0.8],
            session_length: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default)]
    pub name: String,
    pub dataset: DatasetSource,
    #[serde(default)]
    pub sweep: Sweep,
    #[serde(default = "all_policies")]
    pub policies: Vec<Policy>,
    #[serde(default)]
    pub cars: CarsConfig,
    #[serde(default)]
    pub session: SessionConfig,
    /// Independent repetitions; replicate `r` shifts the synthetic seed and
    /// the session seed by `r`.
    #[serde(default = "one")]
    pub replicates: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

fn all_policies() -> Vec<Policy> {
    Policy::ALL.to_vec()
}

fn one() -> u64 {
    1
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("results")
}

impl ScenarioConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a JSON config; relative dataset and output paths are taken
    /// relative to the config file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_json(&text)?;
        if let Some(base) = path.parent() {
            cfg.dataset.resolve_paths(base);
            if cfg.output_dir.is_relative() {
                cfg.output_dir = base.join(&cfg.output_dir);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.sweep;
        let nonempty = [
            ("q", s.q.len()),
            ("cache_fraction", s.cache_fraction.len()),
            ("follow_prob", s.follow_prob.len()),
            ("list_size", s.list_size.len()),
            ("zipf_s", s.zipf_s.len()),
            ("policies", self.policies.len()),
        ];
        for (what, len) in nonempty {
            if len == 0 {
                return Err(Error::Invalid(format!("sweep list {what} is empty")));
            }
        }
        if let Some(q) = s.q.iter().find(|q| !(0.0..=1.0).contains(*q)) {
            return Err(Error::Invalid(format!("quality {q} outside [0, 1]")));
        }
        if let Some(c) = s.cache_fraction.iter().find(|c| !(**c > 0.0 && **c <= 1.0)) {
            return Err(Error::Invalid(format!("cache fraction {c} outside (0, 1]")));
        }
        if let Some(a) = s.follow_prob.iter().find(|a| !(0.0..1.0).contains(*a)) {
            return Err(Error::Invalid(format!("follow probability {a} outside [0, 1)")));
        }
        if s.list_size.contains(&0) {
            return Err(Error::Invalid("list size must be >= 1".into()));
        }
        if let Some(z) = s.zipf_s.iter().find(|z| !(**z >= 0.0 && z.is_finite())) {
            return Err(Error::Invalid(format!("Zipf exponent {z} must be >= 0")));
        }
        if self.replicates == 0 {
            return Err(Error::Invalid("replicates must be >= 1".into()));
        }
        for len in &s.session_length {
            SessionConfig {
                session_length: *len,
                ..self.session.clone()
            }
            .validate()?;
        }
        self.session.validate()?;
        self.cars.validate()
    }

    fn session_lengths(&self) -> Vec<SessionLength> {
        if self.sweep.session_length.is_empty() {
            vec![self.session.session_length]
        } else {
            self.sweep.session_length.clone()
        }
    }

    /// Solve points in output order.
    pub fn grid(&self) -> Vec<GridPoint> {
        let s = &self.sweep;
        let mut out = Vec::new();
        for replicate in 0..self.replicates {
            for &list_size in &s.list_size {
                for &zipf_s in &s.zipf_s {
                    for &follow_prob in &s.follow_prob {
                        for &cache_fraction in &s.cache_fraction {
                            for &q in &s.q {
                                out.push(GridPoint {
                                    index: out.len(),
                                    replicate,
                                    q,
                                    cache_fraction,
                                    follow_prob,
                                    list_size,
                                    zipf_s,
                                });
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

/// One combination of swept parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridPoint {
    pub index: usize,
    pub replicate: u64,
    pub q: f64,
    pub cache_fraction: f64,
    pub follow_prob: f64,
    pub list_size: usize,
    pub zipf_s: f64,
}

/// `C = round(fraction * K)`, at least one.
pub fn cache_size(k: usize, fraction: f64) -> usize {
    ((fraction * k as f64).round() as usize).clamp(1, k)
}

pub fn session_label(l: SessionLength) -> String {
    match l {
        SessionLength::Fixed(m) => format!("fixed:{m}"),
        SessionLength::Geometric(mean) => format!("geometric:{mean}"),
    }
}

/// One output line of `results.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub schema_version: u32,
    pub scenario: String,
    pub dataset: String,
    pub grid_index: usize,
    pub replicate: u64,
    pub q: f64,
    pub cache_fraction: f64,
    pub follow_prob: f64,
    pub list_size: usize,
    pub zipf_s: f64,
    pub session_length: String,
    pub policy: String,
    pub catalog_size: Option<usize>,
    pub cache_size: Option<usize>,
    pub analytic_chr: Option<f64>,
    /// Expected hit ratio of fixed-length sessions that start from `p0`.
    pub session_chr: Option<f64>,
    pub empirical_chr: Option<f64>,
    pub requests: Option<u64>,
    pub mean_quality: Option<f64>,
    pub min_row_quality: Option<f64>,
    pub max_violation: Option<f64>,
    pub iterations: Option<usize>,
    pub converged: Option<bool>,
    pub seed: u64,
    pub errors: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub grid_index: usize,
    pub policy: String,
    pub solve_millis: u128,
    pub simulate_millis: u128,
}

#[derive(Clone, Debug, Default)]
pub struct ExperimentReport {
    pub rows: Vec<ResultRow>,
    pub timings: Vec<TimingRow>,
}

impl ExperimentReport {
    pub fn failed_rows(&self) -> usize {
        self.rows.iter().filter(|r| !r.errors.is_empty()).count()
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_csv(&dir.join(RESULTS_FILE), &self.rows)?;
        write_csv(&dir.join(TIMINGS_FILE), &self.timings)
    }
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(f));
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_results(path: &Path) -> Result<Vec<ResultRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// Inputs of one solve point.
pub struct Instance {
    pub inputs: OptimInputs,
    pub cache: CachePlacement,
}

pub fn build_instance(u: &SimilarityMatrix, p: &GridPoint) -> Result<Instance> {
    let k = u.size();
    if p.list_size >= k {
        return Err(Error::Invalid(format!(
            "list size {} needs a catalog larger than {k}",
            p.list_size
        )));
    }
    let p0 = dataset::zipf_popularity(k, p.zipf_s)?;
    let cache = top_c_cache(&p0, cache_size(k, p.cache_fraction))?;
    let model = RequestModel::new(p0, p.follow_prob, p.list_size)?;
    let cost = CostVector::cache_indicator(k, cache.cached())?;
    let inputs = OptimInputs::uniform(u.clone(), model, cost, p.q)?;
    Ok(Instance { inputs, cache })
}

struct Solved {
    y: RecMatrix,
    model: RequestModel,
    analytic: f64,
    iterations: usize,
    converged: bool,
    warning: Option<String>,
}

fn solve_policy(policy: Policy, inst: &Instance, cars: &CarsConfig) -> Result<Solved> {
    let inputs = &inst.inputs;
    let m = inputs.model();
    match policy {
        Policy::NoRec => {
            let model = m.with_follow_prob(0.0)?;
            let y = RecMatrix::top_similarity(inputs.similarity(), m.list_size())?;
            Ok(Solved {
                analytic: inst.cache.hit_mass(m.p0()),
                y,
                model,
                iterations: 0,
                converged: true,
                warning: None,
            })
        }
        Policy::Myopic => {
            let y = myopic_solve(inputs)?;
            Ok(Solved {
                analytic: cache_hit_ratio(&y, m, inst.cache.cached())?,
                y,
                model: m.clone(),
                iterations: 1,
                converged: true,
                warning: None,
            })
        }
        Policy::Cars => {
            let r = cars_solve(inputs, cars)?;
            Ok(Solved {
                analytic: cache_hit_ratio(&r.best_y, m, inst.cache.cached())?,
                iterations: r.iterations,
                converged: r.converged,
                warning: r.error,
                y: r.best_y,
                model: m.clone(),
            })
        }
    }
}

fn base_row(cfg: &ScenarioConfig, p: &GridPoint, policy: Policy, len: SessionLength, seed: u64) -> ResultRow {
    ResultRow {
        schema_version: SCHEMA_VERSION,
        scenario: cfg.name.clone(),
        dataset: cfg.dataset.label().into(),
        grid_index: p.index,
        replicate: p.replicate,
        q: p.q,
        cache_fraction: p.cache_fraction,
        follow_prob: p.follow_prob,
        list_size: p.list_size,
        zipf_s: p.zipf_s,
        session_length: session_label(len),
        policy: policy.name().into(),
        catalog_size: None,
        cache_size: None,
        analytic_chr: None,
        session_chr: None,
        empirical_chr: None,
        requests: None,
        mean_quality: None,
        min_row_quality: None,
        max_violation: None,
        iterations: None,
        converged: None,
        seed,
        errors: String::new(),
    }
}

fn run_point(
    cfg: &ScenarioConfig,
    u: &Result<SimilarityMatrix, String>,
    p: &GridPoint,
) -> (Vec<ResultRow>, Vec<TimingRow>) {
    let lengths = cfg.session_lengths();
    let seed = cfg.session.seed.wrapping_add(p.replicate);
    let mut rows = Vec::new();
    let mut timings = Vec::new();
    let instance = match u {
        Ok(u) => build_instance(u, p).map_err(|e| e.to_string()),
        Err(e) => Err(e.clone()),
    };
    for &policy in &cfg.policies {
        let fail = |msg: &str, rows: &mut Vec<ResultRow>| {
            for &len in &lengths {
                let mut r = base_row(cfg, p, policy, len, seed);
                r.errors = msg.to_owned();
                rows.push(r);
            }
        };
        let inst = match &instance {
            Ok(i) => i,
            Err(e) => {
                fail(e, &mut rows);
                continue;
            }
        };
        let t0 = Instant::now();
        let solved = match solve_policy(policy, inst, &cfg.cars) {
            Ok(s) => s,
            Err(e) => {
                fail(&e.to_string(), &mut rows);
                continue;
            }
        };
        let solve_millis = t0.elapsed().as_millis();
        let k = inst.inputs.size();
        let (min_q, max_violation) = if policy == Policy::NoRec {
            (None, None)
        } else {
            let q = quality_of(&solved.y, inst.inputs.similarity()).ok();
            let min_q = q.map(|q| q.into_iter().fold(f64::INFINITY, f64::min));
            (min_q, Some(max_violation(&solved.y)))
        };
        let t1 = Instant::now();
        for &len in &lengths {
            let mut r = base_row(cfg, p, policy, len, seed);
            r.catalog_size = Some(k);
            r.cache_size = Some(inst.cache.capacity());
            r.analytic_chr = Some(solved.analytic);
            if let SessionLength::Fixed(len) = len {
                r.session_chr = session_hit_ratio(&solved.y, &solved.model, &inst.cache, len).ok();
            }
            r.min_row_quality = min_q;
            r.max_violation = max_violation;
            r.iterations = Some(solved.iterations);
            r.converged = Some(solved.converged);
            if let Some(w) = &solved.warning {
                r.errors = w.clone();
            }
            let session = SessionConfig {
                session_length: len,
                seed,
                ..cfg.session.clone()
            };
            match simulate(&solved.y, &solved.model, &inst.cache, inst.inputs.similarity(), &session) {
                Ok(mt) => {
                    r.empirical_chr = Some(mt.empirical_chr());
                    r.requests = Some(mt.requests);
                    r.mean_quality = Some(mt.mean_quality_served());
                }
                Err(e) => r.errors = e.to_string(),
            }
            rows.push(r);
        }
        timings.push(TimingRow {
            grid_index: p.index,
            policy: policy.name().into(),
            solve_millis,
            simulate_millis: t1.elapsed().as_millis(),
        });
    }
    (rows, timings)
}

/// Mean hit ratio over a session of `len` requests whose first request is
/// direct.
pub fn session_hit_ratio(y: &RecMatrix, m: &RequestModel, cache: &CachePlacement, len: usize) -> Result<f64> {
    let k = y.size();
    let x = CostVector::cache_indicator(k, cache.cached())?;
    Ok(1.0 - finite_horizon_cost(y, m, &x, len - 1)? / len as f64)
}

/// Largest constraint violation of a recommendation matrix, 0 if feasible.
pub fn max_violation(y: &RecMatrix) -> f64 {
    use crate::model::Violation;
    validate_rec_matrix(y, 0.0)
        .iter()
        .map(|v| match *v {
            Violation::NonFinite { .. } => f64::INFINITY,
            Violation::Negative { value, .. } => -value,
            Violation::AboveCap { value, cap, .. } => value - cap,
            Violation::Diagonal { value, .. } => value.abs(),
            Violation::RowSum { sum, .. } => (sum - 1.0).abs(),
        })
        .fold(0.0, f64::max)
}

/// Runs every grid point and policy. Grid points are solved in parallel and
/// rows come back in grid order; failures are recorded per row.
pub fn run_experiment(cfg: &ScenarioConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let mut keys: Vec<(usize, u64)> = Vec::new();
    for p in cfg.grid() {
        if !keys.contains(&(p.list_size, p.replicate)) {
            keys.push((p.list_size, p.replicate));
        }
    }
    let built: Vec<Result<SimilarityMatrix, String>> = keys
        .par_iter()
        .map(|&(n, r)| cfg.dataset.build(n, r).map_err(|e| e.to_string()))
        .collect();
    let datasets: BTreeMap<(usize, u64), Result<SimilarityMatrix, String>> = keys.into_iter().zip(built).collect();
    let parts: Vec<(Vec<ResultRow>, Vec<TimingRow>)> = cfg
        .grid()
        .par_iter()
        .map(|p| run_point(cfg, &datasets[&(p.list_size, p.replicate)], p))
        .collect();
    let mut report = ExperimentReport::default();
    for (rows, timings) in parts {
        report.rows.extend(rows);
        report.timings.extend(timings);
    }
    Ok(report)
}

/// CARS on the first grid point of `cfg`, with its convergence trace.
pub fn convergence_trace(cfg: &ScenarioConfig) -> Result<CarsResult> {
    cfg.validate()?;
    let p = cfg.grid()[0];
    let u = cfg.dataset.build(p.list_size, p.replicate)?;
    let inst = build_instance(&u, &p)?;
    cars_solve(&inst.inputs, &cfg.cars)
}

/// Writes `trace.csv` (iteration, actual and virtual cost, residual,
/// multiplier norm) into `dir` and returns the CARS result.
pub fn emit_convergence_trace(cfg: &ScenarioConfig, dir: &Path) -> Result<CarsResult> {
    let r = convergence_trace(cfg)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(TRACE_FILE);
    let f = File::create(&path).map_err(|e| Error::io(&path, e))?;
    r.write_trace_csv(BufWriter::new(f))?;
    Ok(r)
}
