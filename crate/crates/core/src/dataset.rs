//! Input preparation: rating tables, collaborative-filtering fill, cosine
//! relatedness, thresholding, pruning, synthetic relatedness graphs and Zipf
//! popularity.
//!
//! Large catalogs never materialize a dense similarity matrix before pruning;
//! relatedness is kept as a sparse [`RelationGraph`] until the catalog has
//! shrunk.

use std::collections::{BTreeSet, HashMap};
use std::fs::{self, File};
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::io;
use crate::model::{PopularityVector, SimilarityMatrix};

pub const RATING_MIN: f64 = 0.5;
pub const RATING_MAX: f64 = 5.0;
pub const DEFAULT_NEIGHBORS: usize = 10;
pub const DEFAULT_MOVIELENS_THRESHOLD: f64 = 0.6;
const SYNTHETIC_MAX_DRAWS: u64 = 100;

/// Explicit ratings as `(user, item, rating)` index triples.
#[derive(Clone, Debug)]
pub struct RatingsTable {
    users: Vec<String>,
    items: Vec<String>,
    entries: Vec<(usize, usize, f64)>,
}

#[derive(Deserialize)]
struct MovieLensRecord {
    #[serde(rename = "userId")]
    user: String,
    #[serde(rename = "movieId")]
    item: String,
    rating: f64,
}

impl RatingsTable {
    /// Builds a table from raw id triples. Ids are ordered numerically when
    /// they all parse as integers, lexicographically otherwise.
    pub fn from_triples<S: AsRef<str>>(triples: &[(S, S, f64)]) -> Result<Self> {
        if triples.is_empty() {
            return Err(Error::Dataset("ratings table is empty".into()));
        }
        let users = sorted_ids(triples.iter().map(|t| t.0.as_ref()));
        let items = sorted_ids(triples.iter().map(|t| t.1.as_ref()));
        let user_idx: HashMap<&str, usize> = users.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
        let item_idx: HashMap<&str, usize> = items.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
        let mut entries = Vec::with_capacity(triples.len());
        for (u, it, r) in triples {
            let r = *r;
            if !r.is_finite() || !(RATING_MIN..=RATING_MAX).contains(&r) {
                return Err(Error::Dataset(format!(
                    "rating {r} of user {} on item {} outside [{RATING_MIN}, {RATING_MAX}]",
                    u.as_ref(),
                    it.as_ref()
                )));
            }
            entries.push((user_idx[u.as_ref()], item_idx[it.as_ref()], r));
        }
        entries.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        if let Some(w) = entries.windows(2).find(|w| w[0].0 == w[1].0 && w[0].1 == w[1].1) {
            return Err(Error::Dataset(format!(
                "duplicate rating of user {} on item {}",
                users[w[0].0], items[w[0].1]
            )));
        }
        Ok(Self { users, items, entries })
    }

    /// Reads a MovieLens `userId,movieId,rating,timestamp` CSV with header.
    pub fn read_movielens<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let mut triples = Vec::new();
        for rec in rdr.deserialize() {
            let rec: MovieLensRecord = rec?;
            triples.push((rec.user, rec.item, rec.rating));
        }
        Self::from_triples(&triples)
    }

    pub fn load_movielens(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_movielens(BufReader::new(f))
    }

    pub fn users(&self) -> &[String] {
        &self.users
    }

    pub fn items(&self) -> &[String] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// `(user, item, rating)` triples sorted by user then item.
    pub fn entries(&self) -> &[(usize, usize, f64)] {
        &self.entries
    }

    pub fn to_dense(&self) -> DenseRatings {
        let mut d = DenseRatings::missing(self.items.len(), self.users.len());
        for &(u, i, r) in &self.entries {
            d.set(i, u, r);
        }
        d
    }
}

fn sorted_ids<'a>(ids: impl Iterator<Item = &'a str>) -> Vec<String> {
    let set: BTreeSet<&str> = ids.collect();
    let mut out: Vec<String> = set.into_iter().map(str::to_owned).collect();
    if out.iter().all(|s| s.parse::<u64>().is_ok()) {
        out.sort_by_key(|s| s.parse::<u64>().unwrap_or(0));
    }
    out
}

/// Item-by-user rating matrix; `NaN` marks a missing rating.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseRatings {
    items: usize,
    users: usize,
    data: Vec<f64>,
}

impl DenseRatings {
    pub fn new(items: usize, users: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != items * users {
            return Err(Error::DimensionMismatch {
                what: "rating matrix entries",
                expected: items * users,
                got: data.len(),
            });
        }
        Ok(Self { items, users, data })
    }

    pub fn missing(items: usize, users: usize) -> Self {
        Self {
            items,
            users,
            data: vec![f64::NAN; items * users],
        }
    }

    pub fn items(&self) -> usize {
        self.items
    }

    pub fn users(&self) -> usize {
        self.users
    }

    #[inline]
    pub fn get(&self, item: usize, user: usize) -> f64 {
        self.data[item * self.users + user]
    }

    pub fn set(&mut self, item: usize, user: usize, v: f64) {
        self.data[item * self.users + user] = v;
    }

    pub fn item_row(&self, item: usize) -> &[f64] {
        &self.data[item * self.users..(item + 1) * self.users]
    }

    pub fn missing_count(&self) -> usize {
        self.data.iter().filter(|v| v.is_nan()).count()
    }
}

/// Fills missing ratings by item-to-item collaborative filtering.
///
/// Item similarity is the cosine of mean-centered ratings restricted to the
/// users who rated both items. A missing `r_n(i)` is the similarity-weighted
/// average of user `n`'s ratings on the `k` items most similar to `i` among
/// those `n` rated (positive similarities only); without such neighbors the
/// item mean is used.
pub fn cf_fill(table: &RatingsTable, k: usize) -> Result<DenseRatings> {
    if table.is_empty() {
        return Err(Error::Dataset("ratings table is empty".into()));
    }
    if k == 0 {
        return Err(Error::Invalid("collaborative filtering needs k >= 1".into()));
    }
    let n_items = table.items.len();
    let n_users = table.users.len();
    let mut by_item: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n_items];
    let mut by_user: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n_users];
    for &(u, i, r) in &table.entries {
        by_item[i].push((u, r));
        by_user[u].push((i, r));
    }
    let means: Vec<f64> = by_item
        .iter()
        .map(|v| v.iter().map(|x| x.1).sum::<f64>() / v.len() as f64)
        .collect();
    let centered_by_user: Vec<Vec<(usize, f64)>> = by_user
        .iter()
        .map(|v| v.iter().map(|&(i, r)| (i, r - means[i])).collect())
        .collect();

    let rows: Vec<Vec<f64>> = (0..n_items)
        .into_par_iter()
        .map_init(
            || (vec![0.0; n_items], vec![0.0; n_items], vec![0.0; n_items], Vec::new()),
            |(dot, ni, nj, touched), i| {
                for &(u, r) in &by_item[i] {
                    let ci = r - means[i];
                    for &(j, cj) in &centered_by_user[u] {
                        if dot[j] == 0.0 && ni[j] == 0.0 && nj[j] == 0.0 {
                            touched.push(j);
                        }
                        dot[j] += ci * cj;
                        ni[j] += ci * ci;
                        nj[j] += cj * cj;
                    }
                }
                let mut sim = vec![0.0; n_items];
                for &j in touched.iter() {
                    if j != i && ni[j] > 0.0 && nj[j] > 0.0 {
                        sim[j] = dot[j] / (ni[j] * nj[j]).sqrt();
                    }
                    dot[j] = 0.0;
                    ni[j] = 0.0;
                    nj[j] = 0.0;
                }
                touched.clear();

                let mut row = vec![f64::NAN; n_users];
                for &(u, r) in &by_item[i] {
                    row[u] = r;
                }
                let mut neigh: Vec<(usize, f64, f64)> = Vec::new();
                for (u, slot) in row.iter_mut().enumerate() {
                    if !slot.is_nan() {
                        continue;
                    }
                    neigh.clear();
                    neigh.extend(
                        by_user[u]
                            .iter()
                            .filter(|&&(j, _)| sim[j] > 0.0)
                            .map(|&(j, r)| (j, sim[j], r)),
                    );
                    if neigh.len() > k {
                        neigh.select_nth_unstable_by(k - 1, |a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
                        neigh.truncate(k);
                    }
                    let w: f64 = neigh.iter().map(|x| x.1).sum();
                    *slot = if w > 0.0 {
                        neigh.iter().map(|x| x.1 * x.2).sum::<f64>() / w
                    } else {
                        means[i]
                    };
                }
                row
            },
        )
        .collect();
    DenseRatings::new(n_items, n_users, rows.concat())
}

/// Dense pairwise scores before thresholding, values in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RawSimilarity {
    size: usize,
    data: Vec<f64>,
}

impl RawSimilarity {
    pub fn new(size: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != size * size {
            return Err(Error::DimensionMismatch {
                what: "similarity entries",
                expected: size * size,
                got: data.len(),
            });
        }
        Ok(Self { size, data })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.size + j]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Element-wise `max(s_ij, s_ji)`.
    pub fn symmetrize_max(&self) -> Self {
        let k = self.size;
        let mut data = self.data.clone();
        for i in 0..k {
            for j in 0..i {
                let m = self.get(i, j).max(self.get(j, i));
                data[i * k + j] = m;
                data[j * k + i] = m;
            }
        }
        Self { size: k, data }
    }
}

/// Unit-norm mean-centered item vectors; zero-norm items stay all zero.
fn normalized_centered(m: &DenseRatings) -> Vec<Vec<f64>> {
    (0..m.items())
        .into_par_iter()
        .map(|i| {
            let row = m.item_row(i);
            let (sum, cnt) = row
                .iter()
                .filter(|v| !v.is_nan())
                .fold((0.0, 0usize), |(s, c), &v| (s + v, c + 1));
            let mean = if cnt > 0 { sum / cnt as f64 } else { 0.0 };
            let mut c: Vec<f64> = row.iter().map(|&v| if v.is_nan() { 0.0 } else { v - mean }).collect();
            let norm = c.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                c.iter_mut().for_each(|v| *v /= norm);
            } else {
                c.iter_mut().for_each(|v| *v = 0.0);
            }
            c
        })
        .collect()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>().clamp(-1.0, 1.0)
}

/// Adjusted cosine similarity between item rows (missing entries count as the
/// item mean). The diagonal is zero.
pub fn cosine_similarity(m: &DenseRatings) -> RawSimilarity {
    let k = m.items();
    let vecs = normalized_centered(m);
    let rows: Vec<Vec<f64>> = (0..k)
        .into_par_iter()
        .map(|i| (0..k).map(|j| if i == j { 0.0 } else { cosine(&vecs[i], &vecs[j]) }).collect())
        .collect();
    RawSimilarity {
        size: k,
        data: rows.concat(),
    }
}

/// `u_ij = 1` iff `s_ij > theta` (after symmetrizing with max), zero diagonal.
pub fn binarize(s: &RawSimilarity, theta: f64) -> SimilarityMatrix {
    let sym = s.symmetrize_max();
    let k = sym.size;
    let mut data = vec![0.0; k * k];
    for i in 0..k {
        for j in 0..k {
            if i != j && sym.get(i, j) > theta {
                data[i * k + j] = 1.0;
            }
        }
    }
    SimilarityMatrix::new(k, data).expect("binary matrix with zero diagonal")
}

/// Result of pruning a catalog.
#[derive(Clone, Debug, PartialEq)]
pub struct Pruned<T> {
    pub value: T,
    /// `old_to_new[i]` is the new index of original content `i`, if kept.
    pub old_to_new: Vec<Option<usize>>,
    /// Original index of every kept content, in order.
    pub kept: Vec<usize>,
    /// Number of passes that removed at least one content.
    pub passes: usize,
}

fn index_maps(alive: &[bool]) -> (Vec<Option<usize>>, Vec<usize>) {
    let mut map = vec![None; alive.len()];
    let mut kept = Vec::new();
    for (i, &a) in alive.iter().enumerate() {
        if a {
            map[i] = Some(kept.len());
            kept.push(i);
        }
    }
    (map, kept)
}

/// Repeatedly removes contents whose row sum over the remaining catalog is
/// `<= n` until none is left.
pub fn prune(u: &SimilarityMatrix, n: usize) -> Result<Pruned<SimilarityMatrix>> {
    let k = u.size();
    let mut alive = vec![true; k];
    let mut sums: Vec<f64> = (0..k).map(|i| u.row_sum(i)).collect();
    let mut passes = 0;
    loop {
        let remove: Vec<usize> = (0..k).filter(|&i| alive[i] && sums[i] <= n as f64).collect();
        if remove.is_empty() {
            break;
        }
        passes += 1;
        for &r in &remove {
            alive[r] = false;
        }
        for i in (0..k).filter(|&i| alive[i]) {
            sums[i] = (0..k).filter(|&j| alive[j]).map(|j| u.get(i, j)).sum();
        }
    }
    let (old_to_new, kept) = index_maps(&alive);
    if kept.is_empty() {
        return Err(Error::Dataset(format!("pruning with N = {n} removed every content")));
    }
    let m = kept.len();
    let mut data = vec![0.0; m * m];
    for (a, &i) in kept.iter().enumerate() {
        for (b, &j) in kept.iter().enumerate() {
            data[a * m + b] = u.get(i, j);
        }
    }
    Ok(Pruned {
        value: SimilarityMatrix::new(m, data)?,
        old_to_new,
        kept,
        passes,
    })
}

/// Undirected binary relatedness as sorted adjacency lists.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RelationGraph {
    adj: Vec<Vec<usize>>,
}

impl RelationGraph {
    pub fn empty(k: usize) -> Self {
        Self { adj: vec![Vec::new(); k] }
    }

    /// Graph from undirected edges; self-loops and duplicates are dropped.
    pub fn from_edges(k: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let mut adj = vec![Vec::new(); k];
        for (i, j) in edges {
            if i >= k || j >= k {
                return Err(Error::Invalid(format!("edge ({i}, {j}) outside catalog of {k}")));
            }
            if i != j {
                adj[i].push(j);
                adj[j].push(i);
            }
        }
        for a in &mut adj {
            a.sort_unstable();
            a.dedup();
        }
        Ok(Self { adj })
    }

    pub fn from_similarity(u: &SimilarityMatrix) -> Self {
        let k = u.size();
        let mut adj = vec![Vec::new(); k];
        for i in 0..k {
            for j in 0..k {
                if u.get(i, j) > 0.0 || u.get(j, i) > 0.0 {
                    adj[i].push(j);
                }
            }
        }
        Self { adj }
    }

    pub fn size(&self) -> usize {
        self.adj.len()
    }

    pub fn degree(&self, i: usize) -> usize {
        self.adj[i].len()
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.adj[i]
    }

    pub fn edge_count(&self) -> usize {
        self.adj.iter().map(Vec::len).sum::<usize>() / 2
    }

    pub fn min_degree(&self) -> usize {
        self.adj.iter().map(Vec::len).min().unwrap_or(0)
    }

    pub fn to_similarity(&self) -> SimilarityMatrix {
        let k = self.size();
        let mut data = vec![0.0; k * k];
        for (i, a) in self.adj.iter().enumerate() {
            for &j in a {
                data[i * k + j] = 1.0;
            }
        }
        SimilarityMatrix::new(k, data).expect("adjacency has no self-loops")
    }

    /// Fixpoint pruning of nodes with degree `<= n`, as [`prune`].
    pub fn prune(&self, n: usize) -> Result<Pruned<RelationGraph>> {
        let k = self.size();
        let mut alive = vec![true; k];
        let mut deg: Vec<usize> = self.adj.iter().map(Vec::len).collect();
        let mut passes = 0;
        loop {
            let remove: Vec<usize> = (0..k).filter(|&i| alive[i] && deg[i] <= n).collect();
            if remove.is_empty() {
                break;
            }
            passes += 1;
            for &r in &remove {
                alive[r] = false;
            }
            for &r in &remove {
                for &j in &self.adj[r] {
                    if alive[j] {
                        deg[j] -= 1;
                    }
                }
            }
        }
        let (old_to_new, kept) = index_maps(&alive);
        if kept.is_empty() {
            return Err(Error::Dataset(format!("pruning with N = {n} removed every content")));
        }
        let adj = kept
            .iter()
            .map(|&i| self.adj[i].iter().filter_map(|&j| old_to_new[j]).collect())
            .collect();
        Ok(Pruned {
            value: RelationGraph { adj },
            old_to_new,
            kept,
            passes,
        })
    }
}

/// Thresholded cosine relatedness without a dense `K x K` buffer.
pub fn cosine_graph(m: &DenseRatings, theta: f64) -> RelationGraph {
    let k = m.items();
    let vecs = normalized_centered(m);
    let upper: Vec<Vec<usize>> = (0..k)
        .into_par_iter()
        .map(|i| ((i + 1)..k).filter(|&j| cosine(&vecs[i], &vecs[j]) > theta).collect())
        .collect();
    let edges = upper
        .iter()
        .enumerate()
        .flat_map(|(i, js)| js.iter().map(move |&j| (i, j)));
    RelationGraph::from_edges(k, edges).expect("indices in range")
}

/// Pairwise scores `(idA, idB, score)` from a tab-separated triplet file.
#[derive(Clone, Debug)]
pub struct Triplets {
    pub ids: Vec<String>,
    pub entries: Vec<(usize, usize, f64)>,
}

impl Triplets {
    pub fn read<R: BufRead>(r: R) -> Result<Self> {
        let mut raw: Vec<(String, String, f64)> = Vec::new();
        for (n, line) in r.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split('\t');
            let (Some(a), Some(b), Some(s), None) = (parts.next(), parts.next(), parts.next(), parts.next()) else {
                return Err(Error::Parse {
                    line: n + 1,
                    msg: "expected idA<TAB>idB<TAB>score".into(),
                });
            };
            let score: f64 = s.trim().parse().map_err(|_| Error::Parse {
                line: n + 1,
                msg: format!("bad score {s:?}"),
            })?;
            if !score.is_finite() {
                return Err(Error::Parse {
                    line: n + 1,
                    msg: format!("score {score} is not finite"),
                });
            }
            raw.push((a.trim().to_owned(), b.trim().to_owned(), score));
        }
        if raw.is_empty() {
            return Err(Error::Dataset("triplet file has no entries".into()));
        }
        let ids = sorted_ids(raw.iter().flat_map(|t| [t.0.as_str(), t.1.as_str()]));
        let idx: HashMap<&str, usize> = ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
        let entries = raw.iter().map(|(a, b, s)| (idx[a.as_str()], idx[b.as_str()], *s)).collect();
        Ok(Self { ids, entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read(BufReader::new(f))
    }

    /// Relates two contents when either direction scores above `theta`.
    pub fn graph(&self, theta: f64) -> RelationGraph {
        let edges = self.entries.iter().filter(|e| e.2 > theta).map(|e| (e.0, e.1));
        RelationGraph::from_edges(self.ids.len(), edges).expect("indices in range")
    }
}

/// Parameters of a random relatedness graph.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSimilaritySpec {
    pub k: usize,
    pub mean_related: f64,
    pub seed: u64,
}

/// Random symmetric binary relatedness where each pair is related with
/// probability `mean_related / (K - 1)`.
///
/// With `min_related > 0` the graph is redrawn (one stream per attempt) until
/// every content has at least `min_related` related contents. If 100 draws
/// fail, the first draw is repaired instead: deficient contents are linked,
/// preferably to each other, and then surplus edges between contents above
/// the minimum are removed until the edge count is back at `K * R / 2`.
pub fn synthetic_similarity(spec: &SyntheticSimilaritySpec, min_related: usize) -> Result<SimilarityMatrix> {
    Ok(synthetic_graph(spec, min_related)?.to_similarity())
}

pub fn synthetic_graph(spec: &SyntheticSimilaritySpec, min_related: usize) -> Result<RelationGraph> {
    let k = spec.k;
    let r = spec.mean_related;
    if k < 2 {
        return Err(Error::Invalid(format!("synthetic catalog needs K >= 2, got {k}")));
    }
    if !(r >= 0.0 && r <= (k - 1) as f64) {
        return Err(Error::Invalid(format!("mean related {r} must lie in [0, K-1 = {}]", k - 1)));
    }
    if min_related > k - 1 {
        return Err(Error::Invalid(format!(
            "cannot give every content {min_related} related contents in a catalog of {k}"
        )));
    }
    let p = r / (k - 1) as f64;
    let draw = |stream: u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(stream);
        let mut edges = Vec::new();
        for i in 0..k {
            for j in (i + 1)..k {
                if rng.random::<f64>() < p {
                    edges.push((i, j));
                }
            }
        }
        (RelationGraph::from_edges(k, edges).expect("indices in range"), rng)
    };
    for stream in 0..SYNTHETIC_MAX_DRAWS {
        let (g, _) = draw(stream);
        if g.min_degree() >= min_related {
            return Ok(g);
        }
    }
    let (g, mut rng) = draw(0);
    log::debug!(
        "no synthetic draw reached min degree {min_related} after {SYNTHETIC_MAX_DRAWS} attempts; repairing"
    );
    Ok(repair_degrees(g, min_related, (k as f64 * r / 2.0).round() as usize, &mut rng))
}

fn repair_degrees(g: RelationGraph, min_deg: usize, target_edges: usize, rng: &mut ChaCha8Rng) -> RelationGraph {
    let k = g.size();
    let mut sets: Vec<BTreeSet<usize>> = g.adj.into_iter().map(|a| a.into_iter().collect()).collect();
    loop {
        let deficient: Vec<usize> = (0..k).filter(|&i| sets[i].len() < min_deg).collect();
        let Some(&d) = deficient.first() else { break };
        let partners: Vec<usize> = deficient.iter().copied().filter(|&j| j != d && !sets[d].contains(&j)).collect();
        let j = if let Some(&j) = partners.choose(rng) {
            j
        } else {
            let open: Vec<usize> = (0..k).filter(|&j| j != d && !sets[d].contains(&j)).collect();
            open[rng.random_range(0..open.len())]
        };
        sets[d].insert(j);
        sets[j].insert(d);
    }
    let mut edges: Vec<(usize, usize)> = (0..k)
        .flat_map(|i| sets[i].iter().filter(move |&&j| j > i).map(move |&j| (i, j)))
        .collect();
    edges.shuffle(rng);
    let mut count = edges.len();
    for &(i, j) in &edges {
        if count <= target_edges {
            break;
        }
        if sets[i].len() > min_deg && sets[j].len() > min_deg {
            sets[i].remove(&j);
            sets[j].remove(&i);
            count -= 1;
        }
    }
    RelationGraph {
        adj: sets.into_iter().map(|s| s.into_iter().collect()).collect(),
    }
}

/// `p_j` proportional to `(j + 1)^-s`: content index order is popularity rank.
pub fn zipf_popularity(k: usize, s: f64) -> Result<PopularityVector> {
    if k == 0 {
        return Err(Error::Invalid("Zipf popularity needs K >= 1".into()));
    }
    if !(s >= 0.0 && s.is_finite()) {
        return Err(Error::Invalid(format!("Zipf exponent must be >= 0, got {s}")));
    }
    let w: Vec<f64> = (1..=k).map(|j| (j as f64).powf(-s)).collect();
    let total: f64 = w.iter().sum();
    PopularityVector::new(w.into_iter().map(|x| x / total).collect())
}

/// How a prepared dataset was produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub source: String,
    pub source_sha256: String,
    pub kind: String,
    pub theta: f64,
    pub list_size: usize,
    pub cf_neighbors: Option<usize>,
    pub catalog_before_prune: usize,
    pub prune_passes: usize,
    pub catalog_size: usize,
}

/// A pruned binary relatedness matrix plus the original content ids.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedDataset {
    pub ids: Vec<String>,
    pub similarity: SimilarityMatrix,
    pub provenance: Provenance,
}

const SIMILARITY_FILE: &str = "similarity.txt";
const IDS_FILE: &str = "ids.txt";
const PROVENANCE_FILE: &str = "provenance.json";

impl PreparedDataset {
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let k = self.similarity.size();
        io::save_matrix(&dir.join(SIMILARITY_FILE), k, k, self.similarity.as_slice())?;
        let ids_path = dir.join(IDS_FILE);
        let mut text = self.ids.join("\n");
        text.push('\n');
        fs::write(&ids_path, text).map_err(|e| Error::io(&ids_path, e))?;
        let prov_path = dir.join(PROVENANCE_FILE);
        let json = serde_json::to_string_pretty(&self.provenance)?;
        fs::write(&prov_path, json + "\n").map_err(|e| Error::io(&prov_path, e))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let m = io::load_matrix(&dir.join(SIMILARITY_FILE))?;
        if m.rows != m.cols {
            return Err(Error::Dataset(format!("similarity matrix is {}x{}", m.rows, m.cols)));
        }
        let similarity = SimilarityMatrix::new(m.rows, m.data)?;
        let ids_path = dir.join(IDS_FILE);
        let ids: Vec<String> = fs::read_to_string(&ids_path)
            .map_err(|e| Error::io(&ids_path, e))?
            .lines()
            .map(str::to_owned)
            .collect();
        if ids.len() != similarity.size() {
            return Err(Error::DimensionMismatch {
                what: "content ids",
                expected: similarity.size(),
                got: ids.len(),
            });
        }
        let prov_path = dir.join(PROVENANCE_FILE);
        let prov_text = fs::read_to_string(&prov_path).map_err(|e| Error::io(&prov_path, e))?;
        let provenance = serde_json::from_str(&prov_text)?;
        Ok(Self {
            ids,
            similarity,
            provenance,
        })
    }
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn source_name(path: &Path) -> String {
    path.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

fn finish(
    kind: &str,
    path: &Path,
    ids: &[String],
    graph: RelationGraph,
    theta: f64,
    list_size: usize,
    cf_neighbors: Option<usize>,
) -> Result<PreparedDataset> {
    let before = graph.size();
    let pruned = graph.prune(list_size)?;
    let kept_ids: Vec<String> = pruned.kept.iter().map(|&i| ids[i].clone()).collect();
    let similarity = pruned.value.to_similarity();
    log::info!(
        "{kind}: {before} contents, {} after {} pruning passes",
        similarity.size(),
        pruned.passes
    );
    Ok(PreparedDataset {
        ids: kept_ids,
        provenance: Provenance {
            source: source_name(path),
            source_sha256: sha256_file(path)?,
            kind: kind.into(),
            theta,
            list_size,
            cf_neighbors,
            catalog_before_prune: before,
            prune_passes: pruned.passes,
            catalog_size: similarity.size(),
        },
        similarity,
    })
}

/// Ratings CSV to pruned binary relatedness: CF fill, adjusted cosine,
/// threshold `theta`, fixpoint pruning at list size `n`.
pub fn prepare_movielens(path: &Path, theta: f64, n: usize, neighbors: usize) -> Result<PreparedDataset> {
    let table = RatingsTable::load_movielens(path)?;
    let filled = cf_fill(&table, neighbors)?;
    let graph = cosine_graph(&filled, theta);
    finish("movielens", path, table.items(), graph, theta, n, Some(neighbors))
}

/// Similarity triplets to pruned binary relatedness; any score above `theta`
/// relates the pair.
pub fn prepare_lastfm(path: &Path, theta: f64, n: usize) -> Result<PreparedDataset> {
    let t = Triplets::load(path)?;
    let graph = t.graph(theta);
    finish("lastfm", path, &t.ids, graph, theta, n, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn table(rows: &[&[Option<f64>]]) -> RatingsTable {
        let mut t = Vec::new();
        for (i, r) in rows.iter().enumerate() {
            for (u, v) in r.iter().enumerate() {
                if let Some(v) = v {
                    t.push((u.to_string(), i.to_string(), *v));
                }
            }
        }
        RatingsTable::from_triples(&t).unwrap()
    }

    #[test]
    fn cf_fill_hole_fixture() {
        let t = table(&[
            &[Some(5.0), Some(3.0), Some(4.0)],
            &[Some(4.0), Some(2.0), Some(5.0)],
            &[Some(5.0), Some(2.0), None],
        ]);
        let one = cf_fill(&t, 1).unwrap();
        assert_eq!(one.get(2, 2), 4.0);
        let two = cf_fill(&t, 2).unwrap();
        assert!((two.get(2, 2) - 4.454163456597992).abs() < 1e-12);
        for i in 0..3 {
            for u in 0..3 {
                if (i, u) != (2, 2) {
                    assert_eq!(one.get(i, u), t.to_dense().get(i, u));
                }
            }
        }
    }

    #[test]
    fn cf_fill_without_neighbors_uses_item_mean() {
        let t = table(&[&[Some(4.0), None], &[None, Some(2.0)]]);
        let f = cf_fill(&t, 10).unwrap();
        assert_eq!(f.get(0, 1), 4.0);
        assert_eq!(f.get(1, 0), 2.0);
        assert_eq!(f.missing_count(), 0);
    }

    #[test]
    fn ratings_validation() {
        assert!(RatingsTable::from_triples::<&str>(&[]).is_err());
        assert!(RatingsTable::from_triples(&[("1", "1", 5.5)]).is_err());
        assert!(RatingsTable::from_triples(&[("1", "1", 4.0), ("1", "1", 3.0)]).is_err());
        let csv = "userId,movieId,rating,timestamp\n1,10,4.0,0\n2,9,3.5,0\n";
        let t = RatingsTable::read_movielens(csv.as_bytes()).unwrap();
        assert_eq!(t.items(), ["9", "10"]);
        assert_eq!(t.len(), 2);
    }

    #[test]
    fn cosine_examples() {
        let m = DenseRatings::new(3, 2, vec![2.0, 0.0, 2.0, 0.0, 0.0, 2.0]).unwrap();
        let s = cosine_similarity(&m);
        assert!((s.get(0, 1) - 1.0).abs() < 1e-15);
        assert!((s.get(0, 2) + 1.0).abs() < 1e-15);
        assert_eq!(s.get(0, 0), 0.0);
        let orth = DenseRatings::new(2, 4, vec![1.0, -1.0, 1.0, -1.0, 1.0, 1.0, -1.0, -1.0]).unwrap();
        assert_eq!(cosine_similarity(&orth).get(0, 1), 0.0);
        let flat = DenseRatings::new(2, 2, vec![3.0, 3.0, 1.0, 2.0]).unwrap();
        assert_eq!(cosine_similarity(&flat).get(0, 1), 0.0);
    }

    #[test]
    fn binarize_is_strict() {
        let s = RawSimilarity::new(2, vec![0.0, 0.61, 0.6, 0.0]).unwrap();
        let u = binarize(&s, 0.6);
        assert_eq!(u.get(0, 1), 1.0);
        assert_eq!(u.get(1, 0), 1.0);
        let s = RawSimilarity::new(2, vec![0.0, 0.6, 0.6, 0.0]).unwrap();
        assert_eq!(binarize(&s, 0.6), SimilarityMatrix::zeros(2));
    }

    #[test]
    fn prune_examples() {
        let full = SimilarityMatrix::from_fn(3, |_, _| 1.0).unwrap();
        assert!(prune(&full, 2).is_err());
        let p = prune(&full, 1).unwrap();
        assert_eq!(p.kept, vec![0, 1, 2]);
        assert_eq!(p.passes, 0);
        // A path 0-1-2-3 plus a triangle 4-5-6: the path unravels over two passes.
        let g = RelationGraph::from_edges(7, [(0, 1), (1, 2), (2, 3), (4, 5), (5, 6), (4, 6)]).unwrap();
        let p = g.prune(1).unwrap();
        assert_eq!(p.kept, vec![4, 5, 6]);
        assert_eq!(p.passes, 2);
        assert_eq!(p.old_to_new[5], Some(1));
        let dense = prune(&g.to_similarity(), 1).unwrap();
        assert_eq!(dense.kept, p.kept);
        assert_eq!(dense.passes, p.passes);
        assert_eq!(dense.value, p.value.to_similarity());
    }

    #[test]
    fn triplets_relate_either_direction() {
        let text = "b\ta\t0.0\na\tc\t0.3\nc\ta\t0.0\n";
        let t = Triplets::read(text.as_bytes()).unwrap();
        assert_eq!(t.ids, ["a", "b", "c"]);
        let g = t.graph(0.0);
        assert_eq!(g.neighbors(0), [2]);
        assert_eq!(g.edge_count(), 1);
        assert!(Triplets::read("a b 1\n".as_bytes()).is_err());
    }

    #[test]
    fn zipf_examples() {
        assert_eq!(zipf_popularity(4, 0.0).unwrap().as_slice(), [0.25; 4]);
        let p = zipf_popularity(2, 1.0).unwrap();
        assert!((p.as_slice()[0] - 2.0 / 3.0).abs() < 1e-15);
        let p = zipf_popularity(3, 0.5).unwrap();
        for (a, b) in p.as_slice().iter().zip([0.4377, 0.3095, 0.2528]) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn synthetic_complete_and_deterministic() {
        let spec = SyntheticSimilaritySpec {
            k: 6,
            mean_related: 5.0,
            seed: 3,
        };
        let u = synthetic_similarity(&spec, 0).unwrap();
        assert_eq!(u, SimilarityMatrix::from_fn(6, |_, _| 1.0).unwrap());
        let spec = SyntheticSimilaritySpec {
            k: 100,
            mean_related: 4.0,
            seed: 11,
        };
        let a = synthetic_similarity(&spec, 4).unwrap();
        assert_eq!(a, synthetic_similarity(&spec, 4).unwrap());
        assert!(a.is_symmetric() && a.is_binary());
        assert!((0..100).all(|i| a.row_sum(i) >= 4.0));
    }

    #[test]
    fn synthetic_mean_degree() {
        let (k, r) = (200usize, 6.0);
        let seeds = 40;
        let mean: f64 = (0..seeds)
            .map(|seed| {
                let g = synthetic_graph(&SyntheticSimilaritySpec { k, mean_related: r, seed }, 0).unwrap();
                2.0 * g.edge_count() as f64 / k as f64
            })
            .sum::<f64>()
            / seeds as f64;
        assert!((mean - r).abs() <= 3.0 * r.sqrt() / (k as f64).sqrt());
    }

    proptest! {
        #[test]
        fn zipf_sorted_and_normalized(k in 1usize..200, s in 0.0f64..2.0) {
            let p = zipf_popularity(k, s).unwrap();
            let p = p.as_slice();
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert!(p.windows(2).all(|w| w[0] >= w[1]));
        }

        #[test]
        fn prune_leaves_rows_above_n(
            k in 3usize..25,
            n in 1usize..4,
            seed in any::<u64>(),
            r in 1.0f64..8.0,
        ) {
            let r = r.min((k - 1) as f64);
            let u = synthetic_similarity(&SyntheticSimilaritySpec { k, mean_related: r, seed }, 0).unwrap();
            if let Ok(p) = prune(&u, n) {
                let m = &p.value;
                prop_assert!((0..m.size()).all(|i| m.row_sum(i) > n as f64));
                for (new, &old) in p.kept.iter().enumerate() {
                    prop_assert_eq!(p.old_to_new[old], Some(new));
                }
                let g = RelationGraph::from_similarity(&u).prune(n).unwrap();
                prop_assert_eq!(&g.kept, &p.kept);
            } else {
                prop_assert!(RelationGraph::from_similarity(&u).prune(n).is_err());
            }
        }
    }
}
