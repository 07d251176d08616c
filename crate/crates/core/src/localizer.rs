//! Localization weights over calibration embeddings.
//!
//! Three weighting modes: uniform weights over a fixed-radius ball,
//! exponential weights over the `k` nearest neighbors, and exponential
//! weights over every calibration point (the all-neighbors ablation).
//! Neighbor search is an exact linear scan or a p-stable LSH index; LSH
//! recall is a measured property, not a guarantee.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::num::{dist_sq, Real};
use crate::seeding::{self, Domain};
use crate::types::{Anchor, WeightVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LocalizerMode {
    /// Uniform weights over calibration points within radius `B`.
    Ball,
    /// Exponential weights over the `k` nearest neighbors.
    KnnExp,
    /// Exponential weights over every calibration point.
    AllExp,
}

impl LocalizerMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            LocalizerMode::Ball => "ball",
            LocalizerMode::KnnExp => "knn",
            LocalizerMode::AllExp => "all",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SearchBackend {
    Exact,
    Lsh,
}

impl SearchBackend {
    pub fn as_str(&self) -> &'static str {
        match self {
            SearchBackend::Exact => "exact",
            SearchBackend::Lsh => "lsh",
        }
    }
}

/// p-stable LSH parameters. A bucket width of zero requests the automatic
/// rule: median pairwise distance (seeded sample) divided by four.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LshParams {
    pub tables: usize,
    pub projections: usize,
    pub bucket_width: f64,
}

impl Default for LshParams {
    fn default() -> Self {
        LshParams {
            tables: 8,
            projections: 8,
            bucket_width: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalizerConfig {
    pub mode: LocalizerMode,
    /// Ball radius `B` (Ball mode).
    pub radius: f64,
    /// Neighbor count as a fraction of the calibration size (KnnExp mode);
    /// the effective count is `ceil(k_frac * n)` clamped to `[1, n]`.
    pub k_frac: f64,
    /// Exponential length scale (KnnExp and AllExp modes).
    pub lambda_l: f64,
    pub search: SearchBackend,
    pub lsh: LshParams,
    /// Seed for LSH table construction.
    pub seed: u64,
}

impl LocalizerConfig {
    pub fn knn(k_frac: f64, lambda_l: f64) -> Self {
        LocalizerConfig {
            mode: LocalizerMode::KnnExp,
            radius: 0.0,
            k_frac,
            lambda_l,
            search: SearchBackend::Exact,
            lsh: LshParams::default(),
            seed: 0,
        }
    }

    pub fn all(lambda_l: f64) -> Self {
        LocalizerConfig {
            mode: LocalizerMode::AllExp,
            lambda_l,
            ..LocalizerConfig::knn(1.0, lambda_l)
        }
    }

    pub fn ball(radius: f64) -> Self {
        LocalizerConfig {
            mode: LocalizerMode::Ball,
            radius,
            ..LocalizerConfig::knn(1.0, 1.0)
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.mode {
            LocalizerMode::Ball => {
                if !self.radius.is_finite() || self.radius <= 0.0 {
                    return Err(Error::invalid("ball radius must be positive and finite"));
                }
            }
            LocalizerMode::KnnExp => {
                if !(self.k_frac > 0.0 && self.k_frac <= 1.0) {
                    return Err(Error::invalid("k_frac must lie in (0, 1]"));
                }
                if !self.lambda_l.is_finite() || self.lambda_l <= 0.0 {
                    return Err(Error::invalid("lambda_l must be positive and finite"));
                }
            }
            LocalizerMode::AllExp => {
                if !self.lambda_l.is_finite() || self.lambda_l <= 0.0 {
                    return Err(Error::invalid("lambda_l must be positive and finite"));
                }
            }
        }
        if self.lsh.tables == 0 || self.lsh.projections == 0 {
            return Err(Error::invalid("LSH needs at least one table and projection"));
        }
        Ok(())
    }

    /// Effective neighbor count at calibration size `n`.
    pub fn k_for(&self, n: usize) -> usize {
        ((self.k_frac * n as f64).ceil() as usize).clamp(1, n)
    }
}

/// Flat row-major storage of calibration embeddings.
#[derive(Debug, Clone)]
struct PointStore<T> {
    data: Vec<T>,
    n: usize,
    dim: usize,
}

impl<T: Real> PointStore<T> {
    fn from_rows(rows: &[&[T]]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::invalid("cannot index zero embeddings"));
        }
        let dim = rows[0].len();
        if dim == 0 {
            return Err(Error::invalid("embedding dimension must be >= 1"));
        }
        let mut data = Vec::with_capacity(rows.len() * dim);
        for row in rows {
            if row.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Ok(PointStore {
            data,
            n: rows.len(),
            dim,
        })
    }

    fn point(&self, i: usize) -> &[T] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

/// One LSH hash table: `projections` is a `P x dim` row-major matrix of
/// Gaussian directions, `offsets` the uniform shifts, and `buckets` maps the
/// quantized key to point indices in insertion order.
#[derive(Debug, Clone)]
struct LshTable {
    projections: Vec<f64>,
    offsets: Vec<f64>,
    buckets: HashMap<Vec<i64>, Vec<usize>>,
}

#[derive(Debug, Clone)]
pub struct LshIndex<T> {
    store: PointStore<T>,
    tables: Vec<LshTable>,
    width: f64,
}

impl<T: Real> LshIndex<T> {
    fn key(&self, table: &LshTable, point: &[T]) -> Vec<i64> {
        let p = table.offsets.len();
        let dim = self.store.dim;
        let mut key = Vec::with_capacity(p);
        for j in 0..p {
            let row = &table.projections[j * dim..(j + 1) * dim];
            let mut dot = 0.0;
            for (g, x) in row.iter().zip(point.iter()) {
                dot += g * x.as_f64();
            }
            key.push(((dot + table.offsets[j]) / self.width).floor() as i64);
        }
        key
    }

    /// Candidate indices: the union of the query's buckets across tables,
    /// sorted and deduplicated.
    fn candidates(&self, query: &[T]) -> Vec<usize> {
        let mut out = Vec::new();
        for table in &self.tables {
            if let Some(bucket) = table.buckets.get(&self.key(table, query)) {
                out.extend_from_slice(bucket);
            }
        }
        out.sort_unstable();
        out.dedup();
        out
    }
}

/// Neighbor index over calibration embeddings; immutable once built.
#[derive(Debug, Clone)]
pub enum NeighborIndex<T> {
    Exact(PointStoreHandle<T>),
    Lsh(LshIndex<T>),
}

/// Public handle for the exact backend's storage.
#[derive(Debug, Clone)]
pub struct PointStoreHandle<T> {
    store: PointStore<T>,
}

impl<T: Real> NeighborIndex<T> {
    pub fn len(&self) -> usize {
        self.store().n
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.store().dim
    }

    pub fn point(&self, i: usize) -> &[T] {
        self.store().point(i)
    }

    fn store(&self) -> &PointStore<T> {
        match self {
            NeighborIndex::Exact(h) => &h.store,
            NeighborIndex::Lsh(l) => &l.store,
        }
    }
}

/// Builds a neighbor index over calibration embeddings.
///
/// The exact backend stores points for a linear scan. The LSH backend hashes
/// each point to `floor((g_j . x + b_j) / w)` tuples per table with Gaussian
/// `g_j` and uniform offsets `b_j in [0, w)`; tables are deterministic in
/// `config.seed`.
pub fn build_index<T: Real>(
    embeddings: &[&[T]],
    config: &LocalizerConfig,
) -> Result<NeighborIndex<T>> {
    config.validate()?;
    let store = PointStore::from_rows(embeddings)?;
    match config.search {
        SearchBackend::Exact => Ok(NeighborIndex::Exact(PointStoreHandle { store })),
        SearchBackend::Lsh => {
            let width = if config.lsh.bucket_width > 0.0 {
                config.lsh.bucket_width
            } else {
                let median = median_pairwise_distance(&store, config.seed);
                if median > 0.0 {
                    median / 4.0
                } else {
                    1.0 // all points identical; any width hashes them together
                }
            };
            let dim = store.dim;
            let mut tables = Vec::with_capacity(config.lsh.tables);
            for t in 0..config.lsh.tables {
                let mut rng = seeding::rng(config.seed, Domain::Lsh, t as u64);
                let p = config.lsh.projections;
                let mut projections = Vec::with_capacity(p * dim);
                for _ in 0..p * dim {
                    let g: f64 = StandardNormal.sample(&mut rng);
                    projections.push(g);
                }
                let offsets: Vec<f64> = (0..p).map(|_| rng.random::<f64>() * width).collect();
                tables.push(LshTable {
                    projections,
                    offsets,
                    buckets: HashMap::new(),
                });
            }
            let mut index = LshIndex {
                store,
                tables,
                width,
            };
            for i in 0..index.store.n {
                for t in 0..index.tables.len() {
                    let key = index.key(&index.tables[t], index.store.point(i));
                    index.tables[t].buckets.entry(key).or_default().push(i);
                }
            }
            Ok(NeighborIndex::Lsh(index))
        }
    }
}

/// Median pairwise distance over a seeded sample of point pairs.
fn median_pairwise_distance<T: Real>(store: &PointStore<T>, seed: u64) -> f64 {
    let mut rng = seeding::rng(seed, Domain::Diagnostics, 0);
    let n = store.n;
    let pairs = 1000.min(n * n.saturating_sub(1) / 2).max(1);
    let mut dists = Vec::with_capacity(pairs);
    for _ in 0..pairs {
        let i = rng.random_range(0..n);
        let j = rng.random_range(0..n);
        dists.push(dist_sq(store.point(i), store.point(j)).as_f64().sqrt());
    }
    dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
    dists[dists.len() / 2]
}

/// `k` nearest neighbors of `query`, ascending by `(distance, index)`.
///
/// The exact backend returns the true neighbors (all `n` when `k >= n`).
/// The LSH backend ranks exact distances over the candidate union and may
/// return fewer than `k`.
pub fn knn<T: Real>(
    index: &NeighborIndex<T>,
    query: &[T],
    k: usize,
) -> Result<Vec<(usize, T)>> {
    if k == 0 {
        return Err(Error::invalid("k must be >= 1"));
    }
    if query.len() != index.dim() {
        return Err(Error::DimensionMismatch {
            expected: index.dim(),
            got: query.len(),
        });
    }
    let rank = |ids: &mut dyn Iterator<Item = usize>| -> Vec<(usize, T)> {
        let mut scored: Vec<(usize, T)> = ids
            .map(|i| (i, dist_sq(index.point(i), query)))
            .collect();
        let take = k.min(scored.len());
        if take < scored.len() {
            scored.select_nth_unstable_by(take - 1, |a, b| {
                crate::num::cmp_real(&a.1, &b.1).then(a.0.cmp(&b.0))
            });
            scored.truncate(take);
        }
        scored.sort_by(|a, b| crate::num::cmp_real(&a.1, &b.1).then(a.0.cmp(&b.0)));
        scored.into_iter().map(|(i, d2)| (i, d2.sqrt())).collect()
    };
    match index {
        NeighborIndex::Exact(_) => Ok(rank(&mut (0..index.len()))),
        NeighborIndex::Lsh(lsh) => {
            let candidates = lsh.candidates(query);
            Ok(rank(&mut candidates.into_iter()))
        }
    }
}

/// Exponential-kernel weights `exp(-dist / lambda_l)` over the anchor's
/// neighbor set (`k` nearest in KnnExp mode, all points in AllExp mode),
/// normalized to sum to one; non-neighbors carry exactly zero weight by
/// omission from the sparse vector.
pub fn knn_exp_weights<T: Real>(
    index: &NeighborIndex<T>,
    anchor: &[T],
    anchor_id: Anchor,
    config: &LocalizerConfig,
) -> Result<WeightVector<T>> {
    if !matches!(config.mode, LocalizerMode::KnnExp | LocalizerMode::AllExp) {
        return Err(Error::invalid("exponential weights need knn or all mode"));
    }
    config.validate()?;
    let k = match config.mode {
        LocalizerMode::KnnExp => config.k_for(index.len()),
        _ => index.len(),
    };
    let neighbors = knn(index, anchor, k)?;
    if neighbors.is_empty() {
        return Err(Error::EmptyNeighborhood(
            "neighbor search returned no candidates".into(),
        ));
    }
    exp_weights_from_neighbors(&neighbors, anchor_id, config.lambda_l)
}

fn exp_weights_from_neighbors<T: Real>(
    neighbors: &[(usize, T)],
    anchor_id: Anchor,
    lambda_l: f64,
) -> Result<WeightVector<T>> {
    // Shift by the nearest distance before exponentiating; the shift cancels
    // under normalization and keeps far anchors from underflowing to 0/0.
    let lambda = T::of(lambda_l);
    let min_d = neighbors[0].1;
    let raw: Vec<(usize, T)> = neighbors
        .iter()
        .map(|&(i, d)| (i, (-(d - min_d) / lambda).exp()))
        .collect();
    let total = crate::num::sum(raw.iter().map(|(_, w)| *w));
    WeightVector::new(
        anchor_id,
        raw.into_iter().map(|(i, w)| (i, w / total)).collect(),
    )
}

/// Uniform weights over calibration points within distance `B` of the
/// anchor. Errs with [`Error::EmptyNeighborhood`] when the ball is empty;
/// callers fall back to the nearest neighbor via [`weights_for_anchor`].
pub fn ball_weights<T: Real>(
    index: &NeighborIndex<T>,
    anchor: &[T],
    anchor_id: Anchor,
    config: &LocalizerConfig,
) -> Result<WeightVector<T>> {
    if config.mode != LocalizerMode::Ball {
        return Err(Error::invalid("ball weights need ball mode"));
    }
    config.validate()?;
    if anchor.len() != index.dim() {
        return Err(Error::DimensionMismatch {
            expected: index.dim(),
            got: anchor.len(),
        });
    }
    let radius_sq = T::of(config.radius * config.radius);
    let inside: Vec<usize> = (0..index.len())
        .filter(|&i| dist_sq(index.point(i), anchor) <= radius_sq)
        .collect();
    if inside.is_empty() {
        return Err(Error::EmptyNeighborhood(format!(
            "no calibration example within radius {}",
            config.radius
        )));
    }
    let w = T::one() / T::of(inside.len() as f64);
    WeightVector::new(anchor_id, inside.into_iter().map(|i| (i, w)).collect())
}

/// Localization weights for one anchor under any mode, applying the ball
/// mode's nearest-neighbor fallback. Returns the weights and whether the
/// fallback fired.
pub fn weights_for_anchor<T: Real>(
    index: &NeighborIndex<T>,
    anchor: &[T],
    anchor_id: Anchor,
    config: &LocalizerConfig,
) -> Result<(WeightVector<T>, bool)> {
    match config.mode {
        LocalizerMode::Ball => match ball_weights(index, anchor, anchor_id, config) {
            Ok(w) => Ok((w, false)),
            Err(Error::EmptyNeighborhood(_)) => {
                let nearest = knn(index, anchor, 1)?;
                let w = WeightVector::new(anchor_id, vec![(nearest[0].0, T::one())])?;
                Ok((w, true))
            }
            Err(e) => Err(e),
        },
        LocalizerMode::KnnExp | LocalizerMode::AllExp => {
            Ok((knn_exp_weights(index, anchor, anchor_id, config)?, false))
        }
    }
}
