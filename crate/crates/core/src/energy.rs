//! Pairwise matching energy, min-energy search with optional Gumbel
//! perturbation, and the bidirectional energy loss.
//!
//! The energy `w_c |dc|^2 + w_f |df|^2 + w_mu |dmu|^2` is the squared
//! distance between the scaled embeddings `[sqrt(w_c) c, sqrt(w_f) f,
//! sqrt(w_mu) mu]`, so exact min-energy search is a nearest-neighbor query in
//! ten dimensions.

use rand::Rng;
use rand_distr::{Distribution, Gumbel};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::kdtree::{KdTree, Neighbor};
use crate::pointset::Feature;

pub const EMBED_DIM: usize = 10;

pub type Embedding = [f64; EMBED_DIM];

/// Candidates (by clean energy) considered when a perturbation is active.
pub const GUMBEL_CANDIDATES: usize = 8;

/// Below this many queries the search stays on the calling thread.
const PAR_MIN_QUERIES: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnergyConfig {
    pub w_c: f64,
    pub w_f: f64,
    pub w_mu: f64,
    /// Initial Gumbel noise scale; annealed by the trainer.
    pub gumbel_scale: f64,
    pub batch_size: usize,
}

impl Default for EnergyConfig {
    fn default() -> Self {
        EnergyConfig {
            w_c: 1.0,
            w_f: 10.0,
            w_mu: 10.0,
            gumbel_scale: 0.01,
            batch_size: 20_000,
        }
    }
}

impl EnergyConfig {
    pub fn validate(&self) -> Result<()> {
        let ws = [self.w_c, self.w_f, self.w_mu];
        if ws.iter().any(|w| !w.is_finite() || *w < 0.0) || ws.iter().all(|w| *w == 0.0) {
            return Err(Error::Config(format!("energy weights must be nonnegative and not all zero, got {ws:?}")));
        }
        if !(self.gumbel_scale.is_finite() && self.gumbel_scale >= 0.0) {
            return Err(Error::Config(format!("gumbel_scale must be nonnegative, got {}", self.gumbel_scale)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }
}

pub fn energy(
    c_i: &Vec3,
    f_i: &Feature,
    mu_i: &Vec3,
    c_j: &Vec3,
    f_j: &Feature,
    mu_j: &Vec3,
    cfg: &EnergyConfig,
) -> f64 {
    let df: f64 = (0..4).map(|k| (f_i[k] - f_j[k]).powi(2)).sum();
    cfg.w_c * (c_i - c_j).norm_squared() + cfg.w_f * df + cfg.w_mu * (mu_i - mu_j).norm_squared()
}

pub fn embed(c: &Vec3, f: &Feature, mu: &Vec3, cfg: &EnergyConfig) -> Embedding {
    let (sc, sf, sm) = (cfg.w_c.sqrt(), cfg.w_f.sqrt(), cfg.w_mu.sqrt());
    [
        sc * c.x,
        sc * c.y,
        sc * c.z,
        sf * f[0],
        sf * f[1],
        sf * f[2],
        sf * f[3],
        sm * mu.x,
        sm * mu.y,
        sm * mu.z,
    ]
}

/// Colors, reduced features and canonical positions of one side of a match.
#[derive(Debug, Clone, Copy)]
pub struct MatchSide<'a> {
    pub colors: &'a [Vec3],
    pub features: &'a [Feature],
    pub canonical: &'a [Vec3],
}

impl<'a> MatchSide<'a> {
    pub fn new(colors: &'a [Vec3], features: &'a [Feature], canonical: &'a [Vec3]) -> Result<Self> {
        let n = canonical.len();
        if colors.len() != n || features.len() != n {
            return Err(Error::LengthMismatch {
                left: n,
                right: if colors.len() != n { colors.len() } else { features.len() },
            });
        }
        Ok(MatchSide {
            colors,
            features,
            canonical,
        })
    }

    pub fn len(&self) -> usize {
        self.canonical.len()
    }

    pub fn is_empty(&self) -> bool {
        self.canonical.is_empty()
    }

    pub fn embeddings(&self, cfg: &EnergyConfig) -> Vec<Embedding> {
        (0..self.len())
            .map(|i| embed(&self.colors[i], &self.features[i], &self.canonical[i], cfg))
            .collect()
    }
}

/// Result of matching every query against a database.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchSet {
    pub index: Vec<usize>,
    /// Clean energy of the chosen pair.
    pub energy: Vec<f64>,
    /// Energy minus the scaled Gumbel draw that won the selection.
    pub perturbed: Vec<f64>,
}

impl MatchSet {
    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn mean_energy(&self) -> f64 {
        if self.energy.is_empty() {
            0.0
        } else {
            self.energy.iter().sum::<f64>() / self.energy.len() as f64
        }
    }
}

/// Exact nearest-embedding queries over a fixed database, answered in bulk.
/// Results are ordered by `(energy, index)`.
pub trait EmbeddingSearch: Sync {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn nearest_all(&self, queries: &[Embedding]) -> Vec<Neighbor>;

    fn knn_all(&self, queries: &[Embedding], k: usize) -> Vec<Vec<Neighbor>>;
}

impl EmbeddingSearch for KdTree<EMBED_DIM> {
    fn len(&self) -> usize {
        KdTree::len(self)
    }

    fn nearest_all(&self, queries: &[Embedding]) -> Vec<Neighbor> {
        let one = |q: &Embedding| self.nearest(q).expect("non-empty");
        if queries.len() >= PAR_MIN_QUERIES {
            queries.par_iter().map(one).collect()
        } else {
            queries.iter().map(one).collect()
        }
    }

    fn knn_all(&self, queries: &[Embedding], k: usize) -> Vec<Vec<Neighbor>> {
        if queries.len() >= PAR_MIN_QUERIES {
            queries.par_iter().map(|q| self.knn(q, k)).collect()
        } else {
            queries.iter().map(|q| self.knn(q, k)).collect()
        }
    }
}

/// Queries handled per task in [`DenseIndex`] scans.
const DENSE_BLOCK: usize = 64;

/// Independent running minima per row scan; keeps the scan vectorizable.
const LANES: usize = 8;

/// Exhaustive search over a column-major copy of the database.
///
/// Each distance is accumulated in the same order as [`dist2`], so values
/// are bit-identical to a plain double loop; only the loop nest differs.
/// In ten dimensions with a few thousand points a kd-tree prunes little and
/// this is several times faster.
#[derive(Debug, Clone)]
pub struct DenseIndex {
    points: Vec<Embedding>,
    /// `columns[k * M + j]` is coordinate `k` of point `j`.
    columns: Vec<f64>,
}

/// Database points per register block in the distance kernel.
const KERNEL_WIDTH: usize = 32;

#[inline(always)]
fn distance_row_generic(columns: &[f64], m: usize, q: &Embedding, out: &mut [f64]) {
    let cols: [&[f64]; EMBED_DIM] = std::array::from_fn(|k| &columns[k * m..(k + 1) * m]);
    let out = &mut out[..m];
    let whole = m - m % KERNEL_WIDTH;
    for j0 in (0..whole).step_by(KERNEL_WIDTH) {
        let mut acc = [0.0; KERNEL_WIDTH];
        for k in 0..EMBED_DIM {
            let c = &cols[k][j0..j0 + KERNEL_WIDTH];
            for l in 0..KERNEL_WIDTH {
                let d = q[k] - c[l];
                acc[l] += d * d;
            }
        }
        out[j0..j0 + KERNEL_WIDTH].copy_from_slice(&acc);
    }
    for j in whole..m {
        let mut acc = 0.0;
        for k in 0..EMBED_DIM {
            let d = q[k] - cols[k][j];
            acc += d * d;
        }
        out[j] = acc;
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f")]
unsafe fn distance_row_avx512(columns: &[f64], m: usize, q: &Embedding, out: &mut [f64]) {
    distance_row_generic(columns, m, q, out)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn distance_row_avx2(columns: &[f64], m: usize, q: &Embedding, out: &mut [f64]) {
    distance_row_generic(columns, m, q, out)
}

/// Squared distances from `q` to every database point.
fn distance_row(columns: &[f64], m: usize, q: &Embedding, out: &mut [f64]) {
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("avx512f") {
            // SAFETY: the CPU supports the enabled feature.
            return unsafe { distance_row_avx512(columns, m, q, out) };
        }
        if std::arch::is_x86_feature_detected!("avx2") {
            // SAFETY: as above.
            return unsafe { distance_row_avx2(columns, m, q, out) };
        }
    }
    distance_row_generic(columns, m, q, out)
}

/// Minimum of each lane, where element `j` belongs to lane `j % LANES`.
/// Lane minima are distinct elements, so the `k`-th smallest of them bounds
/// the `k`-th smallest value of the row from above.
#[inline]
fn lane_minima(row: &[f64]) -> [f64; LANES] {
    let mut acc = [f64::INFINITY; LANES];
    let chunks = row.chunks_exact(LANES);
    let rest = chunks.remainder();
    for c in chunks {
        for l in 0..LANES {
            acc[l] = if c[l] < acc[l] { c[l] } else { acc[l] };
        }
    }
    for (l, &v) in rest.iter().enumerate() {
        acc[l] = if v < acc[l] { v } else { acc[l] };
    }
    acc
}

impl DenseIndex {
    pub fn new(points: Vec<Embedding>) -> DenseIndex {
        let m = points.len();
        let mut columns = vec![0.0; EMBED_DIM * m];
        for (j, p) in points.iter().enumerate() {
            for k in 0..EMBED_DIM {
                columns[k * m + j] = p[k];
            }
        }
        DenseIndex { points, columns }
    }

    fn scan<T: Send>(&self, queries: &[Embedding], per_row: impl Fn(&[f64]) -> T + Sync) -> Vec<T> {
        let m = self.points.len();
        let block = |chunk: &[Embedding]| -> Vec<T> {
            let mut row = vec![0.0; m];
            chunk
                .iter()
                .map(|q| {
                    distance_row(&self.columns, m, q, &mut row);
                    per_row(&row)
                })
                .collect()
        };
        if queries.len() >= PAR_MIN_QUERIES {
            queries.par_chunks(DENSE_BLOCK).flat_map_iter(block).collect()
        } else {
            block(queries)
        }
    }
}

impl EmbeddingSearch for DenseIndex {
    fn len(&self) -> usize {
        self.points.len()
    }

    fn nearest_all(&self, queries: &[Embedding]) -> Vec<Neighbor> {
        self.scan(queries, |row| {
            let lo = lane_minima(row).iter().copied().fold(f64::INFINITY, f64::min);
            let index = row.iter().position(|&d| d == lo).unwrap_or(0);
            Neighbor { index, dist2: row[index] }
        })
    }

    fn knn_all(&self, queries: &[Embedding], k: usize) -> Vec<Vec<Neighbor>> {
        let k = k.min(self.points.len());
        if k == 0 {
            return vec![Vec::new(); queries.len()];
        }
        self.scan(queries, |row| row_top_k(row, k))
    }
}

/// The `k` smallest entries of a distance row, by `(energy, index)`.
#[inline(always)]
fn row_top_k(row: &[f64], k: usize) -> Vec<Neighbor> {
    if k == 1 {
        let lo = lane_minima(row).iter().copied().fold(f64::INFINITY, f64::min);
        let index = row.iter().position(|&d| d == lo).unwrap_or(0);
        return vec![Neighbor { index, dist2: row[index] }];
    }
    let mut value = vec![f64::INFINITY; k];
    let mut index = vec![usize::MAX; k];
    let mut cut = f64::INFINITY;
    let mut insert = |j: usize, d: f64, cut: &mut f64| {
        let mut p = k - 1;
        while p > 0 && value[p - 1] > d {
            value[p] = value[p - 1];
            index[p] = index[p - 1];
            p -= 1;
        }
        value[p] = d;
        index[p] = j;
        *cut = value[k - 1];
    };
    let chunks = row.chunks_exact(LANES);
    let whole = row.len() - chunks.remainder().len();
    for (c, chunk) in chunks.enumerate() {
        let chunk: &[f64; LANES] = chunk.try_into().expect("chunk width");
        let mut hit = false;
        for &d in chunk {
            hit |= d < cut;
        }
        if hit {
            for (l, &d) in chunk.iter().enumerate() {
                if d < cut {
                    insert(c * LANES + l, d, &mut cut);
                }
            }
        }
    }
    for (j, &d) in row.iter().enumerate().skip(whole) {
        if d < cut {
            insert(j, d, &mut cut);
        }
    }
    let mut out: Vec<Neighbor> = index
        .iter()
        .zip(&value)
        .filter(|(&i, _)| i != usize::MAX)
        .map(|(&index, &dist2)| Neighbor { index, dist2 })
        .collect();
    if out.len() < k.min(row.len()) {
        // NaN distances never beat the cut; surface them so the loss goes
        // non-finite instead of silently dropping candidates
        let missing = row.iter().enumerate().filter(|(_, d)| d.is_nan()).map(|(index, &dist2)| Neighbor { index, dist2 });
        out.extend(missing.take(k.min(row.len()) - out.len()));
    }
    out
}

/// Running top-`k` of every database column over the query rows seen so
/// far. Rows arrive in increasing order, so strict comparisons keep ties
/// on the lowest row.
struct ColumnTops {
    k: usize,
    value: Vec<f64>,
    row: Vec<usize>,
    /// Current `k`-th smallest value of each column.
    cut: Vec<f64>,
}

impl ColumnTops {
    fn new(m: usize, k: usize) -> ColumnTops {
        ColumnTops {
            k,
            value: vec![f64::INFINITY; m * k],
            row: vec![usize::MAX; m * k],
            cut: vec![f64::INFINITY; m],
        }
    }

    #[inline(never)]
    fn insert(&mut self, i: usize, j: usize, d: f64) {
        let k = self.k;
        let base = j * k;
        let mut p = k - 1;
        while p > 0 && self.value[base + p - 1] > d {
            self.value[base + p] = self.value[base + p - 1];
            self.row[base + p] = self.row[base + p - 1];
            p -= 1;
        }
        self.value[base + p] = d;
        self.row[base + p] = i;
        self.cut[j] = self.value[base + k - 1];
    }

    #[inline(always)]
    fn offer(&mut self, i: usize, distances: &[f64]) {
        let whole = distances.len() - distances.len() % LANES;
        for j0 in (0..whole).step_by(LANES) {
            // most chunks beat no cut; test them all at once
            let d: &[f64; LANES] = distances[j0..j0 + LANES].try_into().expect("chunk width");
            let c: &[f64; LANES] = self.cut[j0..j0 + LANES].try_into().expect("chunk width");
            let mut hit = false;
            for l in 0..LANES {
                hit |= d[l] < c[l];
            }
            if hit {
                for l in 0..LANES {
                    if d[l] < self.cut[j0 + l] {
                        self.insert(i, j0 + l, d[l]);
                    }
                }
            }
        }
        for (j, &d) in distances.iter().enumerate().skip(whole) {
            if d < self.cut[j] {
                self.insert(i, j, d);
            }
        }
    }

    /// Merges tops computed over a later range of rows.
    fn merge(mut self, later: ColumnTops) -> ColumnTops {
        let k = self.k;
        let mut value = Vec::with_capacity(k);
        let mut row = Vec::with_capacity(k);
        for j in 0..self.cut.len() {
            let base = j * k;
            value.clear();
            row.clear();
            let (mut a, mut b) = (base, base);
            while value.len() < k {
                let take_a = b == base + k || (a < base + k && self.value[a] <= later.value[b]);
                if take_a {
                    value.push(self.value[a]);
                    row.push(self.row[a]);
                    a += 1;
                } else {
                    value.push(later.value[b]);
                    row.push(later.row[b]);
                    b += 1;
                }
            }
            self.value[base..base + k].copy_from_slice(&value);
            self.row[base..base + k].copy_from_slice(&row);
            self.cut[j] = value[k - 1];
        }
        self
    }

    fn into_lists(self) -> Vec<Vec<Neighbor>> {
        let k = self.k;
        (0..self.cut.len())
            .map(|j| {
                (j * k..(j + 1) * k)
                    .filter(|&p| self.row[p] != usize::MAX)
                    .map(|p| Neighbor {
                        index: self.row[p],
                        dist2: self.value[p],
                    })
                    .collect()
            })
            .collect()
    }
}

#[inline(always)]
fn mutual_row_generic(columns: &[f64], q: &Embedding, i: usize, row: &mut [f64], tops: &mut ColumnTops, k: usize) -> Vec<Neighbor> {
    distance_row_generic(columns, row.len(), q, row);
    tops.offer(i, row);
    row_top_k(row, k)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f")]
unsafe fn mutual_row_avx512(columns: &[f64], q: &Embedding, i: usize, row: &mut [f64], tops: &mut ColumnTops, k: usize) -> Vec<Neighbor> {
    mutual_row_generic(columns, q, i, row, tops, k)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn mutual_row_avx2(columns: &[f64], q: &Embedding, i: usize, row: &mut [f64], tops: &mut ColumnTops, k: usize) -> Vec<Neighbor> {
    mutual_row_generic(columns, q, i, row, tops, k)
}

/// Distances from query `i`, offered to the column tops, and the row's
/// own top `k`.
fn mutual_row(columns: &[f64], q: &Embedding, i: usize, row: &mut [f64], tops: &mut ColumnTops, k: usize) -> Vec<Neighbor> {
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("avx512f") {
            // SAFETY: the CPU supports the enabled feature.
            return unsafe { mutual_row_avx512(columns, q, i, row, tops, k) };
        }
        if std::arch::is_x86_feature_detected!("avx2") {
            // SAFETY: as above.
            return unsafe { mutual_row_avx2(columns, q, i, row, tops, k) };
        }
    }
    mutual_row_generic(columns, q, i, row, tops, k)
}

impl DenseIndex {
    /// Top-`k` database points of every query and top-`k` queries of every
    /// database point, from a single pass over all distances.
    ///
    /// Each worker scans one contiguous range of queries and keeps its own
    /// column state; the states merge in range order, so the result does not
    /// depend on the thread count.
    pub fn mutual_knn(&self, queries: &[Embedding], k: usize) -> (Vec<Vec<Neighbor>>, Vec<Vec<Neighbor>>) {
        let m = self.points.len();
        let n = queries.len();
        let (kr, kc) = (k.min(m), k.min(n));
        if kr == 0 || kc == 0 {
            return (vec![Vec::new(); n], vec![Vec::new(); m]);
        }
        let range = |(c, chunk): (usize, &[Embedding]), first: usize| -> (Vec<Vec<Neighbor>>, ColumnTops) {
            let mut row = vec![0.0; m];
            let mut tops = ColumnTops::new(m, kc);
            let rows = chunk
                .iter()
                .enumerate()
                .map(|(r, q)| mutual_row(&self.columns, q, c * first + r, &mut row, &mut tops, kr))
                .collect();
            (rows, tops)
        };
        let workers = rayon::current_num_threads();
        let parts: Vec<(Vec<Vec<Neighbor>>, ColumnTops)> = if workers > 1 && n >= PAR_MIN_QUERIES {
            let span = n.div_ceil(workers).max(DENSE_BLOCK);
            queries.par_chunks(span).enumerate().map(|p| range(p, span)).collect()
        } else {
            vec![range((0, queries), 0)]
        };
        let mut rows = Vec::with_capacity(n);
        let mut tops: Option<ColumnTops> = None;
        for (r, t) in parts {
            rows.extend(r);
            tops = Some(match tops {
                None => t,
                Some(acc) => acc.merge(t),
            });
        }
        (rows, tops.expect("non-empty").into_lists())
    }
}

/// Picks from each candidate list the entry minimizing `E - s G`, one
/// Gumbel draw per candidate in list order. With `s = 0` the head of each
/// list wins.
fn perturbed_select<R: Rng + ?Sized>(lists: Vec<Vec<Neighbor>>, gumbel_scale: f64, rng: &mut R) -> MatchSet {
    let n = lists.len();
    let mut out = MatchSet {
        index: Vec::with_capacity(n),
        energy: Vec::with_capacity(n),
        perturbed: Vec::with_capacity(n),
    };
    let gumbel = Gumbel::new(0.0, 1.0).expect("valid parameters");
    for list in lists {
        let mut best = (f64::INFINITY, usize::MAX, 0.0);
        if gumbel_scale == 0.0 {
            best = (list[0].dist2, list[0].index, list[0].dist2);
        } else {
            for c in list {
                let p = c.dist2 - gumbel_scale * gumbel.sample(rng);
                if p < best.0 || (p == best.0 && c.index < best.1) {
                    best = (p, c.index, c.dist2);
                }
            }
        }
        out.index.push(best.1);
        out.energy.push(best.2);
        out.perturbed.push(best.0);
    }
    out
}

/// For each query, the database entry minimizing `E - s G` with `G ~
/// Gumbel(0, 1)` drawn independently per candidate, over the
/// [`GUMBEL_CANDIDATES`] lowest clean energies. With `s = 0` this is the
/// exact argmin, lowest index on ties.
///
/// Noise is drawn in query order, so results depend only on the RNG state.
pub fn min_energy_match<S: EmbeddingSearch + ?Sized, R: Rng + ?Sized>(
    queries: &[Embedding],
    database: &S,
    gumbel_scale: f64,
    rng: &mut R,
) -> Result<MatchSet> {
    if database.is_empty() {
        return Err(Error::EmptyDatabase);
    }
    let lists = if gumbel_scale == 0.0 {
        database.nearest_all(queries).into_iter().map(|h| vec![h]).collect()
    } else {
        database.knn_all(queries, GUMBEL_CANDIDATES)
    };
    Ok(perturbed_select(lists, gumbel_scale, rng))
}

/// Convenience wrapper: match `queries` against `database` directly.
pub fn match_sides<R: Rng + ?Sized>(
    queries: &MatchSide,
    database: &MatchSide,
    cfg: &EnergyConfig,
    gumbel_scale: f64,
    rng: &mut R,
) -> Result<MatchSet> {
    let index = DenseIndex::new(database.embeddings(cfg));
    min_energy_match(&queries.embeddings(cfg), &index, gumbel_scale, rng)
}

#[derive(Debug, Clone)]
pub struct EnergyLoss {
    pub value: f64,
    /// Matches of side `a` into side `b`.
    pub forward: MatchSet,
    /// Matches of side `b` into side `a`.
    pub backward: MatchSet,
    /// `dL/d mu_hat` for side `a`.
    pub grad_a: Vec<Vec3>,
    pub grad_b: Vec<Vec3>,
}

/// Sum of min-energy costs from `a` into `b` plus from `b` into `a`.
///
/// Matches are chosen on perturbed energies, the loss sums the clean
/// energies of the chosen pairs, and gradients reach the canonical positions
/// at both ends of every pair. Match indices are constants.
pub fn bidirectional_energy_loss<R: Rng + ?Sized>(
    a: &MatchSide,
    b: &MatchSide,
    cfg: &EnergyConfig,
    gumbel_scale: f64,
    rng: &mut R,
) -> Result<EnergyLoss> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let ea = a.embeddings(cfg);
    let eb = b.embeddings(cfg);
    let k = if gumbel_scale == 0.0 { 1 } else { GUMBEL_CANDIDATES };
    let (rows, columns) = DenseIndex::new(eb).mutual_knn(&ea, k);
    let forward = perturbed_select(rows, gumbel_scale, rng);
    let backward = perturbed_select(columns, gumbel_scale, rng);
    Ok(accumulate(a, b, forward, backward, cfg))
}

/// The bidirectional loss for given match indices, without any search.
pub fn frozen_energy_loss(
    a: &MatchSide,
    b: &MatchSide,
    forward: &[usize],
    backward: &[usize],
    cfg: &EnergyConfig,
) -> Result<EnergyLoss> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if forward.len() != a.len() || backward.len() != b.len() {
        return Err(Error::LengthMismatch {
            left: forward.len() + backward.len(),
            right: a.len() + b.len(),
        });
    }
    if forward.iter().any(|&j| j >= b.len()) || backward.iter().any(|&i| i >= a.len()) {
        return Err(Error::Config("match index out of range".into()));
    }
    let set = |q: &MatchSide, d: &MatchSide, idx: &[usize]| {
        let energy: Vec<f64> = idx
            .iter()
            .enumerate()
            .map(|(i, &j)| energy(&q.colors[i], &q.features[i], &q.canonical[i], &d.colors[j], &d.features[j], &d.canonical[j], cfg))
            .collect();
        MatchSet {
            index: idx.to_vec(),
            perturbed: energy.clone(),
            energy,
        }
    };
    let forward = set(a, b, forward);
    let backward = set(b, a, backward);
    Ok(accumulate(a, b, forward, backward, cfg))
}

fn accumulate(a: &MatchSide, b: &MatchSide, forward: MatchSet, backward: MatchSet, cfg: &EnergyConfig) -> EnergyLoss {
    let mut grad_a = vec![Vec3::zeros(); a.len()];
    let mut grad_b = vec![Vec3::zeros(); b.len()];
    let mut value = 0.0;
    let two_w = 2.0 * cfg.w_mu;
    for (i, (&j, &e)) in forward.index.iter().zip(&forward.energy).enumerate() {
        value += e;
        let g = two_w * (a.canonical[i] - b.canonical[j]);
        grad_a[i] += g;
        grad_b[j] -= g;
    }
    for (j, (&i, &e)) in backward.index.iter().zip(&backward.energy).enumerate() {
        value += e;
        let g = two_w * (b.canonical[j] - a.canonical[i]);
        grad_b[j] += g;
        grad_a[i] -= g;
    }
    EnergyLoss {
        value,
        forward,
        backward,
        grad_a,
        grad_b,
    }
}
