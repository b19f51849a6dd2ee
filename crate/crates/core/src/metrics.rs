//! Geometry metrics over interpolation sweeps: earth mover's distance,
//! multiscale potential energy discrepancy, and their progress-weighted
//! aggregates.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::kdtree::KdTree;

pub const REPORT_FORMAT: &str = "gmc-metrics";
pub const REPORT_VERSION: u32 = 1;
/// Aggregates are reported multiplied by this.
pub const REPORT_SCALE: f64 = 1e3;
pub const DEFAULT_SUBSAMPLE: usize = 1024;
pub const DEFAULT_MPED_FRACTIONS: [f64; 3] = [0.001, 0.005, 0.01];

/// Minimum-cost assignment of every row to a distinct column of a
/// row-major `rows x cols` matrix with `rows <= cols`. Returns the column of
/// each row and the total cost.
///
/// Shortest augmenting paths with dual potentials, `O(rows^2 cols)`.
pub fn assignment(cost: &[f64], rows: usize, cols: usize) -> Result<(Vec<usize>, f64)> {
    if cost.len() != rows * cols {
        return Err(Error::shape(format!("{rows} x {cols} = {} entries", rows * cols), cost.len()));
    }
    if rows > cols {
        return Err(Error::Config(format!("assignment needs rows <= cols, got {rows} x {cols}")));
    }
    if let Some(c) = cost.iter().find(|c| !c.is_finite()) {
        return Err(Error::NonFinite(format!("assignment cost {c}")));
    }
    // 1-based internally: column 0 is the virtual start of every path
    let m = cols;
    let mut u = vec![0.0; rows + 1];
    let mut v = vec![0.0; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    let mut minv = vec![0.0; m + 1];
    let mut used = vec![false; m + 1];
    for i in 1..=rows {
        owner[0] = i;
        let mut j0 = 0;
        minv.fill(f64::INFINITY);
        used.fill(false);
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let row = &cost[(i0 - 1) * cols..i0 * cols];
            let ui = u[i0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = row[j - 1] - ui - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut of_row = vec![0; rows];
    for j in 1..=m {
        if owner[j] != 0 {
            of_row[owner[j] - 1] = j - 1;
        }
    }
    let total = of_row.iter().enumerate().map(|(i, &j)| cost[i * cols + j]).sum();
    Ok((of_row, total))
}

fn subsample(points: &[Vec3], s: usize, seed: u64) -> Vec<Vec3> {
    if s >= points.len() {
        return points.to_vec();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample(&mut rng, points.len(), s).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| points[i]).collect()
}

/// Mean Euclidean cost of the optimal one-to-one matching between seeded
/// uniform subsamples of `p` and `q`, both of size `min(|p|, |q|,
/// subsample)`. Both clouds are subsampled with the same seed.
pub fn emd(p: &[Vec3], q: &[Vec3], subsample_size: usize, seed: u64) -> Result<f64> {
    if p.is_empty() || q.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let s = p.len().min(q.len()).min(subsample_size.max(1));
    let a = subsample(p, s, seed);
    let b = subsample(q, s, seed);
    let mut cost = vec![0.0; s * s];
    for (i, x) in a.iter().enumerate() {
        for (j, y) in b.iter().enumerate() {
            cost[i * s + j] = (x - y).norm();
        }
    }
    let (_, total) = assignment(&cost, s, s)?;
    Ok(total / s as f64)
}

/// Neighborhood size for a fraction of `n` points, excluding the point
/// itself.
pub fn scale_neighbors(fraction: f64, n: usize) -> usize {
    let k = ((fraction * n as f64).round() as usize).max(1);
    k.min(n.saturating_sub(1))
}

/// Sum of squared distances from each point to its `k` nearest other points.
pub fn local_potentials(points: &[Vec3], tree: &KdTree<3>, k: usize) -> Vec<f64> {
    if k == 0 {
        return vec![0.0; points.len()];
    }
    points
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            tree.knn(&[p.x, p.y, p.z], k + 1)
                .into_iter()
                .filter(|n| n.index != i)
                .take(k)
                .map(|n| n.dist2)
                .sum()
        })
        .collect()
}

fn tree3(points: &[Vec3]) -> KdTree<3> {
    KdTree::new(points.iter().map(|p| [p.x, p.y, p.z]).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mped {
    pub total: f64,
    /// One term per neighborhood fraction.
    pub terms: Vec<f64>,
}

/// For each fraction: mean over `q` of `|pot_P(NN_P(q)) - pot_Q(q)|`, with
/// per-cloud neighborhood sizes. The total sums the terms.
pub fn mped(p: &[Vec3], q: &[Vec3], fractions: &[f64]) -> Result<Mped> {
    if p.is_empty() || q.is_empty() {
        return Err(Error::EmptyCloud);
    }
    if let Some(f) = fractions.iter().find(|f| !(f.is_finite() && **f > 0.0 && **f <= 1.0)) {
        return Err(Error::Config(format!("neighborhood fraction must be in (0, 1], got {f}")));
    }
    let tp = tree3(p);
    let tq = tree3(q);
    let nn: Vec<usize> = q
        .iter()
        .map(|x| tp.nearest(&[x.x, x.y, x.z]).expect("non-empty").index)
        .collect();
    let mut terms = Vec::with_capacity(fractions.len());
    for &f in fractions {
        let pot_p = local_potentials(p, &tp, scale_neighbors(f, p.len()));
        let pot_q = local_potentials(q, &tq, scale_neighbors(f, q.len()));
        let term = nn.iter().zip(&pot_q).map(|(&j, pq)| (pot_p[j] - pq).abs()).sum::<f64>() / q.len() as f64;
        terms.push(term);
    }
    Ok(Mped {
        total: terms.iter().sum(),
        terms,
    })
}

/// Progress of each frame: mean displacement from the `t = 0` frame over
/// the mean displacement of the `t = 1` frame, clamped to `[0, 1]`. Falls
/// back to `clamp(t)` when the `t = 1` frame does not move.
pub fn progress_weights(times: &[f64], frames: &[Vec<Vec3>]) -> Result<Vec<f64>> {
    if times.len() != frames.len() {
        return Err(Error::LengthMismatch {
            left: times.len(),
            right: frames.len(),
        });
    }
    let at = |t: f64| times.iter().position(|&x| x == t);
    let (Some(i0), Some(i1)) = (at(0.0), at(1.0)) else {
        return Err(Error::Config("sweep must include t = 0 and t = 1".into()));
    };
    let base = &frames[i0];
    let movement = |f: &Vec<Vec3>| -> Result<f64> {
        if f.len() != base.len() {
            return Err(Error::LengthMismatch {
                left: base.len(),
                right: f.len(),
            });
        }
        if base.is_empty() {
            return Ok(0.0);
        }
        Ok(f.iter().zip(base).map(|(a, b)| (a - b).norm()).sum::<f64>() / base.len() as f64)
    };
    let full = movement(&frames[i1])?;
    times
        .iter()
        .zip(frames)
        .map(|(&t, f)| {
            let w = if full > 0.0 { movement(f)? / full } else { t };
            Ok(w.clamp(0.0, 1.0))
        })
        .collect()
}

/// Mean over interior steps (`0 < t < 1`) of `(1 - w) D_start + w D_end`.
/// Unscaled. Zero when there are no interior steps.
pub fn si_aggregate(times: &[f64], weights: &[f64], to_start: &[f64], to_end: &[f64]) -> Result<f64> {
    let n = times.len();
    for len in [weights.len(), to_start.len(), to_end.len()] {
        if len != n {
            return Err(Error::LengthMismatch { left: n, right: len });
        }
    }
    let mut sum = 0.0;
    let mut count = 0;
    for i in 0..n {
        if times[i] > 0.0 && times[i] < 1.0 {
            sum += (1.0 - weights[i]) * to_start[i] + weights[i] * to_end[i];
            count += 1;
        }
    }
    Ok(if count == 0 { 0.0 } else { sum / count as f64 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricConfig {
    pub emd_subsample: usize,
    pub mped_fractions: Vec<f64>,
    pub seed: u64,
}

impl Default for MetricConfig {
    fn default() -> Self {
        MetricConfig {
            emd_subsample: DEFAULT_SUBSAMPLE,
            mped_fractions: DEFAULT_MPED_FRACTIONS.to_vec(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub t: f64,
    pub weight: f64,
    pub emd_start: f64,
    pub emd_end: f64,
    pub mped_start: f64,
    pub mped_end: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub format: String,
    pub version: u32,
    pub config_hash: Option<String>,
    pub config: MetricConfig,
    /// `si_emd` and `si_mped` are the unscaled aggregates times this.
    pub report_scale: f64,
    pub si_emd: f64,
    pub si_mped: f64,
    pub si_emd_unscaled: f64,
    pub si_mped_unscaled: f64,
    pub steps: Vec<StepMetrics>,
}

/// Scores every frame of a sweep against both endpoint clouds. Frames must
/// share point order so displacements can be measured.
pub fn evaluate_sweep(
    times: &[f64],
    frames: &[Vec<Vec3>],
    start: &[Vec3],
    end: &[Vec3],
    cfg: &MetricConfig,
) -> Result<MetricReport> {
    let weights = progress_weights(times, frames)?;
    let per: Vec<[f64; 4]> = frames
        .par_iter()
        .map(|f| -> Result<[f64; 4]> {
            Ok([
                emd(f, start, cfg.emd_subsample, cfg.seed)?,
                emd(f, end, cfg.emd_subsample, cfg.seed)?,
                mped(start, f, &cfg.mped_fractions)?.total,
                mped(end, f, &cfg.mped_fractions)?.total,
            ])
        })
        .collect::<Result<_>>()?;
    let col = |k: usize| per.iter().map(|r| r[k]).collect::<Vec<f64>>();
    let si_emd = si_aggregate(times, &weights, &col(0), &col(1))?;
    let si_mped = si_aggregate(times, &weights, &col(2), &col(3))?;
    Ok(MetricReport {
        format: REPORT_FORMAT.into(),
        version: REPORT_VERSION,
        config_hash: None,
        config: cfg.clone(),
        report_scale: REPORT_SCALE,
        si_emd: si_emd * REPORT_SCALE,
        si_mped: si_mped * REPORT_SCALE,
        si_emd_unscaled: si_emd,
        si_mped_unscaled: si_mped,
        steps: times
            .iter()
            .zip(&weights)
            .zip(&per)
            .map(|((&t, &weight), r)| StepMetrics {
                t,
                weight,
                emd_start: r[0],
                emd_end: r[1],
                mped_start: r[2],
                mped_end: r[3],
            })
            .collect(),
    })
}
