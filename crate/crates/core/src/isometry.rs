//! Local isometry regularizer over frozen k-nearest-neighbor graphs.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::kdtree::KdTree;

pub const DEFAULT_K: usize = 256;

/// k nearest neighbors of every point in its original positions.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborGraph {
    k: usize,
    neighbors: Vec<Vec<usize>>,
}

impl NeighborGraph {
    /// Exact Euclidean kNN, ties by index, no self loops. When `k >= N`
    /// every list holds the other `N - 1` points.
    pub fn build(positions: &[Vec3], k: usize) -> Result<NeighborGraph> {
        let n = positions.len();
        if n < 2 {
            return Err(Error::TooFewPoints { required: 2, actual: n });
        }
        if k == 0 {
            return Err(Error::Config("neighbor count must be positive".into()));
        }
        let k = k.min(n - 1);
        let tree = KdTree::new(positions.iter().map(|p| [p.x, p.y, p.z]).collect());
        let neighbors = (0..n)
            .into_par_iter()
            .map(|i| {
                let p = &positions[i];
                let mut list: Vec<usize> = tree
                    .knn(&[p.x, p.y, p.z], k + 1)
                    .into_iter()
                    .map(|nb| nb.index)
                    .filter(|&j| j != i)
                    .collect();
                list.truncate(k);
                list
            })
            .collect();
        Ok(NeighborGraph { k, neighbors })
    }

    /// Effective neighbor count after clamping to `N - 1`.
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.neighbors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    /// Every directed edge `(i, j)` with `j` in `NN_i`.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        self.neighbors
            .iter()
            .enumerate()
            .flat_map(|(i, l)| l.iter().map(move |&j| (i, j)))
            .collect()
    }

    /// Edges with both ends in `batch`, re-indexed to positions within
    /// `batch`.
    pub fn batch_edges(&self, batch: &[usize]) -> Vec<(usize, usize)> {
        let mut slot = vec![usize::MAX; self.len()];
        for (local, &g) in batch.iter().enumerate() {
            slot[g] = local;
        }
        let mut edges = Vec::with_capacity(batch.len() * self.k);
        for (local, &g) in batch.iter().enumerate() {
            for &j in &self.neighbors[g] {
                if slot[j] != usize::MAX {
                    edges.push((local, slot[j]));
                }
            }
        }
        edges
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IsoLoss {
    pub value: f64,
    /// `dL/dx` for each transformed position.
    pub grad: Vec<Vec3>,
    pub edges: usize,
}

/// Edges over a fixed set of original positions, stored as runs of targets
/// sharing a source. Rest lengths are recomputed from the positions, which
/// keeps each edge at four bytes.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EdgeSet {
    original: Vec<Vec3>,
    /// `(source, end)`: targets `[previous end, end)` belong to `source`.
    runs: Vec<(u32, u32)>,
    targets: Vec<u32>,
}

impl EdgeSet {
    pub fn new(original: &[Vec3], pairs: Vec<(usize, usize)>) -> Result<EdgeSet> {
        let n = original.len();
        if n > u32::MAX as usize || pairs.len() > u32::MAX as usize {
            return Err(Error::Config(format!("{n} points or {} edges exceed the index range", pairs.len())));
        }
        if let Some(&(i, j)) = pairs.iter().find(|&&(i, j)| i >= n || j >= n) {
            return Err(Error::Config(format!("edge ({i}, {j}) out of range for {n} points")));
        }
        let mut runs: Vec<(u32, u32)> = Vec::new();
        let mut targets = Vec::with_capacity(pairs.len());
        for (e, &(i, j)) in pairs.iter().enumerate() {
            match runs.last_mut() {
                Some(last) if last.0 as usize == i => last.1 = e as u32 + 1,
                _ => runs.push((i as u32, e as u32 + 1)),
            }
            targets.push(j as u32);
        }
        Ok(EdgeSet {
            original: original.to_vec(),
            runs,
            targets,
        })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    /// Edges in insertion order.
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let mut start = 0;
        self.runs.iter().flat_map(move |&(i, end)| {
            let range = start as usize..end as usize;
            start = end;
            self.targets[range].iter().map(move |&j| (i as usize, j as usize))
        })
    }
}

/// Mean over `edges` of `| |a_i - a_j|^2 - |b_i - b_j|^2 |`, with `a` the
/// original and `b` the transformed positions. No edges gives zero.
pub fn isometry_loss(original: &[Vec3], transformed: &[Vec3], edges: &[(usize, usize)]) -> Result<IsoLoss> {
    if original.len() != transformed.len() {
        return Err(Error::LengthMismatch {
            left: original.len(),
            right: transformed.len(),
        });
    }
    edge_isometry_loss(&EdgeSet::new(original, edges.to_vec())?, transformed)
}

/// [`isometry_loss`] over a prepared edge set.
pub fn edge_isometry_loss(edges: &EdgeSet, transformed: &[Vec3]) -> Result<IsoLoss> {
    let [loss] = edge_isometry_losses(edges, [transformed])?;
    Ok(loss)
}

/// [`edge_isometry_loss`] for several transformed copies of the same
/// points in one pass over the edges. Each result equals a separate call
/// bit for bit.
pub fn edge_isometry_losses<const C: usize>(edges: &EdgeSet, transformed: [&[Vec3]; C]) -> Result<[IsoLoss; C]> {
    let n = edges.original.len();
    if let Some(t) = transformed.iter().find(|t| t.len() != n) {
        return Err(Error::LengthMismatch { left: n, right: t.len() });
    }
    let mut grad: [Vec<Vec3>; C] = std::array::from_fn(|_| vec![Vec3::zeros(); n]);
    let mut value = [0.0; C];
    if !edges.is_empty() {
        let inv = 1.0 / edges.len() as f64;
        let mut start = 0;
        for &(i, end) in &edges.runs {
            let i = i as usize;
            let oi = edges.original[i];
            let xi: [Vec3; C] = std::array::from_fn(|c| transformed[c][i]);
            // the source's gradient stays in registers for the whole run
            let mut acc = [Vec3::zeros(); C];
            for &j in &edges.targets[start..end as usize] {
                let j = j as usize;
                let d0 = (oi - edges.original[j]).norm_squared();
                for c in 0..C {
                    let diff = xi[c] - transformed[c][j];
                    let r = diff.norm_squared() - d0;
                    value[c] += r.abs();
                    // sign(r) without a branch; residual signs are close to random
                    let s = 2.0 * inv * ((r > 0.0) as i32 - (r < 0.0) as i32) as f64;
                    let g = diff * s;
                    acc[c] += g;
                    grad[c][j] -= g;
                }
            }
            for c in 0..C {
                grad[c][i] += acc[c];
            }
            start = end as usize;
        }
        value.iter_mut().for_each(|v| *v *= inv);
    }
    let mut grad = grad.into_iter();
    Ok(std::array::from_fn(|c| IsoLoss {
        value: value[c],
        grad: grad.next().expect("one per copy"),
        edges: edges.len(),
    }))
}

/// Isometry loss over every edge of `graph`.
pub fn graph_isometry_loss(original: &[Vec3], transformed: &[Vec3], graph: &NeighborGraph) -> Result<IsoLoss> {
    if graph.len() != original.len() {
        return Err(Error::LengthMismatch {
            left: graph.len(),
            right: original.len(),
        });
    }
    isometry_loss(original, transformed, &graph.edges())
}

/// `L_E + alpha (iso_canonical + iso_cross)`.
pub fn total_loss(energy_loss: f64, iso_canonical: f64, iso_cross: f64, alpha: f64) -> f64 {
    energy_loss + alpha * (iso_canonical + iso_cross)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Quaternion, Se3};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_points(n: usize, seed: u64) -> Vec<Vec3> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect()
    }

    #[test]
    fn collinear_points() {
        let p = vec![Vec3::new(0.0, 0.0, 0.0), Vec3::new(1.0, 0.0, 0.0), Vec3::new(3.0, 0.0, 0.0)];
        let g = NeighborGraph::build(&p, 1).unwrap();
        assert_eq!(g.neighbors(1), &[0]);
        assert_eq!(g.neighbors(0), &[1]);
        assert_eq!(g.neighbors(2), &[1]);
    }

    #[test]
    fn matches_brute_force_knn() {
        let p = random_points(1000, 1);
        let g = NeighborGraph::build(&p, 16).unwrap();
        for i in (0..1000).step_by(37) {
            let mut all: Vec<(f64, usize)> = (0..1000)
                .filter(|&j| j != i)
                .map(|j| ((p[i] - p[j]).norm_squared(), j))
                .collect();
            all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let want: Vec<usize> = all.iter().take(16).map(|e| e.1).collect();
            assert_eq!(g.neighbors(i), &want[..]);
        }
    }

    #[test]
    fn clamps_to_complete_graph() {
        let p = random_points(6, 2);
        let g = NeighborGraph::build(&p, 256).unwrap();
        assert_eq!(g.k(), 5);
        for i in 0..6 {
            assert_eq!(g.neighbors(i).len(), 5);
            assert!(!g.neighbors(i).contains(&i));
        }
        assert!(NeighborGraph::build(&p[..1], 3).is_err());
    }

    #[test]
    fn duplicates_never_self_loop() {
        let p = vec![Vec3::zeros(); 5];
        let g = NeighborGraph::build(&p, 2).unwrap();
        for i in 0..5 {
            assert_eq!(g.neighbors(i).len(), 2);
            assert!(!g.neighbors(i).contains(&i));
        }
    }

    #[test]
    fn identity_and_rigid_motion_give_zero() {
        let p = random_points(50, 3);
        let g = NeighborGraph::build(&p, 8).unwrap();
        assert_eq!(graph_isometry_loss(&p, &p, &g).unwrap().value, 0.0);
        let t = Se3::new(Quaternion::new(0.3, -0.5, 0.2, 0.7), Vec3::new(1.0, -2.0, 0.5)).unwrap();
        let moved: Vec<Vec3> = p.iter().map(|x| t.apply(x)).collect();
        assert!(graph_isometry_loss(&p, &moved, &g).unwrap().value < 1e-14);
    }

    #[test]
    fn uniform_scale_closed_form() {
        let p = vec![
            Vec3::new(0.0, 0.0, 0.0),
            Vec3::new(1.0, 0.0, 0.0),
            Vec3::new(0.0, 2.0, 0.0),
            Vec3::new(0.0, 0.0, 0.5),
            Vec3::new(1.0, 1.0, 1.0),
        ];
        let g = NeighborGraph::build(&p, 2).unwrap();
        let scaled: Vec<Vec3> = p.iter().map(|x| x * 2.0).collect();
        let edges = g.edges();
        let mean_d2 = edges.iter().map(|&(i, j)| (p[i] - p[j]).norm_squared()).sum::<f64>() / edges.len() as f64;
        let v = graph_isometry_loss(&p, &scaled, &g).unwrap().value;
        assert!((v - 3.0 * mean_d2).abs() < 1e-12);
    }

    #[test]
    fn batch_edges_keep_only_internal_pairs() {
        let p = random_points(40, 4);
        let g = NeighborGraph::build(&p, 6).unwrap();
        let batch: Vec<usize> = (0..40).step_by(2).collect();
        let edges = g.batch_edges(&batch);
        let want: Vec<(usize, usize)> = g
            .edges()
            .into_iter()
            .filter(|(i, j)| i % 2 == 0 && j % 2 == 0)
            .map(|(i, j)| (i / 2, j / 2))
            .collect();
        assert_eq!(edges, want);
        let all: Vec<usize> = (0..40).collect();
        assert_eq!(g.batch_edges(&all), g.edges());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let p = random_points(10, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x: Vec<Vec3> = p
            .iter()
            .map(|v| v * 1.3 + Vec3::new(rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1), 0.0))
            .collect();
        let g = NeighborGraph::build(&p, 4).unwrap();
        let l = graph_isometry_loss(&p, &x, &g).unwrap();
        let h = 1e-6;
        for i in 0..10 {
            for k in 0..3 {
                let mut xp = x.clone();
                xp[i][k] += h;
                let mut xm = x.clone();
                xm[i][k] -= h;
                let num = (graph_isometry_loss(&p, &xp, &g).unwrap().value - graph_isometry_loss(&p, &xm, &g).unwrap().value)
                    / (2.0 * h);
                let rel = (num - l.grad[i][k]).abs() / num.abs().max(l.grad[i][k].abs()).max(1e-5);
                assert!(rel <= 1e-4, "{rel}");
            }
        }
    }

    #[test]
    fn fused_copies_equal_separate_calls() {
        let p = random_points(60, 6);
        let a: Vec<Vec3> = p.iter().map(|v| v * 1.1).collect();
        let b = random_points(60, 7);
        let edges = EdgeSet::new(&p, NeighborGraph::build(&p, 8).unwrap().edges()).unwrap();
        let [fa, fb] = edge_isometry_losses(&edges, [&a, &b]).unwrap();
        assert_eq!(fa, edge_isometry_loss(&edges, &a).unwrap());
        assert_eq!(fb, edge_isometry_loss(&edges, &b).unwrap());
        assert!(edge_isometry_losses(&edges, [&a, &b[..59]]).is_err());
    }

    #[test]
    fn total_loss_examples() {
        assert_eq!(total_loss(3.5, 2.0, 1.0, 0.0), 3.5);
        assert_eq!(total_loss(3.5, 0.0, 0.0, 10.0), 3.5);
        assert_eq!(total_loss(1.0, 0.25, 0.5, 4.0), 4.0);
    }

    proptest! {
        #[test]
        fn invariant_under_global_motion(
            seed in 0u64..1000,
            q in prop::array::uniform4(-1.0f64..1.0),
            t in prop::array::uniform3(-5.0f64..5.0),
        ) {
            prop_assume!(q.iter().map(|v| v * v).sum::<f64>() > 1e-3);
            let p = random_points(20, seed);
            let x: Vec<Vec3> = p.iter().map(|v| v * 0.8).collect();
            let g = NeighborGraph::build(&p, 5).unwrap();
            let base = graph_isometry_loss(&p, &x, &g).unwrap().value;
            let tr = Se3::new(Quaternion::from(q), Vec3::from(t)).unwrap();
            let moved: Vec<Vec3> = x.iter().map(|v| tr.apply(v)).collect();
            let after = graph_isometry_loss(&p, &moved, &g).unwrap().value;
            prop_assert!((after - base).abs() < 1e-10);
        }
    }
}
