//! Static kd-tree over fixed-dimension points with exact nearest and
//! k-nearest queries.
//!
//! Distances are squared Euclidean. Results are ordered by `(distance,
//! index)`, so equal distances resolve to the lowest point index, matching a
//! brute-force scan that keeps the first minimum.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

const LEAF_SIZE: usize = 12;

#[derive(Debug, Clone)]
enum Node {
    Leaf {
        start: usize,
        end: usize,
    },
    Split {
        dim: usize,
        value: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Debug, Clone)]
pub struct KdTree<const D: usize> {
    points: Vec<[f64; D]>,
    order: Vec<usize>,
    nodes: Vec<Node>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub dist2: f64,
}

impl Neighbor {
    fn cmp_key(&self, other: &Self) -> Ordering {
        self.dist2
            .total_cmp(&other.dist2)
            .then(self.index.cmp(&other.index))
    }
}

impl Eq for Neighbor {}

impl PartialOrd for Neighbor {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Neighbor {
    fn cmp(&self, other: &Self) -> Ordering {
        self.cmp_key(other)
    }
}

#[inline]
pub fn dist2<const D: usize>(a: &[f64; D], b: &[f64; D]) -> f64 {
    let mut s = 0.0;
    for k in 0..D {
        let d = a[k] - b[k];
        s += d * d;
    }
    s
}

impl<const D: usize> KdTree<D> {
    pub fn new(points: Vec<[f64; D]>) -> Self {
        let mut tree = KdTree {
            order: (0..points.len()).collect(),
            points,
            nodes: Vec::new(),
        };
        if !tree.points.is_empty() {
            tree.build(0, tree.points.len());
        }
        tree
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, index: usize) -> &[f64; D] {
        &self.points[index]
    }

    fn build(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        if end - start <= LEAF_SIZE {
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        // split on the widest dimension
        let mut lo = [f64::INFINITY; D];
        let mut hi = [f64::NEG_INFINITY; D];
        for &i in &self.order[start..end] {
            let p = &self.points[i];
            for k in 0..D {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        let dim = (0..D)
            .max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b])))
            .unwrap_or(0);
        if hi[dim] - lo[dim] <= 0.0 {
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let mid = start + (end - start) / 2;
        let points = &self.points;
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            points[a][dim].total_cmp(&points[b][dim])
        });
        let value = self.points[self.order[mid]][dim];
        self.nodes.push(Node::Leaf { start, end });
        let left = self.build(start, mid);
        let right = self.build(mid, end);
        self.nodes[id] = Node::Split {
            dim,
            value,
            left,
            right,
        };
        id
    }

    /// Closest point to `query`, lowest index on ties.
    pub fn nearest(&self, query: &[f64; D]) -> Option<Neighbor> {
        if self.points.is_empty() {
            return None;
        }
        let mut best = Neighbor {
            index: usize::MAX,
            dist2: f64::INFINITY,
        };
        self.nearest_rec(0, query, &mut best);
        Some(best)
    }

    fn nearest_rec(&self, node: usize, q: &[f64; D], best: &mut Neighbor) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    let cand = Neighbor {
                        index: i,
                        dist2: dist2(&self.points[i], q),
                    };
                    if cand < *best {
                        *best = cand;
                    }
                }
            }
            Node::Split {
                dim,
                value,
                left,
                right,
            } => {
                let diff = q[dim] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.nearest_rec(near, q, best);
                // `<=` keeps equal-distance points with lower indices reachable
                if diff * diff <= best.dist2 {
                    self.nearest_rec(far, q, best);
                }
            }
        }
    }

    /// The `k` closest points sorted by `(distance, index)`.
    pub fn knn(&self, query: &[f64; D], k: usize) -> Vec<Neighbor> {
        let k = k.min(self.points.len());
        if k == 0 {
            return Vec::new();
        }
        let mut heap = BinaryHeap::with_capacity(k + 1);
        self.knn_rec(0, query, k, &mut heap);
        heap.into_sorted_vec()
    }

    fn knn_rec(&self, node: usize, q: &[f64; D], k: usize, heap: &mut BinaryHeap<Neighbor>) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    let cand = Neighbor {
                        index: i,
                        dist2: dist2(&self.points[i], q),
                    };
                    if heap.len() < k {
                        heap.push(cand);
                    } else if cand < *heap.peek().expect("heap is full") {
                        heap.pop();
                        heap.push(cand);
                    }
                }
            }
            Node::Split {
                dim,
                value,
                left,
                right,
            } => {
                let diff = q[dim] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.knn_rec(near, q, k, heap);
                let worst = if heap.len() < k {
                    f64::INFINITY
                } else {
                    heap.peek().map_or(f64::INFINITY, |n| n.dist2)
                };
                if diff * diff <= worst {
                    self.knn_rec(far, q, k, heap);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_knn<const D: usize>(pts: &[[f64; D]], q: &[f64; D], k: usize) -> Vec<Neighbor> {
        let mut all: Vec<Neighbor> = pts
            .iter()
            .enumerate()
            .map(|(index, p)| Neighbor {
                index,
                dist2: dist2(p, q),
            })
            .collect();
        all.sort();
        all.truncate(k);
        all
    }

    fn random_points<const D: usize>(rng: &mut ChaCha8Rng, n: usize) -> Vec<[f64; D]> {
        (0..n)
            .map(|_| std::array::from_fn(|_| rng.gen_range(-1.0..1.0)))
            .collect()
    }

    #[test]
    fn nearest_matches_brute_force_in_10d() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts = random_points::<10>(&mut rng, 700);
        let tree = KdTree::new(pts.clone());
        for _ in 0..200 {
            let q: [f64; 10] = std::array::from_fn(|_| rng.gen_range(-1.2..1.2));
            assert_eq!(tree.nearest(&q).unwrap(), brute_knn(&pts, &q, 1)[0]);
        }
    }

    #[test]
    fn knn_matches_brute_force_in_3d() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pts = random_points::<3>(&mut rng, 1000);
        let tree = KdTree::new(pts.clone());
        for k in [1, 7, 64, 300] {
            for _ in 0..20 {
                let q: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
                assert_eq!(tree.knn(&q, k), brute_knn(&pts, &q, k));
            }
        }
    }

    #[test]
    fn ties_resolve_to_lowest_index() {
        // a lattice with many exactly equidistant points, plus duplicates
        let mut pts = Vec::new();
        for x in 0..6 {
            for y in 0..6 {
                pts.push([x as f64, y as f64, 0.0]);
            }
        }
        pts.extend_from_slice(&pts.clone()[..10]);
        let tree = KdTree::new(pts.clone());
        for q in [[2.5, 2.5, 0.0], [0.0, 0.0, 0.0], [1.0, 3.5, 0.0], [5.5, 0.5, 1.0]] {
            assert_eq!(tree.nearest(&q).unwrap(), brute_knn(&pts, &q, 1)[0]);
            for k in [1, 3, 4, 9, 46] {
                assert_eq!(tree.knn(&q, k), brute_knn(&pts, &q, k));
            }
        }
    }

    #[test]
    fn degenerate_inputs() {
        let empty = KdTree::<3>::new(Vec::new());
        assert!(empty.nearest(&[0.0; 3]).is_none());
        assert!(empty.knn(&[0.0; 3], 4).is_empty());
        let same = KdTree::new(vec![[1.0, 1.0]; 40]);
        let r = same.knn(&[0.0, 0.0], 5);
        assert_eq!(r.iter().map(|n| n.index).collect::<Vec<_>>(), vec![0, 1, 2, 3, 4]);
        assert_eq!(same.knn(&[0.0, 0.0], 100).len(), 40);
    }
}
