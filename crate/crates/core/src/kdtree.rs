//! Exact k-nearest-neighbour search over points of arbitrary dimension.
//!
//! Neighbours are ordered by `(squared distance, point index)`, so callers
//! that insert points in a meaningful order get deterministic tie-breaking.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

const LEAF_SIZE: usize = 8;

#[derive(Debug, Clone)]
enum Node {
    Leaf {
        start: usize,
        end: usize,
    },
    Split {
        axis: usize,
        value: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub dist_sq: f64,
}

impl Neighbor {
    pub fn distance(&self) -> f64 {
        self.dist_sq.sqrt()
    }
}

// max-heap by (dist_sq, index): the top is the current worst candidate
impl Eq for Neighbor {}

impl PartialOrd for Neighbor {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Neighbor {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist_sq
            .total_cmp(&other.dist_sq)
            .then(self.index.cmp(&other.index))
    }
}

/// Squared Euclidean distance, summed in coordinate order.
pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[derive(Debug, Clone)]
pub struct KdTree {
    dim: usize,
    points: Vec<f64>,
    // permutation of point indices; leaves own contiguous ranges of it
    order: Vec<usize>,
    nodes: Vec<Node>,
}

impl KdTree {
    /// Build from `points.len() / dim` row-major points.
    pub fn build(dim: usize, points: Vec<f64>) -> Self {
        assert!(dim > 0, "dimension must be positive");
        assert_eq!(points.len() % dim, 0, "ragged point buffer");
        let n = points.len() / dim;
        let mut tree = KdTree {
            dim,
            points,
            order: (0..n).collect(),
            nodes: Vec::new(),
        };
        if n > 0 {
            tree.build_node(0, n);
        }
        tree
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn point(&self, index: usize) -> &[f64] {
        &self.points[index * self.dim..(index + 1) * self.dim]
    }

    fn coord(&self, index: usize, axis: usize) -> f64 {
        self.points[index * self.dim + axis]
    }

    fn build_node(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        self.nodes.push(Node::Leaf { start, end });
        if end - start <= LEAF_SIZE {
            return id;
        }
        // split on the axis with the widest spread
        let (axis, spread) = (0..self.dim)
            .map(|a| {
                let (lo, hi) = self.order[start..end].iter().fold(
                    (f64::INFINITY, f64::NEG_INFINITY),
                    |(lo, hi), &i| {
                        let c = self.coord(i, a);
                        (lo.min(c), hi.max(c))
                    },
                );
                (a, hi - lo)
            })
            .fold((0, f64::NEG_INFINITY), |best, cur| {
                if cur.1 > best.1 {
                    cur
                } else {
                    best
                }
            });
        if spread <= 0.0 {
            return id;
        }
        let mid = start + (end - start) / 2;
        let mut slice = std::mem::take(&mut self.order);
        slice[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            self.coord(a, axis)
                .total_cmp(&self.coord(b, axis))
                .then(a.cmp(&b))
        });
        let value = self.coord(slice[mid], axis);
        self.order = slice;
        let left = self.build_node(start, mid);
        let right = self.build_node(mid, end);
        self.nodes[id] = Node::Split {
            axis,
            value,
            left,
            right,
        };
        id
    }

    /// The `min(k, len)` points closest to `query`, nearest first.
    pub fn nearest(&self, query: &[f64], k: usize) -> Vec<Neighbor> {
        assert_eq!(query.len(), self.dim, "query dimension mismatch");
        if k == 0 || self.is_empty() {
            return Vec::new();
        }
        let mut heap = BinaryHeap::with_capacity(k + 1);
        self.search(0, query, k, &mut heap);
        heap.into_sorted_vec()
    }

    fn search(&self, node: usize, query: &[f64], k: usize, heap: &mut BinaryHeap<Neighbor>) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &index in &self.order[start..end] {
                    let cand = Neighbor {
                        index,
                        dist_sq: squared_distance(self.point(index), query),
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
                axis,
                value,
                left,
                right,
            } => {
                let diff = query[axis] - value;
                let (near, far) = if diff < 0.0 {
                    (left, right)
                } else {
                    (right, left)
                };
                self.search(near, query, k, heap);
                // equal bound still visited: a tie may win on index
                if heap.len() < k || diff * diff <= heap.peek().expect("heap is full").dist_sq {
                    self.search(far, query, k, heap);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn linear_scan(dim: usize, points: &[f64], query: &[f64], k: usize) -> Vec<(usize, f64)> {
        let mut all: Vec<(usize, f64)> = points
            .chunks(dim)
            .enumerate()
            .map(|(i, p)| (i, squared_distance(p, query)))
            .collect();
        all.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        all.truncate(k);
        all
    }

    #[test]
    fn empty_and_self_retrieval() {
        let t = KdTree::build(2, vec![]);
        assert!(t.nearest(&[0.0, 0.0], 3).is_empty());
        let pts: Vec<f64> = (0..40)
            .flat_map(|i| [i as f64, (i * 7 % 13) as f64])
            .collect();
        let t = KdTree::build(2, pts);
        let hit = t.nearest(&[17.0, (17 * 7 % 13) as f64], 1);
        assert_eq!(hit[0].index, 17);
        assert_eq!(hit[0].dist_sq, 0.0);
        assert_eq!(t.nearest(&[0.0, 0.0], 100).len(), 40);
    }

    #[test]
    fn duplicate_points_tie_on_index() {
        let t = KdTree::build(1, vec![1.0; 30]);
        let idx: Vec<usize> = t.nearest(&[0.0], 5).iter().map(|n| n.index).collect();
        assert_eq!(idx, vec![0, 1, 2, 3, 4]);
    }

    proptest! {
        #[test]
        fn matches_linear_scan(
            dim in 1usize..6,
            n in 0usize..120,
            k in 1usize..12,
            seed in any::<u64>(),
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            // coarse grid makes distance ties common
            let points: Vec<f64> = (0..n * dim).map(|_| rng.gen_range(-3i32..=3) as f64).collect();
            let query: Vec<f64> = (0..dim).map(|_| rng.gen_range(-3i32..=3) as f64 * 0.5).collect();
            let tree = KdTree::build(dim, points.clone());
            let got: Vec<(usize, f64)> =
                tree.nearest(&query, k).iter().map(|nb| (nb.index, nb.dist_sq)).collect();
            prop_assert_eq!(got, linear_scan(dim, &points, &query, k));
        }
    }
}
