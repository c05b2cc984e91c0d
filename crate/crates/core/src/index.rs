//! Exact nearest-neighbour and fixed-radius search.
//!
//! [`KdTree`] works in any dimension and is used both for 3D point clouds
//! (through [`SpatialIndex`]) and for the 2D orientation samples clustered by
//! HDBSCAN. Results are exact: radius queries return precisely the points with
//! squared distance `<= r²`, and k-NN ties are broken by the lower point index.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use nalgebra::Point3;

use crate::cloud::PointCloud;

const LEAF_SIZE: usize = 16;
pub(crate) const NO_CHILD: u32 = u32::MAX;

#[derive(Debug, Clone)]
pub(crate) struct Node {
    pub start: u32,
    pub end: u32,
    pub left: u32,
    pub right: u32,
}

impl Node {
    #[inline]
    pub fn is_leaf(&self) -> bool {
        self.left == NO_CHILD
    }
}

/// Immutable kd-tree over points of a fixed dimension.
#[derive(Debug, Clone)]
pub struct KdTree {
    dim: usize,
    /// Coordinates stored in tree order (`order[i]` is the original index of
    /// the point stored at slot `i`).
    pub(crate) coords: Vec<f64>,
    pub(crate) order: Vec<u32>,
    pub(crate) nodes: Vec<Node>,
    /// Per-node bounding boxes, `dim` values each.
    pub(crate) lo: Vec<f64>,
    pub(crate) hi: Vec<f64>,
}

#[derive(Clone, Copy, PartialEq)]
struct Candidate {
    d2: f64,
    index: u32,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.d2
            .total_cmp(&other.d2)
            .then(self.index.cmp(&other.index))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl KdTree {
    /// Builds a tree from `data`, a row-major `n × dim` matrix.
    ///
    /// Panics if `dim == 0` or `data.len()` is not a multiple of `dim`.
    pub fn new(data: &[f64], dim: usize) -> Self {
        assert!(dim > 0, "kd-tree dimension must be positive");
        assert_eq!(data.len() % dim, 0, "data length must be a multiple of dim");
        let n = data.len() / dim;
        assert!(n < u32::MAX as usize, "too many points for kd-tree");
        let mut order: Vec<u32> = (0..n as u32).collect();
        let mut tree = KdTree {
            dim,
            coords: Vec::new(),
            order: Vec::new(),
            nodes: Vec::new(),
            lo: Vec::new(),
            hi: Vec::new(),
        };
        if n > 0 {
            tree.build(data, &mut order, 0, n);
        }
        let mut coords = Vec::with_capacity(data.len());
        for &i in &order {
            let i = i as usize;
            coords.extend_from_slice(&data[i * dim..(i + 1) * dim]);
        }
        tree.coords = coords;
        tree.order = order;
        tree
    }

    fn build(&mut self, data: &[f64], order: &mut [u32], start: usize, end: usize) -> u32 {
        let dim = self.dim;
        let id = self.nodes.len();
        self.nodes.push(Node {
            start: start as u32,
            end: end as u32,
            left: NO_CHILD,
            right: NO_CHILD,
        });
        let mut lo = vec![f64::INFINITY; dim];
        let mut hi = vec![f64::NEG_INFINITY; dim];
        for &i in &order[start..end] {
            let p = &data[i as usize * dim..(i as usize + 1) * dim];
            for d in 0..dim {
                lo[d] = lo[d].min(p[d]);
                hi[d] = hi[d].max(p[d]);
            }
        }
        let (split_dim, extent) = (0..dim)
            .map(|d| (d, hi[d] - lo[d]))
            .fold((0, f64::NEG_INFINITY), |acc, x| if x.1 > acc.1 { x } else { acc });
        self.lo.extend_from_slice(&lo);
        self.hi.extend_from_slice(&hi);

        if end - start > LEAF_SIZE && extent > 0.0 {
            let mid = start + (end - start) / 2;
            order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
                let ka = data[a as usize * dim + split_dim];
                let kb = data[b as usize * dim + split_dim];
                ka.total_cmp(&kb).then(a.cmp(&b))
            });
            let left = self.build(data, order, start, mid);
            let right = self.build(data, order, mid, end);
            self.nodes[id].left = left;
            self.nodes[id].right = right;
        }
        id as u32
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// Coordinates of the point stored at tree slot `slot`.
    #[inline]
    pub(crate) fn slot_coords(&self, slot: usize) -> &[f64] {
        &self.coords[slot * self.dim..(slot + 1) * self.dim]
    }

    #[inline]
    pub(crate) fn box_dist2(&self, node: usize, q: &[f64]) -> f64 {
        let lo = &self.lo[node * self.dim..(node + 1) * self.dim];
        let hi = &self.hi[node * self.dim..(node + 1) * self.dim];
        let mut s = 0.0;
        for d in 0..self.dim {
            let v = if q[d] < lo[d] {
                lo[d] - q[d]
            } else if q[d] > hi[d] {
                q[d] - hi[d]
            } else {
                0.0
            };
            s += v * v;
        }
        s
    }

    /// The `k` nearest points to `query` as `(index, distance)` pairs, sorted
    /// by distance then index. Returns `min(k, n)` results.
    pub fn knn(&self, query: &[f64], k: usize) -> Vec<(usize, f64)> {
        debug_assert_eq!(query.len(), self.dim);
        if k == 0 || self.is_empty() {
            return Vec::new();
        }
        let mut heap: BinaryHeap<Candidate> = BinaryHeap::with_capacity(k + 1);
        let mut stack: Vec<(u32, f64)> = vec![(0, 0.0)];
        while let Some((node, bd2)) = stack.pop() {
            if heap.len() == k && bd2 > heap.peek().map_or(f64::INFINITY, |c| c.d2) {
                continue;
            }
            let nd = &self.nodes[node as usize];
            if nd.is_leaf() {
                for slot in nd.start as usize..nd.end as usize {
                    let d2 = dist2(self.slot_coords(slot), query);
                    let cand = Candidate {
                        d2,
                        index: self.order[slot],
                    };
                    if heap.len() < k {
                        heap.push(cand);
                    } else if cand < *heap.peek().unwrap() {
                        heap.pop();
                        heap.push(cand);
                    }
                }
            } else {
                let dl = self.box_dist2(nd.left as usize, query);
                let dr = self.box_dist2(nd.right as usize, query);
                // Push the farther child first so the nearer one is visited next.
                if dl <= dr {
                    stack.push((nd.right, dr));
                    stack.push((nd.left, dl));
                } else {
                    stack.push((nd.left, dl));
                    stack.push((nd.right, dr));
                }
            }
        }
        let mut out: Vec<Candidate> = heap.into_vec();
        out.sort_unstable();
        out.into_iter()
            .map(|c| (c.index as usize, c.d2.sqrt()))
            .collect()
    }

    /// Calls `f(index, squared_distance)` for every point with squared distance
    /// to `query` at most `radius²`.
    pub fn for_each_within<F: FnMut(usize, f64)>(&self, query: &[f64], radius: f64, mut f: F) {
        if self.is_empty() || radius < 0.0 {
            return;
        }
        let r2 = radius * radius;
        let mut stack: Vec<u32> = vec![0];
        while let Some(node) = stack.pop() {
            if self.box_dist2(node as usize, query) > r2 {
                continue;
            }
            let nd = &self.nodes[node as usize];
            if nd.is_leaf() {
                for slot in nd.start as usize..nd.end as usize {
                    let d2 = dist2(self.slot_coords(slot), query);
                    if d2 <= r2 {
                        f(self.order[slot] as usize, d2);
                    }
                }
            } else {
                stack.push(nd.right);
                stack.push(nd.left);
            }
        }
    }

    /// Indices of all points within `radius` of `query` (inclusive).
    pub fn within_radius(&self, query: &[f64], radius: f64) -> Vec<usize> {
        let mut out = Vec::new();
        self.for_each_within(query, radius, |i, _| out.push(i));
        out
    }
}

#[inline]
pub(crate) fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Spatial index over a [`PointCloud`].
///
/// Built once and then shared read-only; all query methods take `&self`.
#[derive(Debug, Clone)]
pub struct SpatialIndex {
    tree: KdTree,
}

impl SpatialIndex {
    pub fn new(cloud: &PointCloud) -> Self {
        Self::from_points(cloud.points())
    }

    pub fn from_points(points: &[Point3<f64>]) -> Self {
        let mut data = Vec::with_capacity(points.len() * 3);
        for p in points {
            data.extend_from_slice(&[p.x, p.y, p.z]);
        }
        SpatialIndex {
            tree: KdTree::new(&data, 3),
        }
    }

    pub fn len(&self) -> usize {
        self.tree.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tree.is_empty()
    }

    /// `min(k, N)` nearest neighbours of `p` (the point itself included when
    /// it is part of the cloud), sorted by distance then index.
    pub fn knn(&self, p: &Point3<f64>, k: usize) -> Vec<(usize, f64)> {
        self.tree.knn(&[p.x, p.y, p.z], k)
    }

    pub fn radius(&self, p: &Point3<f64>, radius: f64) -> Vec<usize> {
        self.tree.within_radius(&[p.x, p.y, p.z], radius)
    }

    pub fn for_each_within<F: FnMut(usize, f64)>(&self, p: &Point3<f64>, radius: f64, f: F) {
        self.tree.for_each_within(&[p.x, p.y, p.z], radius, f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_data(n: usize, dim: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n * dim).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn knn_matches_brute_force_with_index_ties() {
        // Integer grid: lots of exactly equal distances.
        let mut data = Vec::new();
        for x in 0..6 {
            for y in 0..6 {
                data.extend_from_slice(&[x as f64, y as f64]);
            }
        }
        let tree = KdTree::new(&data, 2);
        for q in 0..36 {
            let query = &data[q * 2..q * 2 + 2];
            let mut brute: Vec<(usize, f64)> = (0..36)
                .map(|j| (j, dist2(&data[j * 2..j * 2 + 2], query)))
                .collect();
            brute.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
            for k in [1, 5, 9, 36, 50] {
                let got: Vec<usize> = tree.knn(query, k).into_iter().map(|x| x.0).collect();
                let want: Vec<usize> = brute.iter().take(k).map(|x| x.0).collect();
                assert_eq!(got, want, "query {q} k {k}");
            }
        }
    }

    #[test]
    fn radius_matches_brute_force() {
        let data = random_data(3000, 3, 11);
        let tree = KdTree::new(&data, 3);
        for q in (0..3000).step_by(97) {
            let query = &data[q * 3..q * 3 + 3];
            let mut got = tree.within_radius(query, 0.2);
            got.sort_unstable();
            let want: Vec<usize> = (0..3000)
                .filter(|&j| dist2(&data[j * 3..j * 3 + 3], query) <= 0.04)
                .collect();
            assert_eq!(got, want);
        }
    }

    #[test]
    fn duplicate_points_do_not_break_build() {
        let data = vec![0.5; 3 * 100];
        let tree = KdTree::new(&data, 3);
        assert_eq!(tree.within_radius(&[0.5, 0.5, 0.5], 0.0).len(), 100);
        let nn = tree.knn(&[0.5, 0.5, 0.5], 3);
        assert_eq!(nn.iter().map(|x| x.0).collect::<Vec<_>>(), vec![0, 1, 2]);
    }

    #[test]
    fn empty_tree_queries() {
        let tree = KdTree::new(&[], 2);
        assert!(tree.knn(&[0.0, 0.0], 4).is_empty());
        assert!(tree.within_radius(&[0.0, 0.0], 1.0).is_empty());
    }
}
