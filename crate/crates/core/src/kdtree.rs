//! Exact k-nearest-neighbour search over 3-D points.
//!
//! Hand-rolled instead of pulling in a spatial-index crate because two
//! contracts matter here and are awkward to guarantee through third-party
//! APIs: results must be *exact* (identical to a brute-force scan), and ties
//! on distance must break deterministically towards the smaller point index.
//! Both the statistical outlier filter and the registration stages rely on
//! this determinism for reproducible outputs.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use nalgebra::Vector3;

use crate::scalar::Real;

const LEAF_SIZE: usize = 24;

/// One neighbour result: original point index and squared distance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor<R: Real> {
    pub index: usize,
    pub dist_sq: R,
}

#[derive(Debug, Clone)]
enum Node<R: Real> {
    Split {
        axis: usize,
        value: R,
        left: usize,
        right: usize,
    },
    Leaf {
        start: usize,
        end: usize,
    },
}

/// Static k-d tree over a point set. Indices returned by queries refer to the
/// original slice passed to [`KdTree::build`].
#[derive(Debug, Clone)]
pub struct KdTree<R: Real> {
    points: Vec<Vector3<R>>,
    order: Vec<u32>,
    nodes: Vec<Node<R>>,
    root: usize,
}

impl<R: Real> KdTree<R> {
    pub fn build(points: &[Vector3<R>]) -> Self {
        let mut order: Vec<u32> = (0..points.len() as u32).collect();
        let mut tree = Self {
            points: points.to_vec(),
            order: Vec::new(),
            nodes: Vec::new(),
            root: 0,
        };
        if !points.is_empty() {
            tree.root = tree.build_node(&mut order, 0);
        }
        tree.order = order;
        tree
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    fn build_node(&mut self, slice: &mut [u32], offset: usize) -> usize {
        if slice.len() <= LEAF_SIZE {
            self.nodes.push(Node::Leaf {
                start: offset,
                end: offset + slice.len(),
            });
            return self.nodes.len() - 1;
        }
        // Split on the axis with the widest spread; the split key includes
        // the point index so the partition is a total order (canonical tree
        // shape regardless of input permutation).
        let mut lo = [R::max_value().unwrap(); 3];
        let mut hi = [R::min_value().unwrap(); 3];
        for &i in slice.iter() {
            let p = &self.points[i as usize];
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        let mut axis = 0;
        for a in 1..3 {
            if hi[a] - lo[a] > hi[axis] - lo[axis] {
                axis = a;
            }
        }
        let mid = slice.len() / 2;
        let points = &self.points;
        slice.select_nth_unstable_by(mid, |&a, &b| {
            points[a as usize][axis]
                .partial_cmp(&points[b as usize][axis])
                .expect("finite coordinates")
                .then(a.cmp(&b))
        });
        let value = self.points[slice[mid] as usize][axis];
        let (left_slice, right_slice) = slice.split_at_mut(mid);
        let node_index = self.nodes.len();
        self.nodes.push(Node::Leaf { start: 0, end: 0 }); // placeholder
        let left = self.build_node(left_slice, offset);
        let right = self.build_node(right_slice, offset + mid);
        self.nodes[node_index] = Node::Split {
            axis,
            value,
            left,
            right,
        };
        node_index
    }

    /// Exact k nearest neighbours of `query`, sorted ascending by
    /// `(dist_sq, index)`. Returns fewer than `k` only when the tree holds
    /// fewer points than requested.
    pub fn knn(&self, query: &Vector3<R>, k: usize) -> Vec<Neighbor<R>> {
        self.knn_filtered(query, k, None)
    }

    /// Like [`KdTree::knn`] but skips the point stored at `exclude`
    /// (used for self-excluding neighbourhood statistics).
    pub fn knn_excluding(&self, query: &Vector3<R>, k: usize, exclude: usize) -> Vec<Neighbor<R>> {
        self.knn_filtered(query, k, Some(exclude))
    }

    fn knn_filtered(
        &self,
        query: &Vector3<R>,
        k: usize,
        exclude: Option<usize>,
    ) -> Vec<Neighbor<R>> {
        if k == 0 || self.points.is_empty() {
            return Vec::new();
        }
        let mut heap: BinaryHeap<HeapEntry<R>> = BinaryHeap::with_capacity(k + 1);
        self.search(self.root, query, k, exclude, &mut heap);
        let mut out: Vec<Neighbor<R>> = heap
            .into_iter()
            .map(|e| Neighbor {
                index: e.index as usize,
                dist_sq: e.dist_sq,
            })
            .collect();
        out.sort_by(|a, b| {
            a.dist_sq
                .partial_cmp(&b.dist_sq)
                .expect("finite distances")
                .then(a.index.cmp(&b.index))
        });
        out
    }

    /// Nearest neighbour within `max_dist` (inclusive), or `None`.
    pub fn nearest_within(&self, query: &Vector3<R>, max_dist: R) -> Option<Neighbor<R>> {
        let best = self.knn(query, 1);
        best.first()
            .filter(|n| n.dist_sq <= max_dist * max_dist)
            .copied()
    }

    fn search(
        &self,
        node: usize,
        query: &Vector3<R>,
        k: usize,
        exclude: Option<usize>,
        heap: &mut BinaryHeap<HeapEntry<R>>,
    ) {
        match &self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[*start..*end] {
                    if exclude == Some(i as usize) {
                        continue;
                    }
                    let d2 = (self.points[i as usize] - query).norm_squared();
                    let entry = HeapEntry { dist_sq: d2, index: i };
                    if heap.len() < k {
                        heap.push(entry);
                    } else if entry < *heap.peek().expect("non-empty heap") {
                        heap.pop();
                        heap.push(entry);
                    }
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let delta = query[*axis] - *value;
                let (near, far) = if delta < R::zero() {
                    (*left, *right)
                } else {
                    (*right, *left)
                };
                self.search(near, query, k, exclude, heap);
                // Visit the far side unless the splitting plane is strictly
                // farther than the current worst candidate (ties must still
                // be visited so the smaller index can win).
                let prune = heap.len() == k
                    && delta * delta > heap.peek().expect("non-empty heap").dist_sq;
                if !prune {
                    self.search(far, query, k, exclude, heap);
                }
            }
        }
    }
}

/// Max-heap entry ordered by `(dist_sq, index)`; the heap top is the worst
/// candidate currently kept.
#[derive(Clone, Copy)]
struct HeapEntry<R: Real> {
    dist_sq: R,
    index: u32,
}

impl<R: Real> PartialEq for HeapEntry<R> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl<R: Real> Eq for HeapEntry<R> {}

impl<R: Real> PartialOrd for HeapEntry<R> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<R: Real> Ord for HeapEntry<R> {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist_sq
            .partial_cmp(&other.dist_sq)
            .expect("finite distances")
            .then(self.index.cmp(&other.index))
    }
}

/// Brute-force oracle with the same ordering contract as [`KdTree::knn`].
/// Exposed for tests throughout the workspace.
pub fn brute_force_knn<R: Real>(
    points: &[Vector3<R>],
    query: &Vector3<R>,
    k: usize,
    exclude: Option<usize>,
) -> Vec<Neighbor<R>> {
    let mut all: Vec<Neighbor<R>> = points
        .iter()
        .enumerate()
        .filter(|(i, _)| exclude != Some(*i))
        .map(|(i, p)| Neighbor {
            index: i,
            dist_sq: (p - query).norm_squared(),
        })
        .collect();
    all.sort_by(|a, b| {
        a.dist_sq
            .partial_cmp(&b.dist_sq)
            .expect("finite distances")
            .then(a.index.cmp(&b.index))
    });
    all.truncate(k);
    all
}
