//! K-nearest-neighbor search over LIDAR points.
//!
//! [`KdTree`] is a balanced median-split tree whose split axis cycles
//! x, y, z with depth. Results are ordered by `(squared distance, index)`, so
//! ties always resolve to the lower point index and the tree agrees exactly
//! with the exhaustive scan in [`knn_brute`]. When fewer than `k` points lie
//! within the radius, the found neighbors are repeated cyclically to fill all
//! `k` slots.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::types::Point3;

pub const DEFAULT_LEAF_SIZE: usize = 16;

/// The `k` neighbors of one target, nearest first.
#[derive(Clone, Debug, PartialEq)]
pub struct NeighborSet {
    /// Index of the target when it is itself an indexed point.
    pub target: Option<usize>,
    pub indices: Vec<usize>,
    /// Euclidean distances, non-decreasing.
    pub distances: Vec<f64>,
    /// Distinct neighbors found before cyclic padding.
    pub found: usize,
}

impl NeighborSet {
    pub fn k(&self) -> usize {
        self.indices.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Candidate {
    dist2: f64,
    index: usize,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist2.total_cmp(&other.dist2).then(self.index.cmp(&other.index))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

fn validate_query(k: usize, radius: f64) -> Result<()> {
    if k == 0 {
        return Err(Error::InvalidValue("k must be at least 1".into()));
    }
    if radius.is_nan() || radius < 0.0 {
        return Err(Error::InvalidValue(format!("search radius {radius} must be >= 0")));
    }
    Ok(())
}

fn finish(mut found: Vec<Candidate>, k: usize, target: Option<usize>) -> Result<NeighborSet> {
    if found.is_empty() {
        return Err(Error::EmptyNeighborhood);
    }
    found.sort_unstable();
    let m = found.len();
    // Slot s repeats found[s % m]; sorting the ranks keeps distances monotone.
    let mut ranks: Vec<usize> = (0..k).map(|s| s % m).collect();
    ranks.sort_unstable();
    let indices = ranks.iter().map(|&r| found[r].index).collect();
    let distances = ranks.iter().map(|&r| found[r].dist2.sqrt()).collect();
    Ok(NeighborSet {
        target,
        indices,
        distances,
        found: m,
    })
}

/// Exhaustive k-nearest-neighbor scan, the reference for [`KdTree::knn_query`].
pub fn knn_brute(points: &[Point3], target: &Point3, k: usize, radius: f64) -> Result<NeighborSet> {
    validate_query(k, radius)?;
    let r2 = radius * radius;
    let mut all: Vec<Candidate> = points
        .iter()
        .enumerate()
        .map(|(index, p)| Candidate {
            dist2: p.squared_distance(target),
            index,
        })
        .filter(|c| c.dist2 <= r2)
        .collect();
    all.sort_unstable();
    all.truncate(k);
    finish(all, k, None)
}

#[derive(Clone, Debug)]
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

/// Balanced k-d tree over a copy of the input points.
#[derive(Clone, Debug)]
pub struct KdTree {
    points: Vec<Point3>,
    /// Point indices permuted so every leaf owns a contiguous range.
    order: Vec<usize>,
    nodes: Vec<Node>,
    leaf_size: usize,
}

impl KdTree {
    pub fn build(points: &[Point3], leaf_size: usize) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidValue("cannot index an empty point set".into()));
        }
        if leaf_size == 0 {
            return Err(Error::InvalidValue("leaf size must be at least 1".into()));
        }
        if let Some(i) = points.iter().position(|p| !p.is_finite()) {
            return Err(Error::InvalidValue(format!("point {i} is not finite")));
        }
        let mut tree = KdTree {
            points: points.to_vec(),
            order: (0..points.len()).collect(),
            nodes: Vec::new(),
            leaf_size,
        };
        tree.build_node(0, points.len(), 0);
        Ok(tree)
    }

    fn build_node(&mut self, start: usize, end: usize, depth: usize) -> usize {
        let id = self.nodes.len();
        if end - start <= self.leaf_size {
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let axis = depth % 3;
        let mid = start + (end - start) / 2;
        let points = &self.points;
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            points[a].coord(axis).total_cmp(&points[b].coord(axis)).then(a.cmp(&b))
        });
        let value = self.points[self.order[mid]].coord(axis);
        // placeholder, patched once both children exist
        self.nodes.push(Node::Leaf { start, end });
        let left = self.build_node(start, mid, depth + 1);
        let right = self.build_node(mid, end, depth + 1);
        self.nodes[id] = Node::Split {
            axis,
            value,
            left,
            right,
        };
        id
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    pub fn leaf_size(&self) -> usize {
        self.leaf_size
    }

    /// Number of node levels from root to the deepest leaf (a lone leaf is 1).
    pub fn depth(&self) -> usize {
        fn walk(nodes: &[Node], id: usize) -> usize {
            match nodes[id] {
                Node::Leaf { .. } => 1,
                Node::Split { left, right, .. } => 1 + walk(nodes, left).max(walk(nodes, right)),
            }
        }
        walk(&self.nodes, 0)
    }

    /// Point indices in leaf order; a permutation of `0..len`.
    pub fn leaf_order(&self) -> &[usize] {
        &self.order
    }

    /// The `k` nearest indexed points within `radius` of `target`
    /// (`f64::INFINITY` for an unbounded search).
    pub fn knn_query(&self, target: &Point3, k: usize, radius: f64) -> Result<NeighborSet> {
        validate_query(k, radius)?;
        let mut heap = BinaryHeap::with_capacity(k + 1);
        self.search(0, target, k, radius * radius, &mut heap);
        finish(heap.into_vec(), k, None)
    }

    /// Neighbors of the indexed point `index`; slot 0 is the point itself
    /// unless a duplicate with a lower index shares its position.
    pub fn knn_of(&self, index: usize, k: usize, radius: f64) -> Result<NeighborSet> {
        let target = *self.points.get(index).ok_or_else(|| {
            Error::InvalidValue(format!("target index {index} out of range for {} points", self.len()))
        })?;
        let mut set = self.knn_query(&target, k, radius)?;
        set.target = Some(index);
        Ok(set)
    }

    /// Neighbor sets for every indexed point, computed in parallel.
    pub fn knn_all(&self, k: usize, radius: f64) -> Result<Vec<NeighborSet>> {
        (0..self.len())
            .into_par_iter()
            .map(|i| self.knn_of(i, k, radius))
            .collect()
    }

    fn search(&self, id: usize, target: &Point3, k: usize, r2: f64, heap: &mut BinaryHeap<Candidate>) {
        match self.nodes[id] {
            Node::Leaf { start, end } => {
                for &index in &self.order[start..end] {
                    let dist2 = self.points[index].squared_distance(target);
                    if dist2 > r2 {
                        continue;
                    }
                    let c = Candidate { dist2, index };
                    if heap.len() < k {
                        heap.push(c);
                    } else if let Some(worst) = heap.peek() {
                        if c < *worst {
                            heap.pop();
                            heap.push(c);
                        }
                    }
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = target.coord(axis) - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.search(near, target, k, r2, heap);
                // `<=` keeps equal-distance points with lower indices reachable
                let plane2 = diff * diff;
                let bound = if heap.len() < k {
                    r2
                } else {
                    heap.peek().map_or(r2, |w| w.dist2.min(r2))
                };
                if plane2 <= bound {
                    self.search(far, target, k, r2, heap);
                }
            }
        }
    }
}
