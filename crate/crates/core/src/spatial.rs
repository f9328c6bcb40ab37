//! Exact nearest-neighbour queries over 3D positions.
//!
//! A static kd-tree with median splits. Results are exact: every query
//! returns the same set, in the same order, as a linear scan sorted by
//! `(squared distance, point index)`.

use std::cmp::Ordering;

use thiserror::Error;

use crate::geometry::Vec3;

const LEAF_SIZE: usize = 12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpatialError {
    #[error("spatial index is empty")]
    EmptyIndex,
    #[error("invalid query: {0}")]
    InvalidQuery(&'static str),
}

/// One query hit: original point index and squared Euclidean distance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub dist_sq: f64,
}

impl Neighbor {
    #[inline]
    fn cmp_key(&self, other: &Neighbor) -> Ordering {
        self.dist_sq
            .partial_cmp(&other.dist_sq)
            .unwrap_or(Ordering::Equal)
            .then(self.index.cmp(&other.index))
    }

    pub fn distance(&self) -> f64 {
        self.dist_sq.sqrt()
    }
}

#[derive(Clone, Debug)]
enum Node {
    Leaf { start: u32, end: u32 },
    Split { dim: u8, value: f64, left: u32, right: u32 },
}

/// Immutable kd-tree over a point set. Safe to share across threads.
#[derive(Clone, Debug)]
pub struct SpatialIndex {
    pts: Vec<[f64; 3]>,
    ids: Vec<u32>,
    nodes: Vec<Node>,
}

#[inline]
fn dist_sq(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

impl SpatialIndex {
    pub fn new(points: &[Vec3]) -> Self {
        let mut order: Vec<u32> = (0..points.len() as u32).collect();
        let raw: Vec<[f64; 3]> = points.iter().map(|p| [p.x, p.y, p.z]).collect();
        let mut nodes = Vec::new();
        if !points.is_empty() {
            build(&raw, &mut order, 0, &mut nodes);
        }
        let pts = order.iter().map(|&i| raw[i as usize]).collect();
        Self {
            pts,
            ids: order,
            nodes,
        }
    }

    pub fn len(&self) -> usize {
        self.pts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pts.is_empty()
    }

    /// The `k` nearest points, ascending by distance, ties by lower index.
    pub fn knn(&self, query: &Vec3, k: usize) -> Result<Vec<Neighbor>, SpatialError> {
        if self.is_empty() {
            return Err(SpatialError::EmptyIndex);
        }
        if k == 0 {
            return Err(SpatialError::InvalidQuery("k must be at least 1"));
        }
        let q = [query.x, query.y, query.z];
        let mut best: Vec<Neighbor> = Vec::with_capacity(k + 1);
        self.knn_node(0, &q, k, &mut best);
        Ok(best)
    }

    /// Nearest point (lowest index among equidistant ones).
    pub fn nearest(&self, query: &Vec3) -> Option<Neighbor> {
        if self.is_empty() {
            return None;
        }
        let q = [query.x, query.y, query.z];
        let mut best = Neighbor {
            index: usize::MAX,
            dist_sq: f64::INFINITY,
        };
        self.nearest_node(0, &q, &mut best);
        Some(best)
    }

    /// All points with distance `<= radius`, ascending by distance, ties by
    /// lower index.
    pub fn radius_search(&self, query: &Vec3, radius: f64) -> Result<Vec<Neighbor>, SpatialError> {
        if self.is_empty() {
            return Err(SpatialError::EmptyIndex);
        }
        if !(radius > 0.0) {
            return Err(SpatialError::InvalidQuery("radius must be positive"));
        }
        let mut out = Vec::new();
        self.for_each_within(query, radius, |index, dist_sq| out.push(Neighbor { index, dist_sq }));
        out.sort_unstable_by(|a, b| a.cmp_key(b));
        Ok(out)
    }

    /// Unordered variant of [`radius_search`](Self::radius_search) for hot loops.
    pub fn for_each_within<F: FnMut(usize, f64)>(&self, query: &Vec3, radius: f64, mut f: F) {
        if self.is_empty() {
            return;
        }
        let q = [query.x, query.y, query.z];
        self.radius_node(0, &q, radius * radius, &mut f);
    }

    pub fn indices_within(&self, query: &Vec3, radius: f64) -> Vec<usize> {
        let mut out = Vec::new();
        self.for_each_within(query, radius, |i, _| out.push(i));
        out
    }

    fn knn_node(&self, node: usize, q: &[f64; 3], k: usize, best: &mut Vec<Neighbor>) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for slot in start as usize..end as usize {
                    let cand = Neighbor {
                        index: self.ids[slot] as usize,
                        dist_sq: dist_sq(&self.pts[slot], q),
                    };
                    if best.len() < k || cand.cmp_key(best.last().unwrap()) == Ordering::Less {
                        let pos = best
                            .binary_search_by(|probe| probe.cmp_key(&cand))
                            .unwrap_or_else(|e| e);
                        best.insert(pos, cand);
                        if best.len() > k {
                            best.pop();
                        }
                    }
                }
            }
            Node::Split {
                dim,
                value,
                left,
                right,
            } => {
                let diff = q[dim as usize] - value;
                let (near, far) = if diff <= 0.0 { (left, right) } else { (right, left) };
                self.knn_node(near as usize, q, k, best);
                if best.len() < k || diff * diff <= best.last().unwrap().dist_sq {
                    self.knn_node(far as usize, q, k, best);
                }
            }
        }
    }

    fn nearest_node(&self, node: usize, q: &[f64; 3], best: &mut Neighbor) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for slot in start as usize..end as usize {
                    let d = dist_sq(&self.pts[slot], q);
                    let id = self.ids[slot] as usize;
                    if d < best.dist_sq || (d == best.dist_sq && id < best.index) {
                        *best = Neighbor { index: id, dist_sq: d };
                    }
                }
            }
            Node::Split {
                dim,
                value,
                left,
                right,
            } => {
                let diff = q[dim as usize] - value;
                let (near, far) = if diff <= 0.0 { (left, right) } else { (right, left) };
                self.nearest_node(near as usize, q, best);
                if diff * diff <= best.dist_sq {
                    self.nearest_node(far as usize, q, best);
                }
            }
        }
    }

    fn radius_node<F: FnMut(usize, f64)>(&self, node: usize, q: &[f64; 3], r2: f64, f: &mut F) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for slot in start as usize..end as usize {
                    let d = dist_sq(&self.pts[slot], q);
                    if d <= r2 {
                        f(self.ids[slot] as usize, d);
                    }
                }
            }
            Node::Split {
                dim,
                value,
                left,
                right,
            } => {
                let diff = q[dim as usize] - value;
                let (near, far) = if diff <= 0.0 { (left, right) } else { (right, left) };
                self.radius_node(near as usize, q, r2, f);
                if diff * diff <= r2 {
                    self.radius_node(far as usize, q, r2, f);
                }
            }
        }
    }
}

fn build(raw: &[[f64; 3]], order: &mut [u32], offset: usize, nodes: &mut Vec<Node>) -> u32 {
    let id = nodes.len() as u32;
    if order.len() <= LEAF_SIZE {
        nodes.push(Node::Leaf {
            start: offset as u32,
            end: (offset + order.len()) as u32,
        });
        return id;
    }
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for &i in order.iter() {
        let p = &raw[i as usize];
        for d in 0..3 {
            lo[d] = lo[d].min(p[d]);
            hi[d] = hi[d].max(p[d]);
        }
    }
    let dim = (0..3)
        .max_by(|&a, &b| (hi[a] - lo[a]).partial_cmp(&(hi[b] - lo[b])).unwrap_or(Ordering::Equal))
        .unwrap();
    if hi[dim] - lo[dim] <= 0.0 {
        // all points coincide
        nodes.push(Node::Leaf {
            start: offset as u32,
            end: (offset + order.len()) as u32,
        });
        return id;
    }
    let mid = order.len() / 2;
    order.select_nth_unstable_by(mid, |&a, &b| {
        raw[a as usize][dim]
            .partial_cmp(&raw[b as usize][dim])
            .unwrap_or(Ordering::Equal)
    });
    let value = raw[order[mid] as usize][dim];
    nodes.push(Node::Leaf { start: 0, end: 0 });
    let (l, r) = order.split_at_mut(mid);
    let left = build(raw, l, offset, nodes);
    let right = build(raw, r, offset + mid, nodes);
    nodes[id as usize] = Node::Split {
        dim: dim as u8,
        value,
        left,
        right,
    };
    id
}
