//! Static kd-tree for exact nearest-neighbour queries on 3-D point sets.
//!
//! Squared distances are evaluated with the same expression as the brute-force
//! reference, so query results are bit-identical to an exhaustive scan.

use crate::geometry::Vec3;

const LEAF_SIZE: usize = 12;

#[derive(Debug, Clone)]
enum Node {
    Leaf { start: u32, end: u32 },
    Split { axis: u8, value: f64, left: u32, right: u32 },
}

#[derive(Debug, Clone)]
pub struct KdTree {
    points: Vec<[f64; 3]>,
    nodes: Vec<Node>,
}

#[inline]
pub(crate) fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

impl KdTree {
    /// Builds the index. Returns `None` for an empty point set.
    pub fn build(points: &[Vec3]) -> Option<Self> {
        if points.is_empty() {
            return None;
        }
        let mut pts: Vec<[f64; 3]> = points.iter().map(|p| [p.x, p.y, p.z]).collect();
        let mut nodes = Vec::with_capacity(2 * pts.len() / LEAF_SIZE + 1);
        let n = pts.len();
        build_node(&mut pts, 0, n, &mut nodes);
        Some(Self { points: pts, nodes })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Squared distance from `q` to its nearest indexed point.
    pub fn nearest_dist2(&self, q: &Vec3) -> f64 {
        let q = [q.x, q.y, q.z];
        let mut best = f64::INFINITY;
        self.nearest_rec(0, &q, &mut best);
        best
    }

    pub fn nearest_dist(&self, q: &Vec3) -> f64 {
        self.nearest_dist2(q).sqrt()
    }

    /// True when some indexed point lies within `radius` (inclusive) of `q`.
    /// Agrees exactly with `nearest_dist2(q) <= radius²`.
    pub fn any_within(&self, q: &Vec3, radius: f64) -> bool {
        let q = [q.x, q.y, q.z];
        self.within_rec(0, &q, radius * radius)
    }

    fn nearest_rec(&self, node: usize, q: &[f64; 3], best: &mut f64) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for p in &self.points[start as usize..end as usize] {
                    let d = dist2(p, q);
                    if d < *best {
                        *best = d;
                    }
                }
            }
            Node::Split { axis, value, left, right } => {
                let diff = q[axis as usize] - value;
                let (near, far) = if diff <= 0.0 { (left, right) } else { (right, left) };
                self.nearest_rec(near as usize, q, best);
                if diff * diff <= *best {
                    self.nearest_rec(far as usize, q, best);
                }
            }
        }
    }

    fn within_rec(&self, node: usize, q: &[f64; 3], r2: f64) -> bool {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                self.points[start as usize..end as usize].iter().any(|p| dist2(p, q) <= r2)
            }
            Node::Split { axis, value, left, right } => {
                let diff = q[axis as usize] - value;
                let (near, far) = if diff <= 0.0 { (left, right) } else { (right, left) };
                self.within_rec(near as usize, q, r2) || (diff * diff <= r2 && self.within_rec(far as usize, q, r2))
            }
        }
    }
}

fn build_node(pts: &mut [[f64; 3]], start: usize, end: usize, nodes: &mut Vec<Node>) -> u32 {
    let id = nodes.len() as u32;
    if end - start <= LEAF_SIZE {
        nodes.push(Node::Leaf { start: start as u32, end: end as u32 });
        return id;
    }
    let slice = &mut pts[start..end];
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in slice.iter() {
        for k in 0..3 {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    let axis = (0..3).max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b]))).unwrap_or(0);
    if hi[axis] - lo[axis] <= 0.0 {
        // All points coincide.
        nodes.push(Node::Leaf { start: start as u32, end: end as u32 });
        return id;
    }
    let mid = slice.len() / 2;
    slice.select_nth_unstable_by(mid, |a, b| a[axis].total_cmp(&b[axis]));
    let value = slice[mid][axis];
    // Points left of `mid` are <= value and points right of it are >= value, so
    // routing on `diff <= 0` with the plane distance bound stays exact.
    nodes.push(Node::Leaf { start: 0, end: 0 });
    let left = build_node(pts, start, start + mid, nodes);
    let right = build_node(pts, start + mid, end, nodes);
    nodes[id as usize] = Node::Split { axis: axis as u8, value, left, right };
    id
}
