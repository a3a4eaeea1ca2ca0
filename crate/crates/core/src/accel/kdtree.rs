use super::obb::Obb;
use crate::error::{invalid_input, invalid_param, Result};
use crate::geometry::{PointCloud, Vec3};

#[derive(Debug, Clone)]
struct Node {
    lo: Vec3,
    hi: Vec3,
    /// Range of `KdTree::order` covered by this subtree.
    start: usize,
    end: usize,
    children: Option<(usize, usize)>,
}

/// Axis-aligned KD-tree over point indices. Splits the widest dimension at
/// the median until a node holds at most `leaf_size` points.
#[derive(Debug, Clone)]
pub struct KdTree {
    points: Vec<Vec3>,
    order: Vec<u32>,
    nodes: Vec<Node>,
    leaf_size: usize,
}

impl KdTree {
    pub fn build(points: &[Vec3], leaf_size: usize) -> Result<Self> {
        if points.is_empty() {
            return Err(invalid_input("cannot build a KD-tree over no points"));
        }
        if leaf_size == 0 {
            return Err(invalid_param("leaf size must be ≥ 1"));
        }
        if points.len() > u32::MAX as usize {
            return Err(invalid_param("too many points for a KD-tree"));
        }
        let mut tree = Self {
            points: points.to_vec(),
            order: (0..points.len() as u32).collect(),
            nodes: Vec::new(),
            leaf_size,
        };
        tree.split(0, points.len());
        Ok(tree)
    }

    fn split(&mut self, start: usize, end: usize) -> usize {
        let pts = &self.points;
        let first = pts[self.order[start] as usize];
        let (lo, hi) = self.order[start..end]
            .iter()
            .fold((first, first), |(lo, hi), &k| (lo.inf(&pts[k as usize]), hi.sup(&pts[k as usize])));
        let id = self.nodes.len();
        self.nodes.push(Node { lo, hi, start, end, children: None });
        if end - start <= self.leaf_size {
            return id;
        }
        let axis = (hi - lo).imax();
        let mid = start + (end - start) / 2;
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            pts[a as usize][axis].total_cmp(&pts[b as usize][axis]).then(a.cmp(&b))
        });
        let left = self.split(start, mid);
        let right = self.split(mid, end);
        self.nodes[id].children = Some((left, right));
        id
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn leaf_size(&self) -> usize {
        self.leaf_size
    }

    /// Point indices of every leaf, in traversal order.
    pub fn leaves(&self) -> Vec<&[u32]> {
        self.nodes
            .iter()
            .filter(|n| n.children.is_none())
            .map(|n| &self.order[n.start..n.end])
            .collect()
    }

    /// Checks that node boxes contain their points and children partition
    /// their parent.
    pub fn is_consistent(&self) -> bool {
        self.nodes.iter().all(|n| {
            let inside = self.order[n.start..n.end].iter().all(|&k| {
                let p = &self.points[k as usize];
                (0..3).all(|a| p[a] >= n.lo[a] && p[a] <= n.hi[a])
            });
            let split = match n.children {
                Some((l, r)) => self.nodes[l].start == n.start && self.nodes[l].end == self.nodes[r].start && self.nodes[r].end == n.end,
                None => true,
            };
            inside && split
        })
    }

    /// Appends the indices of all points inside `obb` to `out`, ascending.
    pub fn query_obb_into(&self, obb: &Obb, out: &mut Vec<u32>) {
        let base = out.len();
        let mut stack = vec![0usize];
        while let Some(id) = stack.pop() {
            let n = &self.nodes[id];
            if !obb.intersects_aabb(&n.lo, &n.hi) {
                continue;
            }
            if obb.contains_aabb(&n.lo, &n.hi) {
                out.extend_from_slice(&self.order[n.start..n.end]);
                continue;
            }
            match n.children {
                Some((l, r)) => {
                    stack.push(r);
                    stack.push(l);
                }
                None => out.extend(self.order[n.start..n.end].iter().copied().filter(|&k| obb.contains(&self.points[k as usize]))),
            }
        }
        out[base..].sort_unstable();
    }

    pub fn query_obb(&self, obb: &Obb) -> Vec<u32> {
        let mut out = Vec::new();
        self.query_obb_into(obb, &mut out);
        out
    }
}

pub fn kd_build(cloud: &PointCloud, leaf_size: usize) -> Result<KdTree> {
    KdTree::build(cloud.points(), leaf_size)
}

pub fn kd_query_obb(tree: &KdTree, obb: &Obb) -> Vec<u32> {
    tree.query_obb(obb)
}
