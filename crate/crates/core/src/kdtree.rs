//! Minimal 3D kd-tree with radius queries, used to prune kernel pairs.

use nalgebra::Vector3;

struct Node {
    /// Index into the original point slice.
    index: u32,
    axis: u8,
    left: i32,
    right: i32,
}

pub struct KdTree {
    nodes: Vec<Node>,
    points: Vec<Vector3<f64>>,
    root: i32,
}

impl KdTree {
    pub fn build(points: &[Vector3<f64>]) -> Self {
        let mut indices: Vec<u32> = (0..points.len() as u32).collect();
        let mut tree = KdTree {
            nodes: Vec::with_capacity(points.len()),
            points: points.to_vec(),
            root: -1,
        };
        tree.root = tree.build_rec(&mut indices, 0);
        tree
    }

    fn build_rec(&mut self, indices: &mut [u32], depth: usize) -> i32 {
        if indices.is_empty() {
            return -1;
        }
        let axis = (depth % 3) as u8;
        let mid = indices.len() / 2;
        indices.select_nth_unstable_by(mid, |&a, &b| {
            let pa = self.points[a as usize][axis as usize];
            let pb = self.points[b as usize][axis as usize];
            pa.partial_cmp(&pb).unwrap()
        });
        let index = indices[mid];
        let node_id = self.nodes.len() as i32;
        self.nodes.push(Node {
            index,
            axis,
            left: -1,
            right: -1,
        });
        // Split-borrow to recurse without cloning.
        let (lo, rest) = indices.split_at_mut(mid);
        let hi = &mut rest[1..];
        let left = self.build_rec(lo, depth + 1);
        let right = self.build_rec(hi, depth + 1);
        self.nodes[node_id as usize].left = left;
        self.nodes[node_id as usize].right = right;
        node_id
    }

    /// Collects indices of all points within `radius` of `query`, in
    /// deterministic tree order.
    pub fn radius_indices(&self, query: &Vector3<f64>, radius: f64, out: &mut Vec<u32>) {
        out.clear();
        if self.root >= 0 {
            self.radius_rec(self.root, query, radius, radius * radius, out);
        }
    }

    fn radius_rec(
        &self,
        node_id: i32,
        query: &Vector3<f64>,
        radius: f64,
        radius_sq: f64,
        out: &mut Vec<u32>,
    ) {
        let node = &self.nodes[node_id as usize];
        let point = &self.points[node.index as usize];
        if (point - query).norm_squared() <= radius_sq {
            out.push(node.index);
        }
        let delta = query[node.axis as usize] - point[node.axis as usize];
        let (near, far) = if delta < 0.0 {
            (node.left, node.right)
        } else {
            (node.right, node.left)
        };
        if near >= 0 {
            self.radius_rec(near, query, radius, radius_sq, out);
        }
        if far >= 0 && delta.abs() <= radius {
            self.radius_rec(far, query, radius, radius_sq, out);
        }
    }
}
