//! Exact 3D kd-tree for nearest-neighbour association.
//!
//! Queries return the true nearest neighbour (no approximation) with ties
//! broken toward the lowest point index, so association results are
//! reproducible down to the bit for identical inputs.

use crate::geom::Vec3;

const LEAF_SIZE: usize = 16;

#[derive(Debug, Clone)]
enum Node {
    Leaf {
        start: usize,
        len: usize,
    },
    Split {
        axis: usize,
        value: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Debug, Clone)]
pub struct KdTree {
    nodes: Vec<Node>,
    /// Point indices into the original slice, permuted during construction.
    order: Vec<u32>,
    points: Vec<Vec3>,
    root: usize,
}

impl KdTree {
    /// Builds a tree over `points`. Positions must be finite.
    pub fn build(points: &[Vec3]) -> Self {
        let mut tree = KdTree {
            nodes: Vec::new(),
            order: (0..points.len() as u32).collect(),
            points: points.to_vec(),
            root: 0,
        };
        if !points.is_empty() {
            let n = tree.order.len();
            tree.root = tree.split(0, n);
        }
        tree
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    fn split(&mut self, start: usize, len: usize) -> usize {
        if len <= LEAF_SIZE {
            self.nodes.push(Node::Leaf { start, len });
            return self.nodes.len() - 1;
        }
        // Split on the widest axis at the median.
        let slice = &self.order[start..start + len];
        let mut lo = Vec3::repeat(f64::INFINITY);
        let mut hi = Vec3::repeat(f64::NEG_INFINITY);
        for &i in slice {
            let p = self.points[i as usize];
            lo = lo.inf(&p);
            hi = hi.sup(&p);
        }
        let extent = hi - lo;
        let axis = if extent.x >= extent.y && extent.x >= extent.z {
            0
        } else if extent.y >= extent.z {
            1
        } else {
            2
        };
        let mid = len / 2;
        let points = &self.points;
        self.order[start..start + len].select_nth_unstable_by(mid, |&a, &b| {
            let (pa, pb) = (points[a as usize][axis], points[b as usize][axis]);
            pa.partial_cmp(&pb).unwrap().then(a.cmp(&b))
        });
        let value = self.points[self.order[start + mid] as usize][axis];
        let left = self.split(start, mid);
        let right = self.split(start + mid, len - mid);
        self.nodes.push(Node::Split {
            axis,
            value,
            left,
            right,
        });
        self.nodes.len() - 1
    }

    /// Exact nearest neighbour: `(index, squared distance)`.
    pub fn nearest(&self, query: &Vec3) -> Option<(usize, f64)> {
        if self.is_empty() {
            return None;
        }
        let mut best = (usize::MAX, f64::INFINITY);
        self.search(self.root, query, &mut best);
        Some(best)
    }

    fn search(&self, node: usize, query: &Vec3, best: &mut (usize, f64)) {
        match &self.nodes[node] {
            Node::Leaf { start, len } => {
                for &i in &self.order[*start..*start + *len] {
                    let d2 = (self.points[i as usize] - query).norm_squared();
                    let idx = i as usize;
                    if d2 < best.1 || (d2 == best.1 && idx < best.0) {
                        *best = (idx, d2);
                    }
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let delta = query[*axis] - value;
                let (near, far) = if delta < 0.0 {
                    (*left, *right)
                } else {
                    (*right, *left)
                };
                self.search(near, query, best);
                if delta * delta <= best.1 {
                    self.search(far, query, best);
                }
            }
        }
    }

    /// The `k` exact nearest neighbours, ascending by `(distance, index)`.
    pub fn k_nearest(&self, query: &Vec3, k: usize) -> Vec<(usize, f64)> {
        if self.is_empty() || k == 0 {
            return Vec::new();
        }
        let mut heap: Vec<(f64, usize)> = Vec::with_capacity(k + 1); // max-first
        self.search_k(self.root, query, k, &mut heap);
        heap.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        heap.into_iter().map(|(d2, i)| (i, d2)).collect()
    }

    fn search_k(&self, node: usize, query: &Vec3, k: usize, heap: &mut Vec<(f64, usize)>) {
        match &self.nodes[node] {
            Node::Leaf { start, len } => {
                for &i in &self.order[*start..*start + *len] {
                    let d2 = (self.points[i as usize] - query).norm_squared();
                    let entry = (d2, i as usize);
                    if heap.len() < k {
                        heap.push(entry);
                        heap.sort_by(|a, b| {
                            b.0.partial_cmp(&a.0).unwrap().then(b.1.cmp(&a.1))
                        });
                    } else if entry.0 < heap[0].0 || (entry.0 == heap[0].0 && entry.1 < heap[0].1) {
                        heap[0] = entry;
                        heap.sort_by(|a, b| {
                            b.0.partial_cmp(&a.0).unwrap().then(b.1.cmp(&a.1))
                        });
                    }
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let delta = query[*axis] - value;
                let (near, far) = if delta < 0.0 {
                    (*left, *right)
                } else {
                    (*right, *left)
                };
                self.search_k(near, query, k, heap);
                if heap.len() < k || delta * delta <= heap[0].0 {
                    self.search_k(far, query, k, heap);
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

    fn random_cloud(rng: &mut impl Rng, n: usize, span: f64) -> Vec<Vec3> {
        (0..n)
            .map(|_| {
                Vec3::new(
                    rng.gen_range(-span..span),
                    rng.gen_range(-span..span),
                    rng.gen_range(-span..span),
                )
            })
            .collect()
    }

    fn brute_nearest(points: &[Vec3], q: &Vec3) -> (usize, f64) {
        let mut best = (usize::MAX, f64::INFINITY);
        for (i, p) in points.iter().enumerate() {
            let d2 = (p - q).norm_squared();
            if d2 < best.1 {
                best = (i, d2);
            }
        }
        best
    }

    #[test]
    fn empty_tree_returns_none() {
        assert!(KdTree::build(&[]).nearest(&Vec3::zeros()).is_none());
    }

    #[test]
    fn nearest_matches_linear_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let cloud = random_cloud(&mut rng, 2000, 20.0);
        let tree = KdTree::build(&cloud);
        for _ in 0..1000 {
            let q = Vec3::new(
                rng.gen_range(-25.0..25.0),
                rng.gen_range(-25.0..25.0),
                rng.gen_range(-25.0..25.0),
            );
            assert_eq!(tree.nearest(&q).unwrap(), brute_nearest(&cloud, &q));
        }
    }

    #[test]
    fn k_nearest_matches_linear_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let cloud = random_cloud(&mut rng, 500, 10.0);
        let tree = KdTree::build(&cloud);
        for _ in 0..200 {
            let q = Vec3::new(
                rng.gen_range(-12.0..12.0),
                rng.gen_range(-12.0..12.0),
                rng.gen_range(-12.0..12.0),
            );
            let got = tree.k_nearest(&q, 8);
            let mut all: Vec<(usize, f64)> = cloud
                .iter()
                .enumerate()
                .map(|(i, p)| (i, (p - q).norm_squared()))
                .collect();
            all.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
            all.truncate(8);
            assert_eq!(got, all);
        }
    }

    #[test]
    fn query_on_exact_point_returns_it() {
        let cloud = vec![
            Vec3::new(0.0, 0.0, 0.0),
            Vec3::new(1.0, 0.0, 0.0),
            Vec3::new(0.0, 2.0, 0.0),
        ];
        let tree = KdTree::build(&cloud);
        assert_eq!(tree.nearest(&Vec3::new(1.0, 0.0, 0.0)).unwrap(), (1, 0.0));
    }
}
