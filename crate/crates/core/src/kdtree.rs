//! Static 3-D k-d tree for nearest-neighbor queries.

use crate::geometry::Vec3;

#[derive(Debug, Clone)]
struct Node {
    /// Index into `order` of the splitting point.
    mid: usize,
    axis: usize,
    left: Option<usize>,
    right: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct KdTree {
    points: Vec<Vec3>,
    order: Vec<usize>,
    nodes: Vec<Node>,
    root: Option<usize>,
}

impl KdTree {
    pub fn new(points: &[Vec3]) -> Self {
        let mut tree = Self {
            points: points.to_vec(),
            order: (0..points.len()).collect(),
            nodes: Vec::with_capacity(points.len()),
            root: None,
        };
        tree.root = tree.build(0, points.len());
        tree
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, i: usize) -> &Vec3 {
        &self.points[i]
    }

    fn build(&mut self, lo: usize, hi: usize) -> Option<usize> {
        if lo >= hi {
            return None;
        }
        let mut min = Vec3::repeat(f64::INFINITY);
        let mut max = Vec3::repeat(f64::NEG_INFINITY);
        for &i in &self.order[lo..hi] {
            min = min.inf(&self.points[i]);
            max = max.sup(&self.points[i]);
        }
        let axis = (max - min).imax();
        let mid = lo + (hi - lo) / 2;
        let pts = &self.points;
        self.order[lo..hi].select_nth_unstable_by(mid - lo, |&a, &b| {
            pts[a][axis].total_cmp(&pts[b][axis]).then(a.cmp(&b))
        });
        let id = self.nodes.len();
        self.nodes.push(Node {
            mid,
            axis,
            left: None,
            right: None,
        });
        let left = self.build(lo, mid);
        let right = self.build(mid + 1, hi);
        self.nodes[id].left = left;
        self.nodes[id].right = right;
        Some(id)
    }

    /// Index and squared distance of the nearest point.
    pub fn nearest(&self, q: &Vec3) -> Option<(usize, f64)> {
        let mut best = (usize::MAX, f64::INFINITY);
        if let Some(r) = self.root {
            self.search_nearest(r, q, &mut best);
        }
        (best.0 != usize::MAX).then_some(best)
    }

    fn search_nearest(&self, node: usize, q: &Vec3, best: &mut (usize, f64)) {
        let n = &self.nodes[node];
        let idx = self.order[n.mid];
        let p = &self.points[idx];
        let d2 = (p - q).norm_squared();
        if d2 < best.1 || (d2 == best.1 && idx < best.0) {
            *best = (idx, d2);
        }
        let diff = q[n.axis] - p[n.axis];
        let (near, far) = if diff <= 0.0 {
            (n.left, n.right)
        } else {
            (n.right, n.left)
        };
        if let Some(c) = near {
            self.search_nearest(c, q, best);
        }
        if diff * diff <= best.1 {
            if let Some(c) = far {
                self.search_nearest(c, q, best);
            }
        }
    }

    /// The `k` nearest points sorted by distance (ties by index).
    pub fn knn(&self, q: &Vec3, k: usize) -> Vec<(usize, f64)> {
        let mut heap: Vec<(usize, f64)> = Vec::with_capacity(k + 1);
        if k > 0 {
            if let Some(r) = self.root {
                self.search_knn(r, q, k, &mut heap);
            }
        }
        heap
    }

    fn search_knn(&self, node: usize, q: &Vec3, k: usize, best: &mut Vec<(usize, f64)>) {
        let n = &self.nodes[node];
        let idx = self.order[n.mid];
        let p = &self.points[idx];
        let d2 = (p - q).norm_squared();
        let worst = if best.len() < k {
            f64::INFINITY
        } else {
            best[best.len() - 1].1
        };
        if d2 < worst || best.len() < k {
            let pos = best.partition_point(|&(i, d)| d < d2 || (d == d2 && i < idx));
            best.insert(pos, (idx, d2));
            best.truncate(k);
        }
        let diff = q[n.axis] - p[n.axis];
        let (near, far) = if diff <= 0.0 {
            (n.left, n.right)
        } else {
            (n.right, n.left)
        };
        if let Some(c) = near {
            self.search_knn(c, q, k, best);
        }
        let worst = if best.len() < k {
            f64::INFINITY
        } else {
            best[best.len() - 1].1
        };
        if diff * diff <= worst {
            if let Some(c) = far {
                self.search_knn(c, q, k, best);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts: Vec<Vec3> = (0..2000)
            .map(|_| Vec3::new(rng.random(), rng.random(), rng.random::<f64>() * 0.1))
            .collect();
        let tree = KdTree::new(&pts);
        for _ in 0..200 {
            let q = Vec3::new(rng.random(), rng.random(), rng.random());
            let brute: Vec<(usize, f64)> = {
                let mut v: Vec<_> = pts
                    .iter()
                    .enumerate()
                    .map(|(i, p)| (i, (p - q).norm_squared()))
                    .collect();
                v.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
                v.truncate(7);
                v
            };
            assert_eq!(tree.nearest(&q).unwrap(), brute[0]);
            assert_eq!(tree.knn(&q, 7), brute);
        }
    }

    #[test]
    fn empty_tree() {
        let tree = KdTree::new(&[]);
        assert!(tree.nearest(&Vec3::zeros()).is_none());
        assert!(tree.knn(&Vec3::zeros(), 3).is_empty());
    }
}
