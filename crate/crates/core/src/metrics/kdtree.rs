//! Static 3-d tree over a point cloud for exact nearest-neighbour queries.

use crate::geom::{self, Vec3};

const LEAF: usize = 8;

/// Balanced tree stored as a permutation of point indices. The node covering
/// `order[lo..hi]` splits at `mid = (lo + hi) / 2` along `axis[mid]`.
#[derive(Clone, Debug)]
pub struct KdTree {
    points: Vec<Vec3>,
    order: Vec<u32>,
    axis: Vec<u8>,
}

impl KdTree {
    pub fn new(points: Vec<Vec3>) -> Self {
        let mut order: Vec<u32> = (0..points.len() as u32).collect();
        let mut axis = vec![0u8; points.len()];
        build(&points, &mut order, &mut axis, 0);
        Self { points, order, axis }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    /// Index and squared distance of the nearest point; ties go to the
    /// lower index. `None` for an empty tree.
    pub fn nearest(&self, q: Vec3) -> Option<(usize, f64)> {
        if self.points.is_empty() {
            return None;
        }
        let mut best = (f64::INFINITY, u32::MAX);
        self.search(q, 0, self.points.len(), &mut best);
        Some((best.1 as usize, best.0))
    }

    fn consider(&self, q: Vec3, i: u32, best: &mut (f64, u32)) {
        let d = geom::dist2(q, self.points[i as usize]);
        if d < best.0 || (d == best.0 && i < best.1) {
            *best = (d, i);
        }
    }

    fn search(&self, q: Vec3, lo: usize, hi: usize, best: &mut (f64, u32)) {
        if hi - lo <= LEAF {
            for &i in &self.order[lo..hi] {
                self.consider(q, i, best);
            }
            return;
        }
        let mid = (lo + hi) / 2;
        let a = self.axis[mid] as usize;
        let pivot = self.order[mid];
        let diff = q[a] - self.points[pivot as usize][a];
        self.consider(q, pivot, best);
        let (near, far) = if diff < 0.0 {
            ((lo, mid), (mid + 1, hi))
        } else {
            ((mid + 1, hi), (lo, mid))
        };
        self.search(q, near.0, near.1, best);
        if diff * diff <= best.0 {
            self.search(q, far.0, far.1, best);
        }
    }
}

fn build(points: &[Vec3], order: &mut [u32], axis: &mut [u8], offset: usize) {
    let n = order.len();
    if n <= LEAF {
        return;
    }
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for &i in order.iter() {
        let p = points[i as usize];
        for d in 0..3 {
            lo[d] = lo[d].min(p[d]);
            hi[d] = hi[d].max(p[d]);
        }
    }
    let a = (0..3)
        .max_by(|&x, &y| (hi[x] - lo[x]).total_cmp(&(hi[y] - lo[y])))
        .unwrap_or(0);
    let mid = n / 2;
    order.select_nth_unstable_by(mid, |&x, &y| {
        points[x as usize][a]
            .total_cmp(&points[y as usize][a])
            .then(x.cmp(&y))
    });
    axis[offset + mid] = a as u8;
    let (left, right) = order.split_at_mut(mid);
    build(points, left, axis, offset);
    build(points, &mut right[1..], axis, offset + mid + 1);
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute(points: &[Vec3], q: Vec3) -> (usize, f64) {
        let mut best = (0, f64::INFINITY);
        for (i, p) in points.iter().enumerate() {
            let d = geom::dist2(q, *p);
            if d < best.1 {
                best = (i, d);
            }
        }
        best
    }

    #[test]
    fn empty_and_single() {
        assert!(KdTree::new(vec![]).nearest([0.0; 3]).is_none());
        let t = KdTree::new(vec![[1.0, 2.0, 3.0]]);
        assert_eq!(t.nearest([0.0; 3]), Some((0, 14.0)));
    }

    #[test]
    fn duplicates_resolve_to_lowest_index() {
        let pts = vec![[0.5, 0.5, 0.5]; 40];
        let t = KdTree::new(pts);
        assert_eq!(t.nearest([0.0; 3]).unwrap().0, 0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn matches_brute_force(
            pts in prop::collection::vec(prop::array::uniform3(-1.0f64..1.0), 1..300),
            qs in prop::collection::vec(prop::array::uniform3(-1.5f64..1.5), 1..40),
        ) {
            let t = KdTree::new(pts.clone());
            for q in qs {
                prop_assert_eq!(t.nearest(q).unwrap(), brute(&pts, q));
            }
        }

        #[test]
        fn grid_points_with_ties(n in 2usize..7, q in prop::array::uniform3(-0.2f64..1.2)) {
            let mut pts = Vec::new();
            for i in 0..n { for j in 0..n { for k in 0..n {
                pts.push([i as f64 / (n - 1) as f64, j as f64 / (n - 1) as f64, k as f64 / (n - 1) as f64]);
            }}}
            let t = KdTree::new(pts.clone());
            prop_assert_eq!(t.nearest(q).unwrap(), brute(&pts, q));
        }
    }
}
