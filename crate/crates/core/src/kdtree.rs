//! Static 3-d tree for exact nearest-neighbour queries.
//!
//! Ties on distance resolve to the lowest point index, so results agree
//! with a brute-force scan bit for bit.

use nalgebra::Vector3;

#[derive(Debug, Clone)]
pub struct KdTree {
    points: Vec<Vector3<f64>>,
    /// Point indices arranged so that every subrange [lo, hi) is a subtree
    /// whose root sits at the midpoint.
    order: Vec<usize>,
    /// Split axis of the subtree rooted at each position of `order`.
    axis: Vec<u8>,
}

impl KdTree {
    pub fn new(points: &[Vector3<f64>]) -> Self {
        let mut tree = Self {
            points: points.to_vec(),
            order: (0..points.len()).collect(),
            axis: vec![0; points.len()],
        };
        tree.build(0, points.len(), 0);
        tree
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    fn build(&mut self, lo: usize, hi: usize, depth: usize) {
        if hi <= lo {
            return;
        }
        // Split on the widest axis of the subrange.
        let mut min = Vector3::repeat(f64::INFINITY);
        let mut max = Vector3::repeat(f64::NEG_INFINITY);
        for &i in &self.order[lo..hi] {
            min = min.inf(&self.points[i]);
            max = max.sup(&self.points[i]);
        }
        let ax = if hi - lo > 1 { (max - min).imax() } else { depth % 3 };
        let mid = lo + (hi - lo) / 2;
        let points = &self.points;
        self.order[lo..hi].select_nth_unstable_by(mid - lo, |&a, &b| {
            points[a][ax].total_cmp(&points[b][ax]).then(a.cmp(&b))
        });
        self.axis[mid] = ax as u8;
        self.build(lo, mid, depth + 1);
        self.build(mid + 1, hi, depth + 1);
    }

    /// Nearest point to `q` as (index, squared distance). `skip` excludes one
    /// index (used for self-queries).
    pub fn nearest(&self, q: &Vector3<f64>, skip: Option<usize>) -> Option<(usize, f64)> {
        let mut best = (usize::MAX, f64::INFINITY);
        self.search(0, self.points.len(), q, skip, &mut best);
        (best.0 != usize::MAX).then_some(best)
    }

    /// The `k` nearest points as (index, squared distance), closest first.
    pub fn k_nearest(&self, q: &Vector3<f64>, k: usize, skip: Option<usize>) -> Vec<(usize, f64)> {
        let mut found: Vec<(usize, f64)> = Vec::with_capacity(k + 1);
        if k > 0 {
            self.search_k(0, self.points.len(), q, k, skip, &mut found);
        }
        found
    }

    fn better(cand: (usize, f64), best: (usize, f64)) -> bool {
        cand.1 < best.1 || (cand.1 == best.1 && cand.0 < best.0)
    }

    fn search(&self, lo: usize, hi: usize, q: &Vector3<f64>, skip: Option<usize>, best: &mut (usize, f64)) {
        if hi <= lo {
            return;
        }
        let mid = lo + (hi - lo) / 2;
        let idx = self.order[mid];
        if Some(idx) != skip {
            let d2 = (self.points[idx] - q).norm_squared();
            if Self::better((idx, d2), *best) {
                *best = (idx, d2);
            }
        }
        let ax = self.axis[mid] as usize;
        let diff = q[ax] - self.points[idx][ax];
        let (near, far) = if diff < 0.0 {
            ((lo, mid), (mid + 1, hi))
        } else {
            ((mid + 1, hi), (lo, mid))
        };
        self.search(near.0, near.1, q, skip, best);
        if diff * diff <= best.1 {
            self.search(far.0, far.1, q, skip, best);
        }
    }

    fn search_k(
        &self,
        lo: usize,
        hi: usize,
        q: &Vector3<f64>,
        k: usize,
        skip: Option<usize>,
        found: &mut Vec<(usize, f64)>,
    ) {
        if hi <= lo {
            return;
        }
        let mid = lo + (hi - lo) / 2;
        let idx = self.order[mid];
        if Some(idx) != skip {
            let cand = (idx, (self.points[idx] - q).norm_squared());
            if found.len() < k || Self::better(cand, found[found.len() - 1]) {
                let pos = found.partition_point(|&e| Self::better(e, cand));
                found.insert(pos, cand);
                found.truncate(k);
            }
        }
        let ax = self.axis[mid] as usize;
        let diff = q[ax] - self.points[idx][ax];
        let (near, far) = if diff < 0.0 {
            ((lo, mid), (mid + 1, hi))
        } else {
            ((mid + 1, hi), (lo, mid))
        };
        self.search_k(near.0, near.1, q, k, skip, found);
        let bound = if found.len() < k {
            f64::INFINITY
        } else {
            found[found.len() - 1].1
        };
        if diff * diff <= bound {
            self.search_k(far.0, far.1, q, k, skip, found);
        }
    }
}
