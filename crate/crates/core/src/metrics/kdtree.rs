//! Static k-d tree over row-major coordinates.

/// Median-split tree stored implicitly in a permutation of point indices:
/// the node of a range `lo..hi` is the element at `(lo + hi) / 2`.
#[derive(Clone, Debug)]
pub struct KdTree<'a> {
    dim: usize,
    coords: &'a [f64],
    order: Vec<usize>,
}

impl<'a> KdTree<'a> {
    /// Builds a tree over `coords.len() / dim` points.
    pub fn new(dim: usize, coords: &'a [f64]) -> Self {
        assert!(dim > 0 && coords.len().is_multiple_of(dim));
        let mut order: Vec<usize> = (0..coords.len() / dim).collect();
        build(&mut order, coords, dim, 0);
        Self { dim, coords, order }
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    fn point(&self, i: usize) -> &[f64] {
        &self.coords[i * self.dim..(i + 1) * self.dim]
    }

    /// Index and squared distance of the nearest point to `q`.
    pub fn nearest(&self, q: &[f64]) -> Option<(usize, f64)> {
        if self.is_empty() {
            return None;
        }
        let mut best = (usize::MAX, f64::INFINITY);
        self.nearest_in(q, 0, self.order.len(), 0, &mut best);
        Some(best)
    }

    fn nearest_in(&self, q: &[f64], lo: usize, hi: usize, depth: usize, best: &mut (usize, f64)) {
        if lo >= hi {
            return;
        }
        let mid = (lo + hi) / 2;
        let idx = self.order[mid];
        let p = self.point(idx);
        let d = squared_distance(q, p);
        if d < best.1 || (d == best.1 && idx < best.0) {
            *best = (idx, d);
        }
        let axis = depth % self.dim;
        let diff = q[axis] - p[axis];
        let (near, far) = if diff < 0.0 {
            ((lo, mid), (mid + 1, hi))
        } else {
            ((mid + 1, hi), (lo, mid))
        };
        self.nearest_in(q, near.0, near.1, depth + 1, best);
        if diff * diff <= best.1 {
            self.nearest_in(q, far.0, far.1, depth + 1, best);
        }
    }

    /// Number of points within Euclidean distance `r` of `q` (inclusive).
    pub fn count_within(&self, q: &[f64], r: f64) -> usize {
        let mut n = 0;
        self.within_in(q, r, r * r, 0, self.order.len(), 0, &mut |_| n += 1);
        n
    }

    /// Indices of points within distance `r` of `q`, in tree order.
    pub fn within(&self, q: &[f64], r: f64) -> Vec<usize> {
        let mut out = Vec::new();
        self.within_in(q, r, r * r, 0, self.order.len(), 0, &mut |i| out.push(i));
        out
    }

    #[allow(clippy::too_many_arguments)]
    fn within_in(
        &self,
        q: &[f64],
        r: f64,
        r2: f64,
        lo: usize,
        hi: usize,
        depth: usize,
        hit: &mut dyn FnMut(usize),
    ) {
        if lo >= hi {
            return;
        }
        let mid = (lo + hi) / 2;
        let idx = self.order[mid];
        let p = self.point(idx);
        if squared_distance(q, p) <= r2 {
            hit(idx);
        }
        let axis = depth % self.dim;
        if q[axis] - r <= p[axis] {
            self.within_in(q, r, r2, lo, mid, depth + 1, hit);
        }
        if q[axis] + r >= p[axis] {
            self.within_in(q, r, r2, mid + 1, hi, depth + 1, hit);
        }
    }
}

fn build(order: &mut [usize], coords: &[f64], dim: usize, depth: usize) {
    if order.len() <= 1 {
        return;
    }
    let axis = depth % dim;
    let mid = order.len() / 2;
    order.select_nth_unstable_by(mid, |&a, &b| {
        coords[a * dim + axis].total_cmp(&coords[b * dim + axis])
    });
    let (left, right) = order.split_at_mut(mid);
    build(left, coords, dim, depth + 1);
    build(&mut right[1..], coords, dim, depth + 1);
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}
