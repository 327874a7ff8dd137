//! Exact nearest-neighbour queries over a static 3D point set.

use crate::geometry::Point3;

/// Squared distance with a fixed summation order, shared by the tree and
/// the brute-force path so both produce identical values.
#[inline]
pub(crate) fn dist2(a: &Point3, b: &Point3) -> f64 {
    let dx = a.x - b.x;
    let dy = a.y - b.y;
    let dz = a.z - b.z;
    dx * dx + dy * dy + dz * dz
}

/// Implicit balanced k-d tree: the median of every index range is the node
/// and its split axis is stored at the same index.
#[derive(Debug, Clone)]
pub struct KdTree {
    pts: Vec<Point3>,
    axes: Vec<u8>,
}

impl KdTree {
    pub fn new(points: &[Point3]) -> Self {
        let mut pts = points.to_vec();
        let mut axes = vec![0u8; pts.len()];
        build(&mut pts, &mut axes);
        KdTree { pts, axes }
    }

    pub fn len(&self) -> usize {
        self.pts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pts.is_empty()
    }

    /// Squared distance to the nearest point; infinite for an empty tree.
    pub fn nearest_dist2(&self, q: &Point3) -> f64 {
        let mut best = f64::INFINITY;
        self.search(q, 0, self.pts.len(), &mut best);
        best
    }

    fn search(&self, q: &Point3, lo: usize, hi: usize, best: &mut f64) {
        if lo >= hi {
            return;
        }
        let mid = lo + (hi - lo) / 2;
        let p = &self.pts[mid];
        let d = dist2(q, p);
        if d < *best {
            *best = d;
        }
        let axis = self.axes[mid] as usize;
        let diff = q[axis] - p[axis];
        let (near, far) = if diff < 0.0 {
            ((lo, mid), (mid + 1, hi))
        } else {
            ((mid + 1, hi), (lo, mid))
        };
        self.search(q, near.0, near.1, best);
        if diff * diff <= *best {
            self.search(q, far.0, far.1, best);
        }
    }
}

fn build(pts: &mut [Point3], axes: &mut [u8]) {
    if pts.len() <= 1 {
        return;
    }
    // Split along the axis of largest spread.
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in pts.iter() {
        for k in 0..3 {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    let axis = (0..3)
        .max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b])))
        .unwrap();
    let mid = pts.len() / 2;
    pts.select_nth_unstable_by(mid, |a, b| a[axis].total_cmp(&b[axis]));
    axes[mid] = axis as u8;
    let (left, right) = pts.split_at_mut(mid);
    let (al, ar) = axes.split_at_mut(mid);
    build(left, al);
    build(&mut right[1..], &mut ar[1..]);
}
