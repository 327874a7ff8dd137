//! Pose-error metrics, BOP average recall, ADD recall and COCO-style mAP.

mod knn;
mod recall;
mod render;

pub use knn::KdTree;
pub use recall::{
    add_recall, bop_average_recall, detection_map, match_errors, AddPair, ArScores,
    DetectionRecord, EstimateErrors, GtInfo, ImageErrors, LabeledBox, PairErrors, ScoredBox,
};
pub use render::{render_depth, render_depth_roi, DepthMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, Point3, Pose};
use crate::mesh::{ObjectModel, SymmetrySet, TriangleMesh};
use knn::dist2;

/// `step, 2·step, ..., n·step`.
fn grid(step: f64, n: usize) -> Vec<f64> {
    (1..=n).map(|i| step * i as f64).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricConfig {
    /// VSD misalignment tolerances as fractions of the object diameter.
    pub vsd_taus: Vec<f64>,
    /// Thresholds on the (unitless) VSD error.
    pub vsd_thresholds: Vec<f64>,
    /// Fractions of the object diameter.
    pub mssd_thresholds: Vec<f64>,
    /// Pixels at 640 px image width; scaled by `width / 640`.
    pub mspd_thresholds: Vec<f64>,
    /// Maximum model points for ADD/ADD-S/MSSD/MSPD; `None` uses every vertex.
    pub vertex_subsample: Option<usize>,
    /// Depth tolerance of the VSD visibility test against a scene depth map.
    pub vsd_visibility_delta: f64,
    /// Ground-truth instances less visible than this are ignored.
    pub min_gt_visibility: f64,
}

impl Default for MetricConfig {
    fn default() -> Self {
        MetricConfig {
            vsd_taus: grid(0.05, 10),
            vsd_thresholds: grid(0.05, 10),
            mssd_thresholds: grid(0.05, 10),
            mspd_thresholds: grid(5.0, 10),
            vertex_subsample: Some(1000),
            vsd_visibility_delta: 0.015,
            min_gt_visibility: 0.1,
        }
    }
}

impl MetricConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, g) in [
            ("vsd_taus", &self.vsd_taus),
            ("vsd_thresholds", &self.vsd_thresholds),
            ("mssd_thresholds", &self.mssd_thresholds),
            ("mspd_thresholds", &self.mspd_thresholds),
        ] {
            let ok = !g.is_empty()
                && g.iter().all(|v| v.is_finite() && *v > 0.0)
                && g.windows(2).all(|w| w[0] < w[1]);
            if !ok {
                return Err(Error::degenerate(format!(
                    "{name} must be non-empty, positive and ascending"
                )));
            }
        }
        if self.vertex_subsample == Some(0) {
            return Err(Error::degenerate("vertex_subsample must be at least 1"));
        }
        Ok(())
    }
}

/// Farthest-point subsample of at most `max` vertices, starting from the
/// first vertex. Deterministic.
pub fn subsample_points(points: &[Point3], max: Option<usize>) -> Vec<Point3> {
    let k = max.unwrap_or(usize::MAX);
    if points.len() <= k {
        return points.to_vec();
    }
    let mut chosen = Vec::with_capacity(k);
    let mut d = vec![f64::INFINITY; points.len()];
    let mut next = 0;
    for _ in 0..k {
        chosen.push(points[next]);
        let c = points[next];
        let mut far = (0, f64::NEG_INFINITY);
        for (i, p) in points.iter().enumerate() {
            d[i] = d[i].min(dist2(p, &c));
            if d[i] > far.1 {
                far = (i, d[i]);
            }
        }
        next = far.0;
    }
    chosen
}

/// A model prepared for evaluation.
#[derive(Debug, Clone)]
pub struct EvalModel {
    pub model: ObjectModel,
    /// Model points `M_i`.
    pub points: Vec<Point3>,
}

impl EvalModel {
    pub fn new(model: ObjectModel, cfg: &MetricConfig) -> Self {
        let points = subsample_points(&model.mesh.vertices, cfg.vertex_subsample);
        EvalModel { model, points }
    }

    pub fn diameter(&self) -> f64 {
        self.model.diameter
    }

    pub fn mesh(&self) -> &TriangleMesh {
        &self.model.mesh
    }

    pub fn symmetries(&self) -> &SymmetrySet {
        &self.model.symmetries
    }
}

fn transform_all(pose: &Pose, pts: &[Point3]) -> Vec<Point3> {
    pts.iter().map(|p| pose.transform(p)).collect()
}

/// Mean distance between corresponding transformed model points.
pub fn add_error(est: &Pose, gt: &Pose, points: &[Point3]) -> f64 {
    if points.is_empty() {
        return 0.0;
    }
    let sum: f64 = points
        .iter()
        .map(|p| dist2(&est.transform(p), &gt.transform(p)).sqrt())
        .sum();
    sum / points.len() as f64
}

/// Mean distance from each estimated model point to the closest ground-truth
/// model point.
pub fn adds_error(est: &Pose, gt: &Pose, points: &[Point3]) -> f64 {
    if points.is_empty() {
        return 0.0;
    }
    let tree = KdTree::new(&transform_all(gt, points));
    let sum: f64 = points
        .iter()
        .map(|p| tree.nearest_dist2(&est.transform(p)).sqrt())
        .sum();
    sum / points.len() as f64
}

/// Symmetry-aware maximum surface distance.
pub fn mssd_error(est: &Pose, gt: &Pose, points: &[Point3], symmetries: &SymmetrySet) -> f64 {
    let e = transform_all(est, points);
    symmetries
        .transforms()
        .iter()
        .map(|s| {
            let g = gt.compose(s);
            e.iter()
                .zip(points)
                .map(|(a, p)| dist2(a, &g.transform(p)))
                .fold(0.0, f64::max)
                .sqrt()
        })
        .fold(f64::INFINITY, f64::min)
}

/// Symmetry-aware maximum projected distance, pixels.
pub fn mspd_error(
    est: &Pose,
    gt: &Pose,
    points: &[Point3],
    symmetries: &SymmetrySet,
    cam: &CameraIntrinsics,
) -> Result<f64> {
    let e = crate::geometry::project(points, est, cam)?;
    let mut best = f64::INFINITY;
    for s in symmetries.transforms() {
        let g = crate::geometry::project(points, &gt.compose(s), cam)?;
        let m = e
            .iter()
            .zip(&g)
            .map(|(a, b)| (a - b).norm_squared())
            .fold(0.0, f64::max)
            .sqrt();
        best = best.min(m);
    }
    Ok(best)
}

/// Visibility of an object render: nonzero and, with a scene depth map, not
/// behind the scene surface by more than `delta`. Scene pixels without a
/// measurement do not occlude.
fn visible(d: f64, x: u32, y: u32, scene: Option<&DepthMap>, delta: f64) -> bool {
    if d <= 0.0 {
        return false;
    }
    match scene {
        Some(s) => {
            let sd = s.get(x, y);
            sd <= 0.0 || d <= sd + delta
        }
        None => true,
    }
}

/// VSD error for each tolerance in `taus` (meters), from renders of the
/// estimated and ground-truth poses.
pub fn vsd_from_depths(
    d_est: &DepthMap,
    d_gt: &DepthMap,
    scene: Option<&DepthMap>,
    taus: &[f64],
    delta: f64,
) -> Result<Vec<f64>> {
    let empty = |d: &DepthMap| d.width == 0 || d.height == 0;
    let be = if empty(d_est) {
        d_gt.bounds()
    } else {
        d_est.bounds()
    };
    let bg = if empty(d_gt) { be } else { d_gt.bounds() };
    let (x0, y0) = (be[0].min(bg[0]), be[1].min(bg[1]));
    let (x1, y1) = (be[2].max(bg[2]), be[3].max(bg[3]));
    let mut union = 0usize;
    let mut both: Vec<f64> = Vec::new();
    for y in y0..y1 {
        for x in x0..x1 {
            let (de, dg) = (d_est.get(x, y), d_gt.get(x, y));
            let ve = visible(de, x, y, scene, delta);
            let vg = visible(dg, x, y, scene, delta);
            if ve || vg {
                union += 1;
                if ve && vg {
                    both.push((de - dg).abs());
                }
            }
        }
    }
    if union == 0 {
        return Err(Error::EmptyUnion);
    }
    Ok(taus
        .iter()
        .map(|&tau| {
            let ok = both.iter().filter(|&&d| d < tau).count();
            (union - ok) as f64 / union as f64
        })
        .collect())
}

/// Visible surface discrepancy at tolerance `tau` (meters).
pub fn vsd_error(
    est: &Pose,
    gt: &Pose,
    mesh: &TriangleMesh,
    cam: &CameraIntrinsics,
    scene_depth: Option<&DepthMap>,
    tau: f64,
    delta: f64,
) -> Result<f64> {
    let de = render_depth_roi(mesh, est, cam);
    let dg = render_depth_roi(mesh, gt, cam);
    Ok(vsd_from_depths(&de, &dg, scene_depth, &[tau], delta)?[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{RotationMatrix, Vec3};
    use crate::mesh::build_symmetry_set;
    use approx::assert_abs_diff_eq;

    fn brute_adds(est: &Pose, gt: &Pose, pts: &[Point3]) -> f64 {
        let e: Vec<Point3> = pts.iter().map(|p| est.transform(p)).collect();
        let g: Vec<Point3> = pts.iter().map(|p| gt.transform(p)).collect();
        let mut sum = 0.0;
        for a in &e {
            let mut best = f64::INFINITY;
            for b in &g {
                let (dx, dy, dz) = (a.x - b.x, a.y - b.y, a.z - b.z);
                best = best.min(dx * dx + dy * dy + dz * dz);
            }
            sum += best.sqrt();
        }
        sum / pts.len() as f64
    }

    fn cam() -> CameraIntrinsics {
        CameraIntrinsics::new(572.4, 573.6, 325.3, 242.0, 640, 480).unwrap()
    }

    fn gt() -> Pose {
        Pose::new(
            RotationMatrix::about_axis(&Vec3::new(1.0, 2.0, 0.5), 0.9).unwrap(),
            Vec3::new(0.03, -0.02, 0.7),
        )
    }

    #[test]
    fn add_examples() {
        let pts = TriangleMesh::icosphere(0.05, 2).vertices;
        assert_eq!(add_error(&gt(), &gt(), &pts), 0.0);
        let v = Vec3::new(0.003, -0.004, 0.0);
        let shifted = Pose::new(gt().rotation, gt().translation + v);
        assert_abs_diff_eq!(add_error(&shifted, &gt(), &pts), 0.005, epsilon = 1e-12);
        assert_abs_diff_eq!(
            mssd_error(&shifted, &gt(), &pts, &SymmetrySet::default()),
            0.005,
            epsilon = 1e-12
        );
    }

    #[test]
    fn adds_matches_brute_force_exactly() {
        let pts = TriangleMesh::icosphere(0.05, 2).vertices;
        assert!(pts.len() <= 500);
        let est = Pose::new(
            RotationMatrix::about_axis(&Vec3::new(0.0, 1.0, 1.0), 0.2).unwrap() * gt().rotation,
            gt().translation + Vec3::new(0.001, 0.0, 0.002),
        );
        let a = adds_error(&est, &gt(), &pts);
        assert_eq!(a.to_bits(), brute_adds(&est, &gt(), &pts).to_bits());
        assert!(a <= add_error(&est, &gt(), &pts));
    }

    #[test]
    fn symmetric_estimates_score_zero() {
        let mesh = TriangleMesh::cuboid(Vec3::new(0.1, 0.06, 0.04));
        let half = Pose::new(RotationMatrix::rot_z(std::f64::consts::PI), Vec3::zeros());
        let sym = build_symmetry_set(&[half], &[], 1).unwrap();
        let est = gt().compose(&half);
        let pts = &mesh.vertices;
        assert!(adds_error(&est, &gt(), pts) < 1e-12);
        assert!(mssd_error(&est, &gt(), pts, &sym) < 1e-12);
        assert!(mspd_error(&est, &gt(), pts, &sym, &cam()).unwrap() < 1e-9);
        assert!(mssd_error(&est, &gt(), pts, &SymmetrySet::default()) > 0.05);
    }

    #[test]
    fn mspd_lateral_shift() {
        let pts = TriangleMesh::cuboid(Vec3::new(0.1, 0.1, 0.1)).vertices;
        let base = Pose::new(RotationMatrix::identity(), Vec3::new(0.0, 0.0, 1.0));
        let dx = 0.01;
        let est = Pose::new(base.rotation, base.translation + Vec3::new(dx, 0.0, 0.0));
        let e = mspd_error(&est, &base, &pts, &SymmetrySet::default(), &cam()).unwrap();
        // Nearest corners (z = 0.95) move the most.
        assert_abs_diff_eq!(e, cam().fx * dx / 0.95, epsilon = 1e-9);
    }

    #[test]
    fn vsd_examples() {
        let mesh = TriangleMesh::cuboid(Vec3::new(0.1, 0.1, 0.1));
        let p = Pose::new(RotationMatrix::rot_y(0.5), Vec3::new(0.0, 0.0, 0.8));
        assert_eq!(
            vsd_error(&p, &p, &mesh, &cam(), None, 0.01, 0.015).unwrap(),
            0.0
        );
        let far = Pose::new(p.rotation, Vec3::new(0.4, 0.0, 0.8));
        assert_eq!(
            vsd_error(&far, &p, &mesh, &cam(), None, 0.01, 0.015).unwrap(),
            1.0
        );
        let off_screen = Pose::new(p.rotation, Vec3::new(0.0, 0.0, -1.0));
        assert!(matches!(
            vsd_error(&off_screen, &off_screen, &mesh, &cam(), None, 0.01, 0.015),
            Err(Error::EmptyUnion)
        ));
    }

    #[test]
    fn vsd_half_pixels_beyond_tolerance() {
        let mut a = DepthMap::zeros(10, 4);
        let mut b = DepthMap::zeros(10, 4);
        for y in 0..4 {
            for x in 0..10 {
                a.set(x, y, 1.0);
                b.set(x, y, if x < 5 { 1.0 } else { 1.2 });
            }
        }
        let e = vsd_from_depths(&a, &b, None, &[0.1, 0.3], 0.015).unwrap();
        assert_eq!(e, vec![0.5, 0.0]);
    }

    #[test]
    fn vsd_non_increasing_in_tau() {
        let mesh = TriangleMesh::icosphere(0.05, 2);
        let est = Pose::new(RotationMatrix::identity(), Vec3::new(0.004, 0.0, 0.62));
        let gtp = Pose::new(RotationMatrix::identity(), Vec3::new(0.0, 0.0, 0.6));
        let taus: Vec<f64> = MetricConfig::default()
            .vsd_taus
            .iter()
            .map(|t| t * 0.1)
            .collect();
        let de = render_depth_roi(&mesh, &est, &cam());
        let dg = render_depth_roi(&mesh, &gtp, &cam());
        let e = vsd_from_depths(&de, &dg, None, &taus, 0.015).unwrap();
        assert!(e.windows(2).all(|w| w[1] <= w[0]), "{e:?}");
        assert!(e[0] > e[9]);
    }

    #[test]
    fn scene_depth_occludes() {
        let mut a = DepthMap::zeros(4, 1);
        let mut scene = DepthMap::zeros(4, 1);
        for x in 0..4 {
            a.set(x, 0, 1.0);
            scene.set(x, 0, if x < 2 { 0.5 } else { 1.0 });
        }
        let mut b = a.clone();
        b.set(3, 0, 1.5);
        // Pixels 0 and 1 are hidden; pixel 3 differs.
        let e = vsd_from_depths(&a, &b, Some(&scene), &[0.1], 0.015).unwrap();
        assert_abs_diff_eq!(e[0], 0.5);
    }

    #[test]
    fn subsampling() {
        let pts = TriangleMesh::icosphere(0.05, 3).vertices;
        let s = subsample_points(&pts, Some(100));
        assert_eq!(s.len(), 100);
        assert_eq!(s[0], pts[0]);
        assert_eq!(subsample_points(&pts, None).len(), pts.len());
        assert_eq!(s, subsample_points(&pts, Some(100)));
    }

    #[test]
    fn default_grids() {
        let c = MetricConfig::default();
        c.validate().unwrap();
        assert_eq!(c.vsd_taus.len(), 10);
        assert_abs_diff_eq!(c.vsd_taus[9], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(c.mspd_thresholds[0], 5.0);
    }
}
