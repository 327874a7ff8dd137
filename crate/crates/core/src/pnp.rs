//! EPnP with Levenberg-Marquardt refinement, and a RANSAC wrapper.

use nalgebra::{DMatrix, DVector, Matrix6, SymmetricEigen, Vector6};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, Mat3, Point2, Point3, Pose, RotationMatrix, Vec3};

/// Relative smallest-eigenvalue ratio below which the object points are
/// treated as coplanar.
const PLANAR_RATIO: f64 = 1e-8;
const LM_MAX_ITERATIONS: usize = 50;
const GN_BETA_ITERATIONS: usize = 10;

/// 2D–3D correspondences with the camera they were observed in.
#[derive(Debug, Clone)]
pub struct CorrespondenceSet {
    pub object: Vec<Point3>,
    pub image: Vec<Point2>,
    pub camera: CameraIntrinsics,
}

impl CorrespondenceSet {
    pub fn new(object: Vec<Point3>, image: Vec<Point2>, camera: CameraIntrinsics) -> Result<Self> {
        if object.len() != image.len() {
            return Err(Error::ShapeMismatch {
                expected: object.len(),
                actual: image.len(),
            });
        }
        Ok(CorrespondenceSet {
            object,
            image,
            camera,
        })
    }

    pub fn len(&self) -> usize {
        self.object.len()
    }

    pub fn is_empty(&self) -> bool {
        self.object.is_empty()
    }

    fn subset(&self, idx: &[usize]) -> CorrespondenceSet {
        CorrespondenceSet {
            object: idx.iter().map(|&i| self.object[i]).collect(),
            image: idx.iter().map(|&i| self.image[i]).collect(),
            camera: self.camera,
        }
    }

    /// Pixel reprojection error of every correspondence; infinite for
    /// points behind the camera.
    pub fn reprojection_errors(&self, pose: &Pose) -> Vec<f64> {
        self.object
            .iter()
            .zip(&self.image)
            .enumerate()
            .map(|(i, (p, uv))| {
                match self
                    .camera
                    .project_camera_point(&pose.transform(p).coords, i)
                {
                    Ok(q) => (q - uv).norm(),
                    Err(_) => f64::INFINITY,
                }
            })
            .collect()
    }
}

/// EPnP followed by Levenberg-Marquardt on the pixel reprojection error.
pub fn epnp(corr: &CorrespondenceSet) -> Result<Pose> {
    let pose = epnp_closed_form(corr)?;
    let pose = refine_lm(corr, &pose);
    check_cheirality(corr, &pose)?;
    Ok(pose)
}

fn check_cheirality(corr: &CorrespondenceSet, pose: &Pose) -> Result<()> {
    for (i, p) in corr.object.iter().enumerate() {
        let z = pose.transform(p).z;
        if !(z > 0.0) {
            return Err(Error::BehindCamera { index: i, z });
        }
    }
    Ok(())
}

/// Closed-form EPnP without the final nonlinear refinement.
pub fn epnp_closed_form(corr: &CorrespondenceSet) -> Result<Pose> {
    let n = corr.len();
    if n < 4 {
        return Err(Error::InsufficientPoints {
            required: 4,
            actual: n,
        });
    }
    let cam = &corr.camera;
    let uv: Vec<(f64, f64)> = corr
        .image
        .iter()
        .map(|p| ((p.x - cam.cx) / cam.fx, (p.y - cam.cy) / cam.fy))
        .collect();

    let (ctrl, alphas) = control_points(&corr.object)?;
    let m = ctrl.len();
    let dim = 3 * m;

    // MᵀM accumulated row pair by row pair.
    let mut mtm = DMatrix::<f64>::zeros(dim, dim);
    let mut r1 = vec![0.0; dim];
    let mut r2 = vec![0.0; dim];
    for (a, &(u, v)) in alphas.iter().zip(&uv) {
        for j in 0..m {
            r1[3 * j] = a[j];
            r1[3 * j + 1] = 0.0;
            r1[3 * j + 2] = -a[j] * u;
            r2[3 * j] = 0.0;
            r2[3 * j + 1] = a[j];
            r2[3 * j + 2] = -a[j] * v;
        }
        for i in 0..dim {
            for k in 0..dim {
                mtm[(i, k)] += r1[i] * r1[k] + r2[i] * r2[k];
            }
        }
    }
    let eig = SymmetricEigen::new(mtm);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let kernels = m.min(4);
    let v: Vec<DVector<f64>> = order[..kernels]
        .iter()
        .map(|&i| eig.eigenvectors.column(i).into_owned())
        .collect();

    let pairs: Vec<(usize, usize)> = (0..m)
        .flat_map(|a| (a + 1..m).map(move |b| (a, b)))
        .collect();
    let dist2: Vec<f64> = pairs
        .iter()
        .map(|&(a, b)| (ctrl[a] - ctrl[b]).norm_squared())
        .collect();
    // Control-point differences of each kernel vector per pair.
    let dv: Vec<Vec<Vec3>> = pairs
        .iter()
        .map(|&(a, b)| {
            v.iter()
                .map(|k| {
                    Vec3::new(
                        k[3 * a] - k[3 * b],
                        k[3 * a + 1] - k[3 * b + 1],
                        k[3 * a + 2] - k[3 * b + 2],
                    )
                })
                .collect()
        })
        .collect();

    let mut best: Option<(f64, Pose)> = None;
    for n_betas in 1..=kernels.min(3) {
        if n_betas * (n_betas + 1) / 2 > pairs.len() {
            break;
        }
        let Some(init) = linearized_betas(&dv, &dist2, n_betas) else {
            continue;
        };
        let mut betas = vec![0.0; kernels];
        betas[..n_betas].copy_from_slice(&init);
        gauss_newton_betas(&dv, &dist2, &mut betas);
        let Some(pose) = pose_from_betas(&betas, &v, &alphas, &corr.object, m) else {
            continue;
        };
        let err: f64 = corr.reprojection_errors(&pose).iter().map(|e| e * e).sum();
        if best.as_ref().is_none_or(|(e, _)| err < *e) {
            best = Some((err, pose));
        }
    }
    best.map(|(_, p)| p)
        .ok_or_else(|| Error::SingularConfiguration("no valid EPnP solution".into()))
}

/// Centroid plus principal directions, and barycentric coordinates of every
/// point. Three control points when the points are coplanar.
fn control_points(pts: &[Point3]) -> Result<(Vec<Vec3>, Vec<[f64; 4]>)> {
    let n = pts.len() as f64;
    let c0 = pts.iter().map(|p| p.coords).sum::<Vec3>() / n;
    let mut cov = Mat3::zeros();
    for p in pts {
        let d = p.coords - c0;
        cov += d * d.transpose();
    }
    cov /= n;
    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let lam: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
    if !(lam[0] > 0.0) || lam[1] <= PLANAR_RATIO * lam[0] {
        return Err(Error::SingularConfiguration(
            "object points are coincident or collinear".into(),
        ));
    }
    let planar = lam[2] <= PLANAR_RATIO * lam[0];
    let dims = if planar { 2 } else { 3 };
    let mut ctrl = vec![c0];
    let mut basis = Vec::with_capacity(dims);
    for k in 0..dims {
        let dir = eig.eigenvectors.column(order[k]).into_owned() * lam[k].sqrt();
        ctrl.push(c0 + dir);
        basis.push(dir);
    }
    let alphas = pts
        .iter()
        .map(|p| {
            let d = p.coords - c0;
            // Basis vectors are orthogonal, so coordinates are projections.
            let mut a = [0.0; 4];
            for (k, b) in basis.iter().enumerate() {
                a[k + 1] = d.dot(b) / b.norm_squared();
            }
            a[0] = 1.0 - a[1..].iter().sum::<f64>();
            a
        })
        .collect();
    Ok((ctrl, alphas))
}

/// Solve the distance constraints linearized in the products `β_k β_l`.
fn linearized_betas(dv: &[Vec<Vec3>], dist2: &[f64], n: usize) -> Option<Vec<f64>> {
    let prods: Vec<(usize, usize)> = (0..n).flat_map(|k| (k..n).map(move |l| (k, l))).collect();
    let mut l = DMatrix::<f64>::zeros(dv.len(), prods.len());
    for (r, d) in dv.iter().enumerate() {
        for (c, &(k, j)) in prods.iter().enumerate() {
            l[(r, c)] = if k == j {
                d[k].norm_squared()
            } else {
                2.0 * d[k].dot(&d[j])
            };
        }
    }
    let rho = l
        .svd(true, true)
        .solve(&DVector::from_column_slice(dist2), 1e-12)
        .ok()?;
    let idx = |k: usize, j: usize| prods.iter().position(|&p| p == (k, j)).unwrap();
    let b0 = rho[idx(0, 0)].abs().sqrt();
    if !(b0 > 0.0) {
        return None;
    }
    let mut betas = vec![b0];
    for k in 1..n {
        // β_0 β_k / β_0 keeps the relative sign.
        betas.push(rho[idx(0, k)] / b0);
    }
    Some(betas)
}

fn gauss_newton_betas(dv: &[Vec<Vec3>], dist2: &[f64], betas: &mut [f64]) {
    let k = betas.len();
    for _ in 0..GN_BETA_ITERATIONS {
        let mut jtj = DMatrix::<f64>::zeros(k, k);
        let mut jtr = DVector::<f64>::zeros(k);
        for (d, &target) in dv.iter().zip(dist2) {
            let s: Vec3 = d.iter().zip(betas.iter()).map(|(v, b)| v * *b).sum();
            let r = s.norm_squared() - target;
            let jrow: Vec<f64> = d.iter().map(|v| 2.0 * s.dot(v)).collect();
            for a in 0..k {
                jtr[a] += jrow[a] * r;
                for b in 0..k {
                    jtj[(a, b)] += jrow[a] * jrow[b];
                }
            }
        }
        let Some(step) = jtj.svd(true, true).solve(&jtr, 1e-14).ok() else {
            return;
        };
        for (b, s) in betas.iter_mut().zip(step.iter()) {
            *b -= s;
        }
        if step.norm() < 1e-15 {
            return;
        }
    }
}

fn pose_from_betas(
    betas: &[f64],
    v: &[DVector<f64>],
    alphas: &[[f64; 4]],
    object: &[Point3],
    m: usize,
) -> Option<Pose> {
    let ctrl: Vec<Vec3> = (0..m)
        .map(|j| {
            betas
                .iter()
                .zip(v)
                .map(|(b, k)| Vec3::new(k[3 * j], k[3 * j + 1], k[3 * j + 2]) * *b)
                .sum()
        })
        .collect();
    let mut cam_pts: Vec<Vec3> = alphas
        .iter()
        .map(|a| (0..m).map(|j| ctrl[j] * a[j]).sum())
        .collect();
    if cam_pts.iter().map(|p| p.z).sum::<f64>() < 0.0 {
        cam_pts.iter_mut().for_each(|p| *p = -*p);
    }
    let obj: Vec<Vec3> = object.iter().map(|p| p.coords).collect();
    kabsch(&obj, &cam_pts)
}

/// Rigid transform taking `src` onto `dst` in the least-squares sense.
pub(crate) fn kabsch(src: &[Vec3], dst: &[Vec3]) -> Option<Pose> {
    let n = src.len() as f64;
    let cs = src.iter().sum::<Vec3>() / n;
    let cd = dst.iter().sum::<Vec3>() / n;
    let mut h = Mat3::zeros();
    for (s, d) in src.iter().zip(dst) {
        h += (d - cd) * (s - cs).transpose();
    }
    let svd = h.svd(true, true);
    let (u, vt) = (svd.u?, svd.v_t?);
    let mut d = Mat3::identity();
    if (u * vt).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let r = RotationMatrix::project(&(u * d * vt)).ok()?;
    let t = cd - r.rotate(&cs);
    Some(Pose::new(r, t))
}

/// Levenberg-Marquardt on the pixel reprojection error with left-multiplied
/// rotation updates. Returns the input if no step improves it.
pub fn refine_lm(corr: &CorrespondenceSet, init: &Pose) -> Pose {
    let cost = |pose: &Pose| -> f64 {
        corr.reprojection_errors(pose)
            .iter()
            .map(|e| e * e)
            .sum::<f64>()
    };
    let cam = &corr.camera;
    let mut pose = *init;
    let mut c = cost(&pose);
    if !c.is_finite() {
        return pose;
    }
    let mut lambda = 1e-3;
    for _ in 0..LM_MAX_ITERATIONS {
        let mut jtj = Matrix6::<f64>::zeros();
        let mut jtr = Vector6::<f64>::zeros();
        for (p, uv) in corr.object.iter().zip(&corr.image) {
            let rp = pose.rotation.rotate(&p.coords);
            let x = rp + pose.translation;
            let iz = 1.0 / x.z;
            let ru = cam.fx * x.x * iz + cam.cx - uv.x;
            let rv = cam.fy * x.y * iz + cam.cy - uv.y;
            let du = Vec3::new(cam.fx * iz, 0.0, -cam.fx * x.x * iz * iz);
            let dv = Vec3::new(0.0, cam.fy * iz, -cam.fy * x.y * iz * iz);
            // ∂X/∂ω = -[Rp]×, ∂X/∂t = I
            for (d, r) in [(du, ru), (dv, rv)] {
                let jw = rp.cross(&d);
                let row = Vector6::new(jw.x, jw.y, jw.z, d.x, d.y, d.z);
                jtj += row * row.transpose();
                jtr += row * r;
            }
        }
        let mut improved = false;
        for _ in 0..10 {
            let mut a = jtj;
            for i in 0..6 {
                a[(i, i)] += lambda * jtj[(i, i)].max(1e-12);
            }
            let Some(step) = a.cholesky().map(|ch| ch.solve(&-jtr)) else {
                lambda *= 10.0;
                continue;
            };
            let omega = Vec3::new(step[0], step[1], step[2]);
            let cand = Pose::new(
                RotationMatrix::exp(&omega) * pose.rotation,
                pose.translation + Vec3::new(step[3], step[4], step[5]),
            );
            let cc = cost(&cand);
            if cc < c {
                let converged = step.norm() < 1e-14 || c - cc < 1e-18 * c.max(1e-300);
                pose = cand;
                c = cc;
                lambda = (lambda * 0.1).max(1e-12);
                improved = !converged;
                break;
            }
            lambda *= 10.0;
        }
        if !improved || c < 1e-24 {
            break;
        }
    }
    pose
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RansacConfig {
    pub max_iterations: usize,
    pub inlier_threshold_px: f64,
    pub min_inliers: usize,
    pub rng_seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        RansacConfig {
            max_iterations: 200,
            inlier_threshold_px: 3.0,
            min_inliers: 4,
            rng_seed: 0,
        }
    }
}

impl RansacConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 || !(self.inlier_threshold_px > 0.0) {
            return Err(Error::degenerate(
                "RANSAC needs at least one iteration and a positive threshold",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RansacResult {
    pub pose: Pose,
    pub inliers: Vec<bool>,
}

impl RansacResult {
    pub fn num_inliers(&self) -> usize {
        self.inliers.iter().filter(|&&b| b).count()
    }
}

fn inlier_mask(corr: &CorrespondenceSet, pose: &Pose, thr: f64) -> (Vec<bool>, f64) {
    let errs = corr.reprojection_errors(pose);
    let mask: Vec<bool> = errs.iter().map(|&e| e <= thr).collect();
    let score = errs.iter().filter(|&&e| e <= thr).sum();
    (mask, score)
}

/// RANSAC over minimal 4-point EPnP samples, then a full refit on the
/// consensus set. Deterministic for a given seed.
pub fn ransac_pnp(corr: &CorrespondenceSet, cfg: &RansacConfig) -> Result<RansacResult> {
    cfg.validate()?;
    let n = corr.len();
    if n < 4 {
        return Err(Error::InsufficientPoints {
            required: 4,
            actual: n,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let thr = cfg.inlier_threshold_px;
    let mut best: Option<(usize, f64, Vec<bool>)> = None;
    for _ in 0..cfg.max_iterations {
        let idx = sample(&mut rng, n, 4).into_vec();
        let Ok(pose) = epnp_closed_form(&corr.subset(&idx)) else {
            continue;
        };
        let (mask, err) = inlier_mask(corr, &pose, thr);
        let count = mask.iter().filter(|&&b| b).count();
        let better = best
            .as_ref()
            .is_none_or(|(c, e, _)| count > *c || (count == *c && err < *e));
        if better {
            best = Some((count, err, mask));
            if count == n {
                break;
            }
        }
    }
    let min_inliers = cfg.min_inliers.max(4);
    let Some((_, _, mut mask)) = best.filter(|(c, _, _)| *c >= min_inliers) else {
        return Err(Error::NoConsensus { min_inliers });
    };
    let count = |m: &[bool]| m.iter().filter(|&&b| b).count();
    let mut pose = Pose::identity();
    // Refit until the consensus set stops changing.
    for _ in 0..3 {
        let idx: Vec<usize> = (0..n).filter(|&i| mask[i]).collect();
        pose = epnp(&corr.subset(&idx))?;
        let (m, _) = inlier_mask(corr, &pose, thr);
        if m == mask || count(&m) < min_inliers {
            break;
        }
        mask = m;
    }
    let (mask, _) = inlier_mask(corr, &pose, thr);
    if count(&mask) < min_inliers {
        return Err(Error::NoConsensus { min_inliers });
    }
    Ok(RansacResult {
        pose,
        inliers: mask,
    })
}
