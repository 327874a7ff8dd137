//! Rigid-body and camera geometry shared by the rest of the crate.
//!
//! Conventions: lengths in meters, angles in radians, image coordinates in
//! pixels with the origin at the top-left corner. Rotation matrices map object
//! coordinates into the camera frame and are exchanged as row-major arrays.

use std::ops::Mul;

use nalgebra::{Matrix3, Rotation3, Unit, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;
pub type Point2 = nalgebra::Point2<f64>;
pub type Point3 = nalgebra::Point3<f64>;

const ORTHO_TOL: f64 = 1e-9;
const DEGENERATE_EPS: f64 = 1e-12;

/// A proper rotation in SO(3).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RotationMatrix(Mat3);

/// Orthogonal polar factor by Newton iteration with determinant scaling.
/// For a well-conditioned matrix with positive determinant it is the SVD
/// projection; anything else returns `None` and goes through the SVD.
fn polar_factor(m: &Mat3) -> Option<Mat3> {
    let f = m.norm();
    if !(f.is_finite() && f > 0.0) {
        return None;
    }
    // Unit-scale so a rotation has Frobenius norm sqrt(3); det is then at
    // most 1 and bounds the smallest singular value away from zero.
    let mut x = m * (3f64.sqrt() / f);
    if !(x.determinant() > 0.1) {
        return None;
    }
    for _ in 0..20 {
        let g = x.determinant().cbrt().recip();
        let next = (x * g + x.try_inverse()?.transpose() / g) * 0.5;
        let step = (next - x).amax();
        x = next;
        if step < 1e-14 {
            break;
        }
    }
    ((x.transpose() * x - Mat3::identity()).amax() < 1e-13).then_some(x)
}

impl RotationMatrix {
    pub fn identity() -> Self {
        RotationMatrix(Mat3::identity())
    }

    /// Validates orthonormality and a positive determinant within 1e-9.
    pub fn new(m: Mat3) -> Result<Self> {
        let err = (m.transpose() * m - Mat3::identity()).amax();
        if !err.is_finite() || err > ORTHO_TOL {
            return Err(Error::degenerate(format!(
                "matrix is not orthonormal (max deviation {err:e})"
            )));
        }
        let det = m.determinant();
        if (det - 1.0).abs() > ORTHO_TOL {
            return Err(Error::degenerate(format!("determinant {det} is not +1")));
        }
        Ok(RotationMatrix(m))
    }

    /// Wraps a matrix already known to be a rotation (e.g. produced by an
    /// orthonormalization in this crate).
    pub(crate) fn from_matrix_unchecked(m: Mat3) -> Self {
        RotationMatrix(m)
    }

    /// Nearest rotation in the Frobenius sense, via SVD with determinant sign
    /// correction. Used to clean up rotations read from text files.
    pub fn project(m: &Mat3) -> Result<Self> {
        if let Some(r) = polar_factor(m) {
            return Ok(RotationMatrix(r));
        }
        let svd = m.svd(true, true);
        let (u, v_t) = match (svd.u, svd.v_t) {
            (Some(u), Some(v_t)) => (u, v_t),
            _ => return Err(Error::degenerate("SVD failed")),
        };
        let s = svd.singular_values;
        let mut order = [0usize, 1, 2];
        order.sort_by(|&a, &b| s[b].total_cmp(&s[a]));
        if s[order[1]] < 1e-9 * s[order[0]].max(1.0) || !s[order[0]].is_finite() {
            return Err(Error::degenerate(
                "matrix is rank-deficient; its rotation projection is not unique",
            ));
        }
        let d = (u * v_t).determinant().signum();
        let mut corr = Mat3::identity();
        corr[(order[2], order[2])] = d;
        Ok(RotationMatrix(u * corr * v_t))
    }

    pub fn from_row_major(r: &[f64; 9]) -> Result<Self> {
        Self::new(Mat3::from_row_slice(r))
    }

    pub fn to_row_major(&self) -> [f64; 9] {
        let m = &self.0;
        [
            m[(0, 0)],
            m[(0, 1)],
            m[(0, 2)],
            m[(1, 0)],
            m[(1, 1)],
            m[(1, 2)],
            m[(2, 0)],
            m[(2, 1)],
            m[(2, 2)],
        ]
    }

    /// Rotation by `angle` about `axis` (need not be normalized).
    pub fn about_axis(axis: &Vec3, angle: f64) -> Result<Self> {
        let n = axis.norm();
        if !(n > DEGENERATE_EPS) {
            return Err(Error::degenerate("rotation axis has zero length"));
        }
        let r = Rotation3::from_axis_angle(&Unit::new_unchecked(axis / n), angle);
        Ok(RotationMatrix(*r.matrix()))
    }

    pub fn rot_z(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        RotationMatrix(Mat3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0))
    }

    pub fn rot_y(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        RotationMatrix(Mat3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c))
    }

    /// Exponential map of a rotation vector.
    pub(crate) fn exp(omega: &Vec3) -> Self {
        RotationMatrix(*Rotation3::new(*omega).matrix())
    }

    pub fn matrix(&self) -> &Mat3 {
        &self.0
    }

    pub fn transpose(&self) -> Self {
        RotationMatrix(self.0.transpose())
    }

    pub fn column(&self, j: usize) -> Vec3 {
        self.0.column(j).into_owned()
    }

    pub fn rotate(&self, v: &Vec3) -> Vec3 {
        self.0 * v
    }
}

impl Mul for RotationMatrix {
    type Output = RotationMatrix;

    fn mul(self, rhs: RotationMatrix) -> RotationMatrix {
        RotationMatrix(self.0 * rhs.0)
    }
}

/// Continuous 6D rotation parameterization: the first two columns of a
/// rotation matrix, possibly unnormalized and non-orthogonal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation6D {
    pub a1: Vec3,
    pub a2: Vec3,
}

impl Rotation6D {
    pub fn new(a1: Vec3, a2: Vec3) -> Self {
        Rotation6D { a1, a2 }
    }

    pub fn from_array(v: &[f64; 6]) -> Self {
        Rotation6D {
            a1: Vec3::new(v[0], v[1], v[2]),
            a2: Vec3::new(v[3], v[4], v[5]),
        }
    }

    pub fn to_array(&self) -> [f64; 6] {
        [
            self.a1.x, self.a1.y, self.a1.z, self.a2.x, self.a2.y, self.a2.z,
        ]
    }
}

/// Gram-Schmidt orthonormalization of a 6D rotation into a matrix whose
/// columns are `(b1, b2, b1 x b2)`.
pub fn rot6d_to_matrix(r: &Rotation6D) -> Result<RotationMatrix> {
    let n1 = r.a1.norm();
    if !(n1 > DEGENERATE_EPS) {
        return Err(Error::degenerate("first 6D basis vector is zero"));
    }
    let b1 = r.a1 / n1;
    let u2 = r.a2 - b1 * b1.dot(&r.a2);
    let n2 = u2.norm();
    if !(n2 > DEGENERATE_EPS * r.a2.norm().max(1.0)) {
        return Err(Error::degenerate("6D basis vectors are parallel"));
    }
    let b2 = u2 / n2;
    let b3 = b1.cross(&b2);
    Ok(RotationMatrix(Mat3::from_columns(&[b1, b2, b3])))
}

pub fn matrix_to_rot6d(r: &RotationMatrix) -> Rotation6D {
    Rotation6D {
        a1: r.column(0),
        a2: r.column(1),
    }
}

/// Rigid transform: `x_cam = R x_obj + t`. Translation in meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: RotationMatrix,
    pub translation: Vec3,
}

impl Pose {
    pub fn new(rotation: RotationMatrix, translation: Vec3) -> Self {
        Pose {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Pose::new(RotationMatrix::identity(), Vec3::zeros())
    }

    pub fn transform(&self, p: &Point3) -> Point3 {
        Point3::from(self.rotation.matrix() * p.coords + self.translation)
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation.rotate(&other.translation) + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose {
            rotation: rt,
            translation: -rt.rotate(&self.translation),
        }
    }
}

/// Pinhole intrinsics without distortion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) || width == 0 || height == 0 {
            return Err(Error::degenerate(
                "camera focal lengths and image size must be positive",
            ));
        }
        Ok(CameraIntrinsics {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        })
    }

    /// From a row-major 3x3 calibration matrix.
    pub fn from_k(k: &[f64; 9], width: u32, height: u32) -> Result<Self> {
        Self::new(k[0], k[4], k[2], k[5], width, height)
    }

    pub fn k_row_major(&self) -> [f64; 9] {
        [self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0]
    }

    /// Project a camera-frame point. `index` only labels the error.
    pub fn project_camera_point(&self, p: &Vec3, index: usize) -> Result<Point2> {
        if !(p.z > 1e-9) {
            return Err(Error::BehindCamera { index, z: p.z });
        }
        Ok(Point2::new(
            self.fx * p.x / p.z + self.cx,
            self.fy * p.y / p.z + self.cy,
        ))
    }
}

/// Project object-frame points through `pose` and `cam`.
pub fn project(points: &[Point3], pose: &Pose, cam: &CameraIntrinsics) -> Result<Vec<Point2>> {
    points
        .iter()
        .enumerate()
        .map(|(i, p)| cam.project_camera_point(&pose.transform(p).coords, i))
        .collect()
}

/// Minimal rotation taking the optical axis `(0,0,1)` onto the viewing ray
/// `t / |t|`.
pub fn view_rotation(t: &Vec3) -> Result<RotationMatrix> {
    let norm = t.norm();
    if !(norm > DEGENERATE_EPS) {
        return Err(Error::degenerate("translation is the zero vector"));
    }
    let n = t / norm;
    if n.z <= -1.0 + 1e-12 {
        // Antiparallel: any half-turn about an axis in the image plane works.
        return Ok(RotationMatrix(Mat3::new(
            1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, -1.0,
        )));
    }
    Ok(RotationMatrix(view_rotation_from_unit(&n)))
}

/// Closed form of the Rodrigues rotation `I + K + K²/(1 + n_z)` with
/// `K = [z × n]ₓ`.
pub(crate) fn view_rotation_from_unit(n: &Vec3) -> Mat3 {
    let h = 1.0 / (1.0 + n.z);
    Mat3::new(
        1.0 - n.x * n.x * h,
        -n.x * n.y * h,
        n.x,
        -n.x * n.y * h,
        1.0 - n.y * n.y * h,
        n.y,
        -n.x,
        -n.y,
        n.z,
    )
}

/// Rotate an allocentric pose (orientation relative to the viewing ray) into
/// the camera frame. Translation is unchanged.
pub fn allocentric_to_egocentric(pose_allo: &Pose) -> Result<Pose> {
    let view = view_rotation(&pose_allo.translation)?;
    Ok(Pose::new(view * pose_allo.rotation, pose_allo.translation))
}

pub fn egocentric_to_allocentric(pose_ego: &Pose) -> Result<Pose> {
    let view = view_rotation(&pose_ego.translation)?;
    Ok(Pose::new(
        view.transpose() * pose_ego.rotation,
        pose_ego.translation,
    ))
}

/// Angle of the relative rotation `Ra Rbᵀ`, in `[0, π]`.
pub fn geodesic_distance(ra: &RotationMatrix, rb: &RotationMatrix) -> f64 {
    let rel = ra.matrix() * rb.matrix().transpose();
    let c = ((rel.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    c.acos()
}

/// Chordal L2 mean: the arithmetic mean matrix projected back onto SO(3).
pub fn chordal_mean_rotation(rs: &[RotationMatrix]) -> Result<RotationMatrix> {
    if rs.is_empty() {
        return Err(Error::degenerate(
            "cannot average an empty set of rotations",
        ));
    }
    if rs.len() == 1 {
        return Ok(rs[0]);
    }
    let sum = rs.iter().fold(Mat3::zeros(), |acc, r| acc + r.matrix());
    RotationMatrix::project(&(sum / rs.len() as f64))
}
