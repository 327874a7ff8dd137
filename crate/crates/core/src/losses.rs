//! Training losses with analytic gradients with respect to the network
//! outputs.
//!
//! Every regression term goes through the class-normalized average: each
//! class contributes the mean over its true locations and the contributing
//! classes are averaged. Per-location values sum the Huber loss over vector
//! components.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::encoding::{projected_diameter_px, standardize, FeatureLocation};
use crate::error::{Error, Result};
use crate::geometry::{
    egocentric_to_allocentric, matrix_to_rot6d, project, rot6d_to_matrix, view_rotation_from_unit,
    CameraIntrinsics, Mat3, Point2, Point3, Pose, Rotation6D, Vec3,
};
use crate::mesh::{ObjectModel, SymmetrySet};

pub const FOCAL_ALPHA: f64 = 0.25;
pub const FOCAL_GAMMA: f64 = 2.0;
pub const HUBER_BETA: f64 = 1.0 / 9.0;
const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub delta: f64,
    pub epsilon: f64,
    pub zeta: f64,
    pub eta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
            delta: 1.0,
            epsilon: 1.0,
            zeta: 1.0,
            eta: 1.0,
        }
    }
}

impl LossWeights {
    pub fn as_array(&self) -> [f64; 7] {
        [
            self.alpha,
            self.beta,
            self.gamma,
            self.delta,
            self.epsilon,
            self.zeta,
            self.eta,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        if self.as_array().iter().all(|w| w.is_finite() && *w >= 0.0) {
            Ok(())
        } else {
            Err(Error::degenerate(
                "loss weights must be finite and non-negative",
            ))
        }
    }
}

/// The seven loss components in weight order.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossComponents {
    pub cls: f64,
    pub bbox: f64,
    pub key: f64,
    pub rot: f64,
    pub tra: f64,
    pub proj: f64,
    pub cons: f64,
}

impl LossComponents {
    pub fn as_array(&self) -> [f64; 7] {
        [
            self.cls, self.bbox, self.key, self.rot, self.tra, self.proj, self.cons,
        ]
    }
}

pub fn total_loss(c: &LossComponents, w: &LossWeights) -> f64 {
    c.as_array()
        .iter()
        .zip(w.as_array())
        .map(|(c, w)| c * w)
        .sum()
}

/// A loss value and its gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Loss<G> {
    pub value: f64,
    pub grad: G,
}

/// `(value, derivative)` of the smooth-L1 loss.
pub fn huber(r: f64, beta: f64) -> (f64, f64) {
    debug_assert!(beta > 0.0);
    let a = r.abs();
    if a < beta {
        (0.5 * r * r / beta, r / beta)
    } else {
        (a - 0.5 * beta, r.signum())
    }
}

/// Sum of Huber over components of `pred - target`, with the derivative
/// written into `grad` scaled by `scale`.
fn huber_vec(pred: &[f64], target: &[f64], beta: f64, scale: f64, grad: &mut [f64]) -> f64 {
    let mut v = 0.0;
    for ((p, t), g) in pred.iter().zip(target).zip(grad.iter_mut()) {
        let (h, d) = huber(p - t, beta);
        v += h;
        *g = scale * d;
    }
    v
}

/// Focal loss over per-location class probability vectors, normalized by
/// the number of locations with a positive target.
pub fn focal_loss(
    probs: &[Vec<f64>],
    targets: &[Vec<f64>],
    alpha: f64,
    gamma: f64,
) -> Result<Loss<Vec<Vec<f64>>>> {
    if probs.len() != targets.len() {
        return Err(Error::ShapeMismatch {
            expected: targets.len(),
            actual: probs.len(),
        });
    }
    let mut positives = 0usize;
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(probs.len());
    for (p_row, y_row) in probs.iter().zip(targets) {
        if p_row.len() != y_row.len() {
            return Err(Error::ShapeMismatch {
                expected: y_row.len(),
                actual: p_row.len(),
            });
        }
        if y_row.iter().any(|&y| y >= 0.5) {
            positives += 1;
        }
        let mut g_row = vec![0.0; p_row.len()];
        for ((&p_raw, &y), g) in p_row.iter().zip(y_row).zip(g_row.iter_mut()) {
            let p = p_raw.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            let (pt, at, sign) = if y >= 0.5 {
                (p, alpha, 1.0)
            } else {
                (1.0 - p, 1.0 - alpha, -1.0)
            };
            let q = 1.0 - pt;
            value += -at * q.powf(gamma) * pt.ln();
            if p == p_raw {
                let d_pt = -at * (-gamma * q.powf(gamma - 1.0) * pt.ln() + q.powf(gamma) / pt);
                *g = sign * d_pt;
            }
        }
        grad.push(g_row);
    }
    let norm = positives.max(1) as f64;
    for row in &mut grad {
        for g in row.iter_mut() {
            *g /= norm;
        }
    }
    Ok(Loss {
        value: value / norm,
        grad,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegressionEntry {
    pub class_id: usize,
    pub pred: Vec<f64>,
    pub target: Vec<f64>,
}

/// True training locations with their class, prediction and target.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RegressionBatch {
    pub entries: Vec<RegressionEntry>,
}

impl RegressionBatch {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, class_id: usize, pred: Vec<f64>, target: Vec<f64>) {
        self.entries.push(RegressionEntry {
            class_id,
            pred,
            target,
        });
    }

    /// Locations per class (`l_i`).
    pub fn class_counts(&self) -> BTreeMap<usize, usize> {
        class_counts(self.entries.iter().map(|e| e.class_id))
    }

    /// Contributing classes (`a'`).
    pub fn num_classes(&self) -> usize {
        self.class_counts().len()
    }
}

fn class_counts(ids: impl Iterator<Item = usize>) -> BTreeMap<usize, usize> {
    let mut m = BTreeMap::new();
    for id in ids {
        *m.entry(id).or_insert(0) += 1;
    }
    m
}

/// Per-location weight `1 / (a' · l_i)`.
pub fn location_weights(class_ids: &[usize]) -> Result<Vec<f64>> {
    if class_ids.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let counts = class_counts(class_ids.iter().copied());
    let a = counts.len() as f64;
    Ok(class_ids
        .iter()
        .map(|id| 1.0 / (a * counts[id] as f64))
        .collect())
}

/// Combine per-location values into the class-normalized average. Classes
/// are summed in id order, locations within a class in input order.
fn class_average(class_ids: &[usize], values: &[f64]) -> f64 {
    let mut per_class: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for (&id, &v) in class_ids.iter().zip(values) {
        let e = per_class.entry(id).or_insert((0.0, 0));
        e.0 += v;
        e.1 += 1;
    }
    let a = per_class.len() as f64;
    per_class.values().map(|(s, l)| s / *l as f64).sum::<f64>() / a
}

pub fn class_normalized_regression(
    batch: &RegressionBatch,
    beta: f64,
) -> Result<Loss<Vec<Vec<f64>>>> {
    let ids: Vec<usize> = batch.entries.iter().map(|e| e.class_id).collect();
    let weights = location_weights(&ids)?;
    let mut values = Vec::with_capacity(ids.len());
    let mut grad = Vec::with_capacity(ids.len());
    for (e, w) in batch.entries.iter().zip(&weights) {
        if e.pred.len() != e.target.len() {
            return Err(Error::ShapeMismatch {
                expected: e.target.len(),
                actual: e.pred.len(),
            });
        }
        let mut g = vec![0.0; e.pred.len()];
        values.push(huber_vec(&e.pred, &e.target, beta, *w, &mut g));
        grad.push(g);
    }
    Ok(Loss {
        value: class_average(&ids, &values),
        grad,
    })
}

/// Index of the symmetry transform chosen for an instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SymmetrySelection {
    pub index: usize,
}

/// One instance's keypoint predictions and its targets under every
/// symmetry: `targets[s][j]` belongs to location `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct KeypointInstance {
    pub class_id: usize,
    pub preds: Vec<Vec<f64>>,
    pub targets: Vec<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KeypointLoss {
    pub value: f64,
    pub selections: Vec<SymmetrySelection>,
    /// Per instance, per location.
    pub grad: Vec<Vec<Vec<f64>>>,
}

/// Symmetry-aware keypoint loss over a batch of instances. Each instance
/// picks the symmetry with the lowest loss (first on ties); the chosen
/// branches are then class-normalized together.
pub fn keypoint_loss_batch(instances: &[KeypointInstance], beta: f64) -> Result<KeypointLoss> {
    let ids: Vec<usize> = instances
        .iter()
        .flat_map(|inst| std::iter::repeat_n(inst.class_id, inst.preds.len()))
        .collect();
    let weights = location_weights(&ids)?;
    let mut values = Vec::with_capacity(ids.len());
    let mut selections = Vec::with_capacity(instances.len());
    let mut grad = Vec::with_capacity(instances.len());
    let mut offset = 0;
    for inst in instances {
        if inst.targets.is_empty() {
            return Err(Error::degenerate("symmetry set is empty"));
        }
        let l = inst.preds.len();
        let w = weights.get(offset).copied().unwrap_or(0.0);
        // (symmetry, total, per-location values, gradients)
        #[allow(clippy::type_complexity)]
        let mut best: Option<(usize, f64, Vec<f64>, Vec<Vec<f64>>)> = None;
        for (s, targets) in inst.targets.iter().enumerate() {
            if targets.len() != l {
                return Err(Error::ShapeMismatch {
                    expected: l,
                    actual: targets.len(),
                });
            }
            let mut vals = Vec::with_capacity(l);
            let mut gs = Vec::with_capacity(l);
            for (p, t) in inst.preds.iter().zip(targets) {
                if p.len() != t.len() {
                    return Err(Error::ShapeMismatch {
                        expected: t.len(),
                        actual: p.len(),
                    });
                }
                let mut g = vec![0.0; p.len()];
                vals.push(huber_vec(p, t, beta, w, &mut g));
                gs.push(g);
            }
            let total: f64 = vals.iter().sum();
            if best.as_ref().is_none_or(|b| total < b.1) {
                best = Some((s, total, vals, gs));
            }
        }
        let (s, _, vals, gs) = best.expect("at least one symmetry");
        selections.push(SymmetrySelection { index: s });
        values.extend(vals);
        grad.push(gs);
        offset += l;
    }
    Ok(KeypointLoss {
        value: class_average(&ids, &values),
        selections,
        grad,
    })
}

/// Keypoint loss of a single instance; `target_provider` maps a symmetry
/// transform to the standardized targets of every location.
pub fn symmetry_min_keypoint_loss<F>(
    pred_y_g: &[Vec<f64>],
    mut target_provider: F,
    symmetries: &SymmetrySet,
    beta: f64,
) -> Result<(Loss<Vec<Vec<f64>>>, SymmetrySelection)>
where
    F: FnMut(&Pose) -> Result<Vec<Vec<f64>>>,
{
    let targets = symmetries
        .transforms()
        .iter()
        .map(&mut target_provider)
        .collect::<Result<Vec<_>>>()?;
    let inst = KeypointInstance {
        class_id: 0,
        preds: pred_y_g.to_vec(),
        targets,
    };
    let mut out = keypoint_loss_batch(std::slice::from_ref(&inst), beta)?;
    Ok((
        Loss {
            value: out.value,
            grad: out.grad.pop().unwrap(),
        },
        out.selections[0],
    ))
}

/// Standardized corner targets at each location for ground truth `gt ∘ s`.
pub fn keypoint_targets(
    model: &ObjectModel,
    gt: &Pose,
    s: &Pose,
    cam: &CameraIntrinsics,
    locations: &[FeatureLocation],
) -> Result<Vec<Vec<f64>>> {
    let pose = gt.compose(s);
    let corners: [Point2; 8] = project(&model.cuboid, &pose, cam)?
        .try_into()
        .expect("cuboid has 8 corners");
    let delta_px = projected_diameter_px(model.diameter, pose.translation.z, cam)?;
    locations
        .iter()
        .map(|loc| Ok(standardize(&corners, &loc.center_point(), delta_px)?.to_vec()))
        .collect()
}

/// Allocentric rot6d and translation targets for `gt ∘ S[selection]`.
pub fn rot_tra_targets(
    gt: &Pose,
    selection: SymmetrySelection,
    symmetries: &SymmetrySet,
) -> Result<([f64; 6], [f64; 3])> {
    let pose = gt.compose(symmetries.get(selection.index)?);
    let allo = egocentric_to_allocentric(&pose)?;
    let t = pose.translation;
    Ok((matrix_to_rot6d(&allo.rotation).to_array(), [t.x, t.y, t.z]))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RotTraLoss {
    pub rot: f64,
    pub tra: f64,
    pub grad_rot: Vec<[f64; 6]>,
    pub grad_tra: Vec<[f64; 3]>,
}

/// Direct-pose losses of one instance against the symmetry chosen by the
/// keypoint loss.
pub fn rot_tra_loss(
    pred_rot6d: &[[f64; 6]],
    pred_t: &[[f64; 3]],
    gt: &Pose,
    selection: SymmetrySelection,
    symmetries: &SymmetrySet,
    beta: f64,
) -> Result<RotTraLoss> {
    if pred_rot6d.len() != pred_t.len() {
        return Err(Error::ShapeMismatch {
            expected: pred_rot6d.len(),
            actual: pred_t.len(),
        });
    }
    let (r6, t) = rot_tra_targets(gt, selection, symmetries)?;
    let mut rb = RegressionBatch::new();
    let mut tb = RegressionBatch::new();
    for (r, p) in pred_rot6d.iter().zip(pred_t) {
        rb.push(0, r.to_vec(), r6.to_vec());
        tb.push(0, p.to_vec(), t.to_vec());
    }
    let rl = class_normalized_regression(&rb, beta)?;
    let tl = class_normalized_regression(&tb, beta)?;
    Ok(RotTraLoss {
        rot: rl.value,
        tra: tl.value,
        grad_rot: rl.grad.iter().map(|g| g[..].try_into().unwrap()).collect(),
        grad_tra: tl.grad.iter().map(|g| g[..].try_into().unwrap()).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum RotationFrame {
    #[default]
    Allocentric,
    Egocentric,
}

/// Direct pose output of one location.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PosePrediction {
    pub rot6d: [f64; 6],
    /// Meters.
    pub translation: [f64; 3],
    pub frame: RotationFrame,
}

impl PosePrediction {
    pub fn translation_vec(&self) -> Vec3 {
        Vec3::from(self.translation)
    }

    /// Egocentric pose.
    pub fn to_pose(&self) -> Result<Pose> {
        let a = rot6d_to_matrix(&Rotation6D::from_array(&self.rot6d))?;
        let t = self.translation_vec();
        let pose = Pose::new(a, t);
        match self.frame {
            RotationFrame::Egocentric => Ok(pose),
            RotationFrame::Allocentric => crate::geometry::allocentric_to_egocentric(&pose),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PoseGradient {
    pub rot6d: [f64; 6],
    pub translation: [f64; 3],
}

/// Backpropagate `∂L/∂R` and `∂L/∂t` of the egocentric pose into the raw
/// prediction.
fn pose_vjp(pred: &PosePrediction, g_r: &Mat3, g_t: &Vec3) -> Result<PoseGradient> {
    let r6 = Rotation6D::from_array(&pred.rot6d);
    let a = *rot6d_to_matrix(&r6)?.matrix();
    let t = pred.translation_vec();
    let mut g_t = *g_t;
    let g_a = match pred.frame {
        RotationFrame::Egocentric => *g_r,
        RotationFrame::Allocentric => {
            let norm = t.norm();
            let n = t / norm;
            if n.z <= -1.0 + 1e-12 {
                return Err(Error::degenerate("viewing ray along -z"));
            }
            let v = view_rotation_from_unit(&n);
            let g_v = g_r * a.transpose();
            let g_n = view_rotation_vjp(&n, &g_v);
            g_t += (g_n - n * n.dot(&g_n)) / norm;
            v.transpose() * g_r
        }
    };
    let (ga1, ga2) = gram_schmidt_vjp(&r6, &a, &g_a);
    Ok(PoseGradient {
        rot6d: [ga1.x, ga1.y, ga1.z, ga2.x, ga2.y, ga2.z],
        translation: [g_t.x, g_t.y, g_t.z],
    })
}

/// `∂L/∂n` of the closed-form view rotation given `∂L/∂V`.
fn view_rotation_vjp(n: &Vec3, g: &Mat3) -> Vec3 {
    let (x, y) = (n.x, n.y);
    let h = 1.0 / (1.0 + n.z);
    let h2 = h * h;
    let gx =
        g[(0, 0)] * (-2.0 * x * h) + (g[(0, 1)] + g[(1, 0)]) * (-y * h) + g[(0, 2)] - g[(2, 0)];
    let gy =
        (g[(0, 1)] + g[(1, 0)]) * (-x * h) + g[(1, 1)] * (-2.0 * y * h) + g[(1, 2)] - g[(2, 1)];
    let gz = g[(0, 0)] * x * x * h2
        + (g[(0, 1)] + g[(1, 0)]) * x * y * h2
        + g[(1, 1)] * y * y * h2
        + g[(2, 2)];
    Vec3::new(gx, gy, gz)
}

/// `(∂L/∂a1, ∂L/∂a2)` of Gram-Schmidt given `∂L/∂[b1 b2 b3]`.
fn gram_schmidt_vjp(r: &Rotation6D, b: &Mat3, g: &Mat3) -> (Vec3, Vec3) {
    let (b1, b2) = (b.column(0).into_owned(), b.column(1).into_owned());
    let (g1, g2, g3) = (
        g.column(0).into_owned(),
        g.column(1).into_owned(),
        g.column(2).into_owned(),
    );
    // b3 = b1 × b2
    let mut gb1 = g1 + b2.cross(&g3);
    let gb2 = g2 + g3.cross(&b1);
    // b2 = u2 / |u2|, u2 = a2 - (b1·a2) b1
    let u2 = r.a2 - b1 * b1.dot(&r.a2);
    let gu2 = (gb2 - b2 * b2.dot(&gb2)) / u2.norm();
    let ga2 = gu2 - b1 * b1.dot(&gu2);
    gb1 += -gu2 * b1.dot(&r.a2) - r.a2 * b1.dot(&gu2);
    // b1 = a1 / |a1|
    let ga1 = (gb1 - b1 * b1.dot(&gb1)) / r.a1.norm();
    (ga1, ga2)
}

/// Reprojection of the cuboid under a predicted pose, with the per-corner
/// Jacobians `∂(u, v)/∂X` at the camera-frame points.
fn reproject(
    pose: &Pose,
    g3d: &[Point3; 8],
    cam: &CameraIntrinsics,
) -> Result<[(Point2, Vec3, [Vec3; 2]); 8]> {
    let mut out = [(Point2::origin(), Vec3::zeros(), [Vec3::zeros(); 2]); 8];
    for (k, p) in g3d.iter().enumerate() {
        let x = pose.transform(p).coords;
        let uv = cam.project_camera_point(&x, k)?;
        let iz = 1.0 / x.z;
        let du = Vec3::new(cam.fx * iz, 0.0, -cam.fx * x.x * iz * iz);
        let dv = Vec3::new(0.0, cam.fy * iz, -cam.fy * x.y * iz * iz);
        out[k] = (uv, p.coords, [du, dv]);
    }
    Ok(out)
}

/// Per-location reprojection Huber loss against `targets`, returning the
/// value, the pose gradient and `∂/∂target` (all scaled by `w`).
fn reprojection_term(
    pred: &PosePrediction,
    g3d: &[Point3; 8],
    targets: &[Point2; 8],
    cam: &CameraIntrinsics,
    beta: f64,
    w: f64,
) -> Result<(f64, PoseGradient, [f64; 16])> {
    let pose = pred.to_pose()?;
    let proj = reproject(&pose, g3d, cam)?;
    let mut value = 0.0;
    let mut g_r = Mat3::zeros();
    let mut g_t = Vec3::zeros();
    let mut g_target = [0.0; 16];
    for (k, ((uv, p, [du, dv]), tgt)) in proj.iter().zip(targets).enumerate() {
        let (hu, su) = huber(uv.x - tgt.x, beta);
        let (hv, sv) = huber(uv.y - tgt.y, beta);
        value += hu + hv;
        let g_x = (du * su + dv * sv) * w;
        g_r += g_x * p.transpose();
        g_t += g_x;
        g_target[2 * k] = -su * w;
        g_target[2 * k + 1] = -sv * w;
    }
    Ok((value, pose_vjp(pred, &g_r, &g_t)?, g_target))
}

/// Reprojection of the cuboid under each predicted pose of one instance
/// against the ground-truth corner projections.
pub fn projection_loss(
    preds: &[PosePrediction],
    g3d: &[Point3; 8],
    gt_corners: &[Point2; 8],
    cam: &CameraIntrinsics,
    beta: f64,
) -> Result<Loss<Vec<PoseGradient>>> {
    if preds.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let w = 1.0 / preds.len() as f64;
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(preds.len());
    for p in preds {
        let (v, g, _) = reprojection_term(p, g3d, gt_corners, cam, beta, w)?;
        value += v;
        grad.push(g);
    }
    Ok(Loss {
        value: value * w,
        grad,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConsistencyLoss {
    pub value: f64,
    pub pose_grad: Vec<PoseGradient>,
    /// `∂L/∂Ĝ`, laid out `[x0, y0, x1, y1, ...]`.
    pub corner_grad: Vec<[f64; 16]>,
}

/// Agreement between each location's predicted corners and the reprojection
/// of its own predicted pose.
pub fn consistency_loss(
    preds: &[PosePrediction],
    g3d: &[Point3; 8],
    pred_corners: &[[Point2; 8]],
    cam: &CameraIntrinsics,
    beta: f64,
) -> Result<ConsistencyLoss> {
    if preds.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if preds.len() != pred_corners.len() {
        return Err(Error::ShapeMismatch {
            expected: preds.len(),
            actual: pred_corners.len(),
        });
    }
    let w = 1.0 / preds.len() as f64;
    let mut out = ConsistencyLoss {
        value: 0.0,
        pose_grad: Vec::with_capacity(preds.len()),
        corner_grad: Vec::with_capacity(preds.len()),
    };
    for (p, c) in preds.iter().zip(pred_corners) {
        let (v, g, gc) = reprojection_term(p, g3d, c, cam, beta, w)?;
        out.value += v;
        out.pose_grad.push(g);
        out.corner_grad.push(gc);
    }
    out.value *= w;
    Ok(out)
}

/// Ground-truth corner projections for the symmetry chosen by the keypoint
/// loss.
pub fn resolved_gt_corners(
    model: &ObjectModel,
    gt: &Pose,
    selection: SymmetrySelection,
    cam: &CameraIntrinsics,
) -> Result<[Point2; 8]> {
    let pose = gt.compose(model.symmetries.get(selection.index)?);
    Ok(project(&model.cuboid, &pose, cam)?
        .try_into()
        .expect("cuboid has 8 corners"))
}

/// Plain gradient-descent step on a prediction.
pub fn descend(pred: &mut PosePrediction, grad: &PoseGradient, lr: f64) {
    for (p, g) in pred.rot6d.iter_mut().zip(grad.rot6d) {
        *p -= lr * g;
    }
    for (p, g) in pred.translation.iter_mut().zip(grad.translation) {
        *p -= lr * g;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::RotationMatrix;
    use crate::mesh::TriangleMesh;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn fd<F: FnMut(f64) -> f64>(mut f: F, x: f64) -> f64 {
        let h = 1e-5;
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() <= 1e-4 * a.abs().max(b.abs()).max(1e-6)
    }

    #[test]
    fn huber_examples() {
        let b = HUBER_BETA;
        assert_eq!(huber(0.0, b).0, 0.0);
        assert_abs_diff_eq!(huber(b, b).0, 0.5 * b, epsilon = 1e-15);
        assert_abs_diff_eq!(huber(b * (1.0 - 1e-12), b).0, 0.5 * b, epsilon = 1e-12);
        assert_abs_diff_eq!(huber(1.0, b).0, 1.0 - 1.0 / 18.0, epsilon = 1e-15);
        assert_abs_diff_eq!(huber(-1.0, b).1, -1.0);
    }

    #[test]
    fn focal_examples() {
        let l = focal_loss(&[vec![0.5]], &[vec![1.0]], FOCAL_ALPHA, FOCAL_GAMMA).unwrap();
        assert_abs_diff_eq!(l.value, 0.25 * 0.25 * 2f64.ln(), epsilon = 1e-15);
        let y = vec![vec![1.0, 0.0], vec![0.0, 0.0]];
        let l = focal_loss(&y, &y, FOCAL_ALPHA, FOCAL_GAMMA).unwrap();
        assert!(l.value < 1e-6);
        assert!(matches!(
            focal_loss(&[vec![0.5]], &[vec![1.0, 0.0]], 0.25, 2.0),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn focal_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..3).map(|_| rng.random_range(0.05..0.95)).collect())
            .collect();
        let y = vec![
            vec![1.0, 0.0, 0.0],
            vec![0.0, 0.0, 0.0],
            vec![0.0, 0.0, 1.0],
            vec![0.0, 0.0, 0.0],
        ];
        let l = focal_loss(&p, &y, FOCAL_ALPHA, FOCAL_GAMMA).unwrap();
        for i in 0..4 {
            for j in 0..3 {
                let g = fd(
                    |x| {
                        let mut q = p.clone();
                        q[i][j] = x;
                        focal_loss(&q, &y, FOCAL_ALPHA, FOCAL_GAMMA).unwrap().value
                    },
                    p[i][j],
                );
                assert!(close(l.grad[i][j], g), "{} vs {g}", l.grad[i][j]);
            }
        }
    }

    #[test]
    fn class_normalization() {
        let e = huber(0.3, HUBER_BETA).0;
        let mut b = RegressionBatch::new();
        b.push(0, vec![0.3], vec![0.0]);
        b.push(0, vec![0.0], vec![0.3]);
        b.push(1, vec![1.3], vec![1.0]);
        let l = class_normalized_regression(&b, HUBER_BETA).unwrap();
        assert_abs_diff_eq!(l.value, e, epsilon = 1e-15);
        assert_abs_diff_eq!(l.grad[0][0], 0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(l.grad[2][0], 0.5, epsilon = 1e-15);
        assert_eq!(b.num_classes(), 2);
        assert!(matches!(
            class_normalized_regression(&RegressionBatch::new(), 1.0),
            Err(Error::EmptyBatch)
        ));
        let mut same = RegressionBatch::new();
        same.push(4, vec![1.0, 2.0], vec![1.0, 2.0]);
        assert_eq!(
            class_normalized_regression(&same, HUBER_BETA)
                .unwrap()
                .value,
            0.0
        );
    }

    #[test]
    fn total_loss_examples() {
        let c = LossComponents {
            cls: 1.0,
            bbox: 2.0,
            key: 3.0,
            rot: 4.0,
            tra: 5.0,
            proj: 6.0,
            cons: 7.0,
        };
        assert_eq!(total_loss(&c, &LossWeights::default()), 28.0);
        let zero = LossWeights {
            alpha: 0.0,
            beta: 0.0,
            gamma: 0.0,
            delta: 0.0,
            epsilon: 0.0,
            zeta: 0.0,
            eta: 0.0,
        };
        assert_eq!(total_loss(&c, &zero), 0.0);
        assert_eq!(total_loss(&c, &LossWeights { gamma: 1.0, ..zero }), 3.0);
        assert!(LossWeights { eta: -1.0, ..zero }.validate().is_err());
    }

    fn model() -> ObjectModel {
        let half = Pose::new(RotationMatrix::rot_z(std::f64::consts::PI), Vec3::zeros());
        let sym = crate::mesh::build_symmetry_set(&[half], &[], 1).unwrap();
        ObjectModel::new(0, 1, TriangleMesh::cuboid(Vec3::new(0.08, 0.05, 0.03)), sym).unwrap()
    }

    fn cam() -> CameraIntrinsics {
        CameraIntrinsics::new(572.4, 573.6, 325.3, 242.0, 640, 480).unwrap()
    }

    fn gt() -> Pose {
        Pose::new(
            RotationMatrix::about_axis(&Vec3::new(0.3, -0.5, 0.8), 0.7).unwrap(),
            Vec3::new(0.1, -0.05, 0.9),
        )
    }

    fn locations() -> Vec<FeatureLocation> {
        let spec = crate::encoding::PyramidSpec::default();
        vec![
            FeatureLocation::new(&spec, 0, 26, 44),
            FeatureLocation::new(&spec, 0, 26, 45),
            FeatureLocation::new(&spec, 0, 27, 44),
        ]
    }

    #[test]
    fn keypoint_selection_and_invariance() {
        let m = model();
        let locs = locations();
        let flipped = gt().compose(m.symmetries.get(1).unwrap());
        let pred = keypoint_targets(&m, &flipped, &Pose::identity(), &cam(), &locs).unwrap();
        let provider = |g: Pose| {
            let m = &m;
            let locs = &locs;
            move |s: &Pose| keypoint_targets(m, &g, s, &cam(), locs)
        };
        let (l, sel) =
            symmetry_min_keypoint_loss(&pred, provider(gt()), &m.symmetries, HUBER_BETA).unwrap();
        assert!(l.value < 1e-12);
        assert_eq!(sel.index, 1);
        // Replacing the ground truth by its symmetric copy gives the same value.
        let (l2, sel2) =
            symmetry_min_keypoint_loss(&pred, provider(flipped), &m.symmetries, HUBER_BETA)
                .unwrap();
        assert!(l2.value < 1e-12);
        assert_eq!(sel2.index, 0);
        // Identity-only set matches the plain regression loss.
        let plain = keypoint_targets(&m, &gt(), &Pose::identity(), &cam(), &locs).unwrap();
        let mut batch = RegressionBatch::new();
        for (p, t) in pred.iter().zip(&plain) {
            batch.push(0, p.clone(), t.clone());
        }
        let reg = class_normalized_regression(&batch, HUBER_BETA).unwrap();
        let (only, _) =
            symmetry_min_keypoint_loss(&pred, provider(gt()), &SymmetrySet::default(), HUBER_BETA)
                .unwrap();
        assert_eq!(only.value, reg.value);
        assert!(reg.value > 0.1);
    }

    #[test]
    fn keypoint_two_branch_hand_computation() {
        let preds = vec![vec![0.4, 0.0]];
        let inst = KeypointInstance {
            class_id: 0,
            preds: preds.clone(),
            targets: vec![vec![vec![0.0, 0.0]], vec![vec![1.0, 0.0]]],
        };
        let l = keypoint_loss_batch(&[inst], HUBER_BETA).unwrap();
        // |0.4| → 0.4 - 1/18; |0.6| → 0.6 - 1/18.
        assert_abs_diff_eq!(l.value, 0.4 - 1.0 / 18.0, epsilon = 1e-15);
        assert_eq!(l.selections[0].index, 0);
        let tie = KeypointInstance {
            class_id: 0,
            preds: vec![vec![0.5]],
            targets: vec![vec![vec![0.0]], vec![vec![1.0]]],
        };
        assert_eq!(
            keypoint_loss_batch(&[tie], HUBER_BETA).unwrap().selections[0].index,
            0
        );
    }

    #[test]
    fn rot_tra_shared_selection() {
        let m = model();
        let s = SymmetrySelection { index: 1 };
        let (r6, t) = rot_tra_targets(&gt(), s, &m.symmetries).unwrap();
        let l = rot_tra_loss(&[r6], &[t], &gt(), s, &m.symmetries, HUBER_BETA).unwrap();
        assert_eq!((l.rot, l.tra), (0.0, 0.0));
        let wrong = rot_tra_loss(
            &[r6],
            &[t],
            &gt(),
            SymmetrySelection { index: 0 },
            &m.symmetries,
            HUBER_BETA,
        )
        .unwrap();
        assert!(wrong.rot > 0.1);
        assert!(matches!(
            rot_tra_loss(
                &[r6],
                &[t],
                &gt(),
                SymmetrySelection { index: 2 },
                &m.symmetries,
                1.0
            ),
            Err(Error::IndexOutOfRange { .. })
        ));
    }

    fn prediction_of(pose: &Pose, frame: RotationFrame) -> PosePrediction {
        let r = match frame {
            RotationFrame::Egocentric => pose.rotation,
            RotationFrame::Allocentric => egocentric_to_allocentric(pose).unwrap().rotation,
        };
        let t = pose.translation;
        PosePrediction {
            rot6d: matrix_to_rot6d(&r).to_array(),
            translation: [t.x, t.y, t.z],
            frame,
        }
    }

    #[test]
    fn projection_examples() {
        let m = model();
        let g = resolved_gt_corners(&m, &gt(), SymmetrySelection { index: 0 }, &cam()).unwrap();
        let p = prediction_of(&gt(), RotationFrame::Allocentric);
        let l = projection_loss(&[p], &m.cuboid, &g, &cam(), HUBER_BETA).unwrap();
        assert!(l.value < 1e-18);
        // Fronto-parallel object shifted sideways at fixed depth.
        let front = Pose::new(RotationMatrix::identity(), Vec3::new(0.0, 0.0, 1.0));
        let g: [Point2; 8] = project(&m.cuboid, &front, &cam())
            .unwrap()
            .try_into()
            .unwrap();
        let dx = 0.002;
        let mut p = prediction_of(&front, RotationFrame::Egocentric);
        p.translation[0] += dx;
        let l = projection_loss(&[p], &m.cuboid, &g, &cam(), HUBER_BETA).unwrap();
        let expected: f64 = m
            .cuboid
            .iter()
            .map(|c| huber(cam().fx * dx / (1.0 + c.z), HUBER_BETA).0)
            .sum();
        assert_abs_diff_eq!(l.value, expected, epsilon = 1e-9);
    }

    #[test]
    fn consistency_examples() {
        let m = model();
        let p = prediction_of(&gt(), RotationFrame::Allocentric);
        let g: [Point2; 8] = project(&m.cuboid, &gt(), &cam())
            .unwrap()
            .try_into()
            .unwrap();
        let l = consistency_loss(&[p], &m.cuboid, &[g], &cam(), HUBER_BETA).unwrap();
        assert!(l.value < 1e-18);
        let shifted = g.map(|c| Point2::new(c.x + 1.0, c.y + 1.0));
        let l = consistency_loss(&[p], &m.cuboid, &[shifted], &cam(), HUBER_BETA).unwrap();
        assert_abs_diff_eq!(l.value, 16.0 * huber(1.0, HUBER_BETA).0, epsilon = 1e-9);
    }

    fn random_prediction(rng: &mut ChaCha8Rng, frame: RotationFrame) -> PosePrediction {
        let mut rot6d = [0.0; 6];
        for v in &mut rot6d {
            *v = rng.random_range(-1.0..1.0);
        }
        PosePrediction {
            rot6d,
            translation: [
                rng.random_range(-0.2..0.2),
                rng.random_range(-0.2..0.2),
                rng.random_range(0.6..1.4),
            ],
            frame,
        }
    }

    fn check_pose_grad<F: Fn(&PosePrediction) -> f64>(p: &PosePrediction, g: &PoseGradient, f: F) {
        for i in 0..6 {
            let n = fd(
                |x| {
                    let mut q = *p;
                    q.rot6d[i] = x;
                    f(&q)
                },
                p.rot6d[i],
            );
            assert!(close(g.rot6d[i], n), "rot6d[{i}]: {} vs {n}", g.rot6d[i]);
        }
        for i in 0..3 {
            let n = fd(
                |x| {
                    let mut q = *p;
                    q.translation[i] = x;
                    f(&q)
                },
                p.translation[i],
            );
            assert!(
                close(g.translation[i], n),
                "t[{i}]: {} vs {n}",
                g.translation[i]
            );
        }
    }

    #[test]
    fn reprojection_gradients_match_finite_differences() {
        let m = model();
        let c = cam();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for frame in [RotationFrame::Allocentric, RotationFrame::Egocentric] {
            for _ in 0..10 {
                let p = random_prediction(&mut rng, frame);
                let target: [Point2; 8] = std::array::from_fn(|_| {
                    Point2::new(
                        rng.random_range(200.0..450.0),
                        rng.random_range(150.0..350.0),
                    )
                });
                let l = projection_loss(&[p], &m.cuboid, &target, &c, HUBER_BETA).unwrap();
                check_pose_grad(&p, &l.grad[0], |q| {
                    projection_loss(&[*q], &m.cuboid, &target, &c, HUBER_BETA)
                        .unwrap()
                        .value
                });
                let l = consistency_loss(&[p], &m.cuboid, &[target], &c, HUBER_BETA).unwrap();
                for k in 0..16 {
                    let n = fd(
                        |x| {
                            let mut t = target;
                            if k % 2 == 0 {
                                t[k / 2].x = x;
                            } else {
                                t[k / 2].y = x;
                            }
                            consistency_loss(&[p], &m.cuboid, &[t], &c, HUBER_BETA)
                                .unwrap()
                                .value
                        },
                        if k % 2 == 0 {
                            target[k / 2].x
                        } else {
                            target[k / 2].y
                        },
                    );
                    assert!(close(l.corner_grad[0][k], n));
                }
            }
        }
    }

    #[test]
    fn gradient_descent_reduces_projection_loss() {
        let m = model();
        let g = resolved_gt_corners(&m, &gt(), SymmetrySelection { index: 0 }, &cam()).unwrap();
        let mut p = prediction_of(&gt(), RotationFrame::Allocentric);
        p.rot6d[0] += 0.05;
        p.translation[2] += 0.01;
        let start = projection_loss(&[p], &m.cuboid, &g, &cam(), HUBER_BETA)
            .unwrap()
            .value;
        for _ in 0..2000 {
            let l = projection_loss(&[p], &m.cuboid, &g, &cam(), HUBER_BETA).unwrap();
            descend(&mut p, &l.grad[0], 2e-8);
        }
        let end = projection_loss(&[p], &m.cuboid, &g, &cam(), HUBER_BETA)
            .unwrap()
            .value;
        assert!(end < 0.5 * start, "{start} -> {end}");
    }
}
