//! Dataset-level evaluation of a results file against ground truth.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::bop::{projected_box, GtImage, ResultRow};
use crate::error::{Error, Result};
use crate::geometry::Pose;
use crate::metrics::{
    add_error, add_recall, adds_error, bop_average_recall, detection_map, mspd_error, mssd_error,
    render_depth_roi, vsd_from_depths, AddPair, ArScores, DepthMap, DetectionRecord,
    EstimateErrors, EvalModel, GtInfo, ImageErrors, LabeledBox, MetricConfig, PairErrors,
    ScoredBox,
};
use crate::par::{self, Execution};

/// ADD(-S) success threshold as a fraction of the object diameter.
pub const ADD_THRESHOLD_FRACTION: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectReport {
    pub obj_id: u32,
    /// Ground-truth instances counted in recall.
    pub num_gt: usize,
    pub num_estimates: usize,
    #[serde(flatten)]
    pub ar: ArScores,
    pub add_recall: f64,
    /// ADD-S was used instead of ADD.
    pub symmetric: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(flatten)]
    pub ar: ArScores,
    pub add_recall: f64,
    pub map: f64,
    pub num_images: usize,
    pub num_gt: usize,
    pub num_estimates: usize,
    /// Estimates for images absent from the ground truth.
    pub ignored_estimates: usize,
    pub per_object: Vec<ObjectReport>,
    /// How VSD visibility masks were formed.
    pub vsd_visibility: String,
}

/// Everything computed for one image.
#[derive(Debug, Clone)]
pub struct ImageEvaluation {
    pub errors: ImageErrors,
    pub add_pairs: Vec<AddPair>,
    pub boxes: DetectionRecord,
}

struct Estimate {
    model: usize,
    pose: Pose,
    score: f64,
}

fn vsd_pair(de: &DepthMap, dg: &DepthMap, taus: &[f64]) -> Vec<f64> {
    let [a0, a1, a2, a3] = de.bounds();
    let [b0, b1, b2, b3] = dg.bounds();
    let disjoint = a2 <= b0 || b2 <= a0 || a3 <= b1 || b3 <= a1;
    if disjoint || de.width * de.height == 0 || dg.width * dg.height == 0 {
        return vec![1.0; taus.len()];
    }
    // Both renders empty: nothing to compare, count as failure.
    vsd_from_depths(de, dg, None, taus, 0.0).unwrap_or_else(|_| vec![1.0; taus.len()])
}

fn pair_errors(
    model: &EvalModel,
    est: &Pose,
    gt: &Pose,
    d_est: &DepthMap,
    d_gt: &DepthMap,
    img: &GtImage,
    cfg: &MetricConfig,
) -> PairErrors {
    let taus: Vec<f64> = cfg.vsd_taus.iter().map(|f| f * model.diameter()).collect();
    PairErrors {
        vsd: vsd_pair(d_est, d_gt, &taus),
        mssd: mssd_error(est, gt, &model.points, model.symmetries()),
        // An estimate behind the camera has no projection; it fails.
        mspd: mspd_error(est, gt, &model.points, model.symmetries(), &img.camera)
            .unwrap_or(f64::INFINITY),
    }
}

fn pose_error(model: &EvalModel, est: &Pose, gt: &Pose) -> f64 {
    if model.model.is_symmetric() {
        adds_error(est, gt, &model.points)
    } else {
        add_error(est, gt, &model.points)
    }
}

fn model_index(index: &HashMap<u32, usize>, obj_id: u32) -> Result<usize> {
    index
        .get(&obj_id)
        .copied()
        .ok_or_else(|| Error::MissingAnnotation(format!("no model for object id {obj_id}")))
}

/// Errors, ADD pairs and boxes of one image. Metric classes are indices
/// into `models`.
pub fn evaluate_image(
    img: &GtImage,
    estimates: &[&ResultRow],
    models: &[EvalModel],
    cfg: &MetricConfig,
) -> Result<ImageEvaluation> {
    let index: HashMap<u32, usize> = models
        .iter()
        .enumerate()
        .map(|(i, m)| (m.model.obj_id, i))
        .collect();
    let mut gt_poses = Vec::with_capacity(img.instances.len());
    let mut gts = Vec::with_capacity(img.instances.len());
    for inst in &img.instances {
        let m = model_index(&index, inst.obj_id)?;
        gt_poses.push(inst.pose()?);
        gts.push(GtInfo {
            class_id: m,
            diameter: models[m].diameter(),
            valid: inst.visibility() >= cfg.min_gt_visibility,
        });
    }
    let ests = estimates
        .iter()
        .map(|r| {
            Ok(Estimate {
                model: model_index(&index, r.obj_id)?,
                pose: r.pose()?,
                score: r.score,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut errors = ImageErrors {
        gts,
        estimates: ests
            .iter()
            .map(|e| EstimateErrors {
                class_id: e.model,
                score: e.score,
                errors: vec![None; img.instances.len()],
            })
            .collect(),
        mspd_scale: img.camera.width as f64 / 640.0,
    };
    let ranked = errors.ranked_estimates();

    let mut gt_depth: Vec<Option<DepthMap>> = vec![None; gt_poses.len()];
    for &i in &ranked {
        let e = &ests[i];
        let model = &models[e.model];
        let d_est = render_depth_roi(model.mesh(), &e.pose, &img.camera);
        for j in 0..gt_poses.len() {
            if errors.gts[j].class_id != e.model {
                continue;
            }
            let d_gt = gt_depth[j]
                .get_or_insert_with(|| render_depth_roi(model.mesh(), &gt_poses[j], &img.camera));
            errors.estimates[i].errors[j] = Some(pair_errors(
                model,
                &e.pose,
                &gt_poses[j],
                &d_est,
                d_gt,
                img,
                cfg,
            ));
        }
    }

    // ADD(-S): greedy in score order, each estimate takes the closest
    // unmatched valid instance of its object.
    let mut matched: Vec<Option<usize>> = vec![None; gt_poses.len()];
    for &i in &ranked {
        let e = &ests[i];
        let mut best: Option<(usize, f64)> = None;
        for j in 0..gt_poses.len() {
            let g = &errors.gts[j];
            if g.class_id != e.model || !g.valid || matched[j].is_some() {
                continue;
            }
            let v = pose_error(&models[e.model], &e.pose, &gt_poses[j]);
            if best.is_none_or(|(_, b)| v < b) {
                best = Some((j, v));
            }
        }
        if let Some((j, _)) = best {
            matched[j] = Some(i);
        }
    }
    let add_pairs = (0..gt_poses.len())
        .filter(|&j| errors.gts[j].valid)
        .map(|j| AddPair {
            model: errors.gts[j].class_id,
            estimate: matched[j].map(|i| ests[i].pose),
            gt: gt_poses[j],
        })
        .collect();

    let mut boxes = DetectionRecord::default();
    for (j, pose) in gt_poses.iter().enumerate() {
        let m = errors.gts[j].class_id;
        boxes.ground_truth.push(LabeledBox {
            class_id: m,
            bbox: projected_box(&models[m].points, pose, &img.camera)?,
        });
    }
    for e in &ests {
        // Estimates behind the camera have no box.
        if let Ok(bbox) = projected_box(&models[e.model].points, &e.pose, &img.camera) {
            boxes.predictions.push(ScoredBox {
                class_id: e.model,
                score: e.score,
                bbox,
            });
        }
    }
    Ok(ImageEvaluation {
        errors,
        add_pairs,
        boxes,
    })
}

/// Evaluate results against ground truth. Images are processed
/// independently and merged in ground-truth order.
pub fn evaluate(
    gt: &[GtImage],
    results: &[ResultRow],
    models: &[EvalModel],
    cfg: &MetricConfig,
    exec: Execution,
) -> Result<EvalReport> {
    cfg.validate()?;
    let mut by_image: BTreeMap<(u32, u32), Vec<&ResultRow>> = BTreeMap::new();
    for r in results {
        by_image.entry((r.scene_id, r.im_id)).or_default().push(r);
    }
    let known: std::collections::HashSet<(u32, u32)> =
        gt.iter().map(|g| (g.scene_id, g.im_id)).collect();
    let ignored_estimates = results
        .iter()
        .filter(|r| !known.contains(&(r.scene_id, r.im_id)))
        .count();
    let per_image = par::try_map(exec, gt, |img| {
        let ests = by_image
            .get(&(img.scene_id, img.im_id))
            .map(Vec::as_slice)
            .unwrap_or(&[]);
        evaluate_image(img, ests, models, cfg)
    })?;

    let images: Vec<ImageErrors> = per_image.iter().map(|e| e.errors.clone()).collect();
    let pairs: Vec<AddPair> = per_image.iter().flat_map(|e| e.add_pairs.clone()).collect();
    let records: Vec<DetectionRecord> = per_image.iter().map(|e| e.boxes.clone()).collect();

    let mut per_object = Vec::new();
    for (m, model) in models.iter().enumerate() {
        let num_gt = images
            .iter()
            .flat_map(|i| &i.gts)
            .filter(|g| g.valid && g.class_id == m)
            .count();
        let num_estimates = images
            .iter()
            .flat_map(|i| &i.estimates)
            .filter(|e| e.class_id == m)
            .count();
        if num_gt == 0 && num_estimates == 0 {
            continue;
        }
        let obj_pairs: Vec<AddPair> = pairs.iter().filter(|p| p.model == m).copied().collect();
        per_object.push(ObjectReport {
            obj_id: model.model.obj_id,
            num_gt,
            num_estimates,
            ar: bop_average_recall(&images, cfg, Some(m)),
            add_recall: add_recall(&obj_pairs, models, ADD_THRESHOLD_FRACTION)?,
            symmetric: model.model.is_symmetric(),
        });
    }

    Ok(EvalReport {
        ar: bop_average_recall(&images, cfg, None),
        add_recall: add_recall(&pairs, models, ADD_THRESHOLD_FRACTION)?,
        map: detection_map(&records),
        num_images: gt.len(),
        num_gt: pairs.len(),
        num_estimates: results.len() - ignored_estimates,
        ignored_estimates,
        per_object,
        vsd_visibility: "object render only; no scene depth".into(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bop::{gt_as_results, GtInstance};
    use crate::geometry::{CameraIntrinsics, RotationMatrix, Vec3};
    use crate::mesh::{ObjectModel, SymmetrySet, TriangleMesh};

    fn setup() -> (Vec<GtImage>, Vec<EvalModel>) {
        let cfg = MetricConfig::default();
        let models = vec![
            EvalModel::new(
                ObjectModel::new(
                    0,
                    1,
                    TriangleMesh::cuboid(Vec3::new(0.08, 0.05, 0.03)),
                    SymmetrySet::default(),
                )
                .unwrap(),
                &cfg,
            ),
            EvalModel::new(
                ObjectModel::new(
                    1,
                    5,
                    TriangleMesh::icosphere(0.04, 2),
                    SymmetrySet::default(),
                )
                .unwrap(),
                &cfg,
            ),
        ];
        let cam = CameraIntrinsics::new(572.4, 573.6, 325.3, 242.0, 640, 480).unwrap();
        let pose = |x: f64, y: f64, z: f64, a: f64| {
            Pose::new(RotationMatrix::rot_y(a), Vec3::new(x, y, z))
        };
        let images = vec![
            GtImage {
                scene_id: 1,
                im_id: 0,
                camera: cam,
                instances: vec![
                    GtInstance::from_pose(1, &pose(-0.1, 0.0, 0.8, 0.3)),
                    GtInstance::from_pose(5, &pose(0.1, 0.05, 0.9, 0.0)),
                ],
            },
            GtImage {
                scene_id: 1,
                im_id: 1,
                camera: cam,
                instances: vec![
                    GtInstance::from_pose(1, &pose(0.0, 0.0, 1.0, 1.0)),
                    GtInstance::from_pose(1, &pose(0.15, -0.05, 1.2, -0.4)),
                ],
            },
        ];
        (images, models)
    }

    #[test]
    fn exported_gt_is_perfect() {
        let (images, models) = setup();
        let results = gt_as_results(&images);
        let cfg = MetricConfig::default();
        let r = evaluate(&images, &results, &models, &cfg, Execution::Parallel).unwrap();
        assert_eq!(r.ar.ar, 1.0);
        assert_eq!(r.ar.ar_vsd, 1.0);
        assert_eq!(r.add_recall, 1.0);
        assert_eq!(r.map, 1.0);
        assert_eq!(r.num_gt, 4);
        assert_eq!(r.per_object.len(), 2);
        let s = evaluate(&images, &results, &models, &cfg, Execution::Sequential).unwrap();
        assert_eq!(r, s);
    }

    #[test]
    fn empty_results_score_zero() {
        let (images, models) = setup();
        let r = evaluate(
            &images,
            &[],
            &models,
            &MetricConfig::default(),
            Execution::Parallel,
        )
        .unwrap();
        assert_eq!(r.ar.ar, 0.0);
        assert_eq!(r.add_recall, 0.0);
        assert_eq!(r.map, 0.0);
    }

    #[test]
    fn shifted_estimate_fails_add() {
        let (images, models) = setup();
        let mut results = gt_as_results(&images);
        let d = models[0].diameter();
        results[0].translation_mm[0] += 0.5 * d * 1000.0;
        let r = evaluate(
            &images,
            &results,
            &models,
            &MetricConfig::default(),
            Execution::Parallel,
        )
        .unwrap();
        assert_eq!(r.add_recall, 0.75);
        let obj1 = r.per_object.iter().find(|o| o.obj_id == 1).unwrap();
        assert!((obj1.add_recall - 2.0 / 3.0).abs() < 1e-15);
        assert!(r.ar.ar < 1.0);
    }

    #[test]
    fn unknown_object_is_an_input_error() {
        let (images, models) = setup();
        let mut results = gt_as_results(&images);
        results[0].obj_id = 99;
        let e = evaluate(
            &images,
            &results,
            &models,
            &MetricConfig::default(),
            Execution::Parallel,
        )
        .unwrap_err();
        assert!(e.is_input_error());
    }
}
