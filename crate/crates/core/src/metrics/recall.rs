//! Matching estimates to ground truth and turning errors into recall and
//! precision scores.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{add_error, adds_error, EvalModel, MetricConfig};
use crate::error::{Error, Result};
use crate::geometry::Pose;

/// Errors of one estimate against one ground-truth instance of the same
/// object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairErrors {
    /// One entry per VSD tolerance.
    pub vsd: Vec<f64>,
    /// Meters.
    pub mssd: f64,
    /// Pixels.
    pub mspd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtInfo {
    pub class_id: usize,
    /// Meters.
    pub diameter: f64,
    /// Counted in recall; less visible instances are ignored entirely.
    pub valid: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateErrors {
    pub class_id: usize,
    pub score: f64,
    /// Per ground-truth instance; `None` for other objects.
    pub errors: Vec<Option<PairErrors>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageErrors {
    pub gts: Vec<GtInfo>,
    pub estimates: Vec<EstimateErrors>,
    /// MSPD threshold scale `image_width / 640`.
    pub mspd_scale: f64,
}

impl ImageErrors {
    /// Estimates taking part in matching: per object, the `n` best by score
    /// where `n` is that object's ground-truth count. Score order, ties by
    /// index.
    pub fn ranked_estimates(&self) -> Vec<usize> {
        let mut n_gt: BTreeMap<usize, usize> = BTreeMap::new();
        for g in &self.gts {
            *n_gt.entry(g.class_id).or_insert(0) += 1;
        }
        let mut order: Vec<usize> = (0..self.estimates.len()).collect();
        order.sort_by(|&a, &b| {
            self.estimates[b]
                .score
                .total_cmp(&self.estimates[a].score)
                .then(a.cmp(&b))
        });
        let mut used: BTreeMap<usize, usize> = BTreeMap::new();
        order
            .into_iter()
            .filter(|&i| {
                let c = self.estimates[i].class_id;
                let u = used.entry(c).or_insert(0);
                *u += 1;
                *u <= n_gt.get(&c).copied().unwrap_or(0)
            })
            .collect()
    }
}

/// Greedy matching at one threshold: in score order each estimate takes the
/// unmatched valid ground truth with the lowest error strictly below its
/// threshold. Returns `(matched, valid ground truths)` restricted to
/// `class` when given.
pub fn match_errors(
    img: &ImageErrors,
    error: &dyn Fn(&PairErrors) -> f64,
    threshold: &dyn Fn(&GtInfo) -> f64,
    class: Option<usize>,
) -> (usize, usize) {
    let wanted = |c: usize| class.is_none_or(|k| k == c);
    let total = img
        .gts
        .iter()
        .filter(|g| g.valid && wanted(g.class_id))
        .count();
    let mut taken = vec![false; img.gts.len()];
    let mut matched = 0;
    for i in img.ranked_estimates() {
        let est = &img.estimates[i];
        let mut best: Option<(usize, f64)> = None;
        for (j, e) in est.errors.iter().enumerate() {
            let (Some(e), g) = (e, &img.gts[j]) else {
                continue;
            };
            if taken[j] || !g.valid || g.class_id != est.class_id {
                continue;
            }
            let v = error(e);
            if v < threshold(g) && best.is_none_or(|(_, b)| v < b) {
                best = Some((j, v));
            }
        }
        if let Some((j, _)) = best {
            taken[j] = true;
            if wanted(img.gts[j].class_id) {
                matched += 1;
            }
        }
    }
    (matched, total)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ArScores {
    pub ar_vsd: f64,
    pub ar_mssd: f64,
    pub ar_mspd: f64,
    pub ar: f64,
}

fn recall_over(
    images: &[ImageErrors],
    error: &dyn Fn(&PairErrors) -> f64,
    threshold: &dyn Fn(&GtInfo, &ImageErrors) -> f64,
    class: Option<usize>,
) -> f64 {
    let (mut m, mut t) = (0usize, 0usize);
    for img in images {
        let (a, b) = match_errors(img, error, &|g| threshold(g, img), class);
        m += a;
        t += b;
    }
    if t == 0 {
        0.0
    } else {
        m as f64 / t as f64
    }
}

/// BOP average recall over all images, optionally for one object class.
/// Each recall is the matched fraction of valid ground truths, averaged over
/// the threshold grid (and the tolerance grid for VSD).
pub fn bop_average_recall(
    images: &[ImageErrors],
    cfg: &MetricConfig,
    class: Option<usize>,
) -> ArScores {
    let mean = |v: Vec<f64>| v.iter().sum::<f64>() / v.len().max(1) as f64;
    let mut vsd = Vec::new();
    for t in 0..cfg.vsd_taus.len() {
        for &th in &cfg.vsd_thresholds {
            vsd.push(recall_over(images, &|e| e.vsd[t], &|_, _| th, class));
        }
    }
    let mssd = cfg
        .mssd_thresholds
        .iter()
        .map(|&f| recall_over(images, &|e| e.mssd, &|g, _| f * g.diameter, class))
        .collect();
    let mspd = cfg
        .mspd_thresholds
        .iter()
        .map(|&px| recall_over(images, &|e| e.mspd, &|_, img| px * img.mspd_scale, class))
        .collect();
    let (ar_vsd, ar_mssd, ar_mspd) = (mean(vsd), mean(mssd), mean(mspd));
    ArScores {
        ar_vsd,
        ar_mssd,
        ar_mspd,
        ar: (ar_vsd + ar_mssd + ar_mspd) / 3.0,
    }
}

/// A ground-truth pose with its matched estimate, if any.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AddPair {
    /// Index into the model list.
    pub model: usize,
    pub estimate: Option<Pose>,
    pub gt: Pose,
}

/// Fraction of pairs whose ADD error (ADD-S for symmetric objects) is
/// strictly below `threshold_fraction` of the diameter.
pub fn add_recall(pairs: &[AddPair], models: &[EvalModel], threshold_fraction: f64) -> Result<f64> {
    if pairs.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0;
    for p in pairs {
        let m = models.get(p.model).ok_or(Error::IndexOutOfRange {
            index: p.model,
            len: models.len(),
        })?;
        let Some(est) = p.estimate else { continue };
        let e = if m.model.is_symmetric() {
            adds_error(&est, &p.gt, &m.points)
        } else {
            add_error(&est, &p.gt, &m.points)
        };
        if e < threshold_fraction * m.diameter() {
            hits += 1;
        }
    }
    Ok(hits as f64 / pairs.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredBox {
    pub class_id: usize,
    pub score: f64,
    pub bbox: [f64; 4],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabeledBox {
    pub class_id: usize,
    pub bbox: [f64; 4],
}

/// Boxes of one image.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub predictions: Vec<ScoredBox>,
    pub ground_truth: Vec<LabeledBox>,
}

/// Detections kept per image, highest scores first.
const MAX_DETECTIONS: usize = 100;

fn box_iou(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let w = a[2].min(b[2]) - a[0].max(b[0]);
    let h = a[3].min(b[3]) - a[1].max(b[1]);
    if w <= 0.0 || h <= 0.0 {
        return 0.0;
    }
    let i = w * h;
    let area = |b: &[f64; 4]| (b[2] - b[0]) * (b[3] - b[1]);
    i / (area(a) + area(b) - i)
}

/// COCO-style mAP over IoU thresholds 0.50:0.05:0.95 with 101-point
/// interpolated precision, averaged over classes that have ground truth.
pub fn detection_map(records: &[DetectionRecord]) -> f64 {
    let mut classes: Vec<usize> = records
        .iter()
        .flat_map(|r| r.ground_truth.iter().map(|g| g.class_id))
        .collect();
    classes.sort_unstable();
    classes.dedup();
    let kept: Vec<Vec<ScoredBox>> = records
        .iter()
        .map(|r| {
            let mut p = r.predictions.clone();
            p.sort_by(|a, b| b.score.total_cmp(&a.score));
            p.truncate(MAX_DETECTIONS);
            p
        })
        .collect();
    let mut aps = Vec::new();
    for &c in &classes {
        for t in 0..10 {
            let thr = 0.5 + 0.05 * t as f64;
            aps.push(average_precision(records, &kept, c, thr));
        }
    }
    if aps.is_empty() {
        0.0
    } else {
        aps.iter().sum::<f64>() / aps.len() as f64
    }
}

fn average_precision(
    records: &[DetectionRecord],
    kept: &[Vec<ScoredBox>],
    class: usize,
    thr: f64,
) -> f64 {
    let thr = thr.min(1.0 - 1e-10);
    // (score, is_tp) in image-major order, then a stable global sort.
    let mut dets: Vec<(f64, bool)> = Vec::new();
    let mut n_gt = 0;
    for (rec, preds) in records.iter().zip(kept) {
        let gts: Vec<&[f64; 4]> = rec
            .ground_truth
            .iter()
            .filter(|g| g.class_id == class)
            .map(|g| &g.bbox)
            .collect();
        n_gt += gts.len();
        let mut taken = vec![false; gts.len()];
        for p in preds.iter().filter(|p| p.class_id == class) {
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in gts.iter().enumerate() {
                if taken[j] {
                    continue;
                }
                let iou = box_iou(&p.bbox, g);
                if iou >= thr && best.is_none_or(|(_, b)| iou > b) {
                    best = Some((j, iou));
                }
            }
            if let Some((j, _)) = best {
                taken[j] = true;
            }
            dets.push((p.score, best.is_some()));
        }
    }
    if n_gt == 0 {
        return 0.0;
    }
    dets.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut recall = Vec::with_capacity(dets.len());
    let mut precision = Vec::with_capacity(dets.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for &(_, is_tp) in &dets {
        if is_tp {
            tp += 1;
        } else {
            fp += 1;
        }
        recall.push(tp as f64 / n_gt as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    for i in (1..precision.len()).rev() {
        if precision[i] > precision[i - 1] {
            precision[i - 1] = precision[i];
        }
    }
    let mut sum = 0.0;
    for k in 0..=100 {
        let r = k as f64 / 100.0;
        let idx = recall.partition_point(|&x| x < r);
        if idx < precision.len() {
            sum += precision[idx];
        }
    }
    sum / 101.0
}
