//! Synthetic scenes, a noise-configurable stand-in for the network output,
//! and experiments over them: postprocessing runtime against instance
//! count, top-n pose aggregation, and RANSAC-EPnP against direct voting.

use std::collections::HashMap;
use std::path::Path;
use std::time::Instant;

use nalgebra::{Quaternion, UnitQuaternion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Binomial, DiscreteCDF};

use crate::bop::{self, GtImage, GtInstance, ResultRow};
use crate::encoding::{
    assign_level, sample_true_locations, FeatureLocation, InstanceAnnotation, PixelMask,
    PyramidSpec, VisibilityInfo,
};
use crate::error::{Error, Result};
use crate::geometry::{
    geodesic_distance, project, CameraIntrinsics, Point2, Point3, Pose, RotationMatrix, Vec3,
};
use crate::mesh::{build_symmetry_set, ContinuousSymmetry, ObjectModel, SymmetrySet, TriangleMesh};
use crate::metrics::{add_recall, AddPair, EvalModel, MetricConfig};
use crate::par::{self, Execution};
use crate::pnp::{ransac_pnp, CorrespondenceSet, RansacConfig};
use crate::postprocess::{
    aggregate_pose, consistency_score, postprocess_image, Hypothesis, InstanceEstimate,
    PostprocessConfig,
};

/// Independent generator for the named purpose (`"scene"`, `"noise"`,
/// `"ransac"`, ...) derived from one seed.
pub fn substream(seed: u64, name: &str) -> ChaCha8Rng {
    // FNV-1a keeps stream ids stable across platforms and releases.
    let stream = name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    });
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Three household-sized objects (diameters 0.13 to 0.17 m): an asymmetric
/// box, a bar with two-fold symmetry and a can with continuous symmetry.
pub fn default_models() -> Vec<ObjectModel> {
    let flip = |axis: Vec3| {
        Pose::new(
            RotationMatrix::about_axis(&axis, std::f64::consts::PI).expect("unit axis"),
            Vec3::zeros(),
        )
    };
    let box_sym = SymmetrySet::default();
    let bar_sym = build_symmetry_set(&[flip(Vec3::x())], &[], 1).expect("valid");
    let can_sym = build_symmetry_set(
        &[flip(Vec3::x())],
        &[ContinuousSymmetry {
            axis: Vec3::z(),
            offset: Vec3::zeros(),
        }],
        36,
    )
    .expect("valid");
    vec![
        ObjectModel::new(
            0,
            1,
            TriangleMesh::cuboid(Vec3::new(0.10, 0.07, 0.05)),
            box_sym,
        ),
        ObjectModel::new(
            1,
            2,
            TriangleMesh::cuboid(Vec3::new(0.16, 0.04, 0.04)),
            bar_sym,
        ),
        ObjectModel::new(2, 3, TriangleMesh::cylinder(0.035, 0.12, 36), can_sym),
    ]
    .into_iter()
    .map(|m| m.expect("well-formed mesh"))
    .collect()
}

/// Primesense-like 640x480 intrinsics.
pub fn default_camera() -> CameraIntrinsics {
    CameraIntrinsics::new(572.4114, 573.5704, 325.2611, 242.0490, 640, 480).expect("valid")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    /// Inclusive bounds on the instance count.
    pub count_range: [usize; 2],
    /// Meters.
    pub depth_range: [f64; 2],
    /// Every instance keeps at least this visible fraction.
    pub min_visible_fraction: f64,
    /// Every instance keeps at least this many visible true locations.
    pub min_true_locations: usize,
    /// Same-object amodal boxes overlap less than this.
    pub max_same_class_iou: f64,
    /// Projected cuboids stay this far inside the image, pixels.
    pub margin_px: f64,
    /// Placement attempts per instance before giving up.
    pub max_attempts: usize,
    pub pyramid: PyramidSpec,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            count_range: [10, 100],
            depth_range: [0.5, 2.0],
            min_visible_fraction: 0.5,
            min_true_locations: 2,
            max_same_class_iou: 0.5,
            margin_px: 1.0,
            max_attempts: 5000,
            pyramid: PyramidSpec::default(),
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.count_range;
        let [zmin, zmax] = self.depth_range;
        if lo > hi
            || !(zmin > 0.0 && zmin <= zmax)
            || !(0.0..=1.0).contains(&self.min_visible_fraction)
        {
            return Err(Error::degenerate("invalid scene configuration ranges"));
        }
        self.pyramid.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneInstance {
    /// Index into the model list.
    pub model: usize,
    pub pose: Pose,
    pub visible_fraction: f64,
    /// Amodal box of the projected cuboid, `[x0, y0, x1, y1]`.
    pub bbox: [f64; 4],
    pub visible_mask: PixelMask,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneGroundTruth {
    pub camera: CameraIntrinsics,
    pub instances: Vec<SceneInstance>,
}

fn random_rotation(rng: &mut impl Rng) -> RotationMatrix {
    let mut n = || rng.sample::<f64, _>(StandardNormal);
    let q = UnitQuaternion::from_quaternion(Quaternion::new(n(), n(), n(), n()));
    RotationMatrix::from_matrix_unchecked(*q.to_rotation_matrix().matrix())
}

fn gaussian3(rng: &mut impl Rng, sigma: f64) -> Vec3 {
    let mut n = || sigma * rng.sample::<f64, _>(StandardNormal);
    Vec3::new(n(), n(), n())
}

/// Counter-clockwise convex hull (monotone chain).
fn convex_hull(pts: &[Point2]) -> Vec<Point2> {
    let mut p: Vec<Point2> = pts.to_vec();
    p.sort_by(|a, b| a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)));
    let cross =
        |o: &Point2, a: &Point2, b: &Point2| (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x);
    let mut hull: Vec<Point2> = Vec::with_capacity(2 * p.len());
    for pass in 0..2 {
        let start = hull.len();
        for q in &p {
            while hull.len() >= start + 2
                && cross(&hull[hull.len() - 2], &hull[hull.len() - 1], q) <= 0.0
            {
                hull.pop();
            }
            hull.push(*q);
        }
        hull.pop();
        if pass == 0 {
            p.reverse();
        }
    }
    hull
}

fn in_hull(hull: &[Point2], x: f64, y: f64) -> bool {
    let n = hull.len();
    if n < 3 {
        return false;
    }
    (0..n).all(|i| {
        let (a, b) = (hull[i], hull[(i + 1) % n]);
        (b.x - a.x) * (y - a.y) - (b.y - a.y) * (x - a.x) >= 0.0
    })
}

/// Pixels whose centers fall inside the hull.
fn rasterize_hull(hull: &[Point2], cam: &CameraIntrinsics) -> Vec<(u32, u32)> {
    let (mut x0, mut y0, mut x1, mut y1) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
    for p in hull {
        (x0, y0, x1, y1) = (x0.min(p.x), y0.min(p.y), x1.max(p.x), y1.max(p.y));
    }
    let xs = (x0 - 0.5).ceil().max(0.0) as u32;
    let ys = (y0 - 0.5).ceil().max(0.0) as u32;
    let xe = ((x1 - 0.5).floor().min(cam.width as f64 - 1.0)).max(-1.0) as i64;
    let ye = ((y1 - 0.5).floor().min(cam.height as f64 - 1.0)).max(-1.0) as i64;
    let mut out = Vec::new();
    for y in ys as i64..=ye {
        for x in xs as i64..=xe {
            if in_hull(hull, x as f64 + 0.5, y as f64 + 0.5) {
                out.push((x as u32, y as u32));
            }
        }
    }
    out
}

fn box_iou(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let w = a[2].min(b[2]) - a[0].max(b[0]);
    let h = a[3].min(b[3]) - a[1].max(b[1]);
    if w <= 0.0 || h <= 0.0 {
        return 0.0;
    }
    let area = |b: &[f64; 4]| (b[2] - b[0]) * (b[3] - b[1]);
    w * h / (area(a) + area(b) - w * h)
}

/// Per-pixel nearest instance; ties go to the later instance.
struct Occupancy {
    width: u32,
    owner: Vec<(f64, u32)>,
}

const FREE: u32 = u32::MAX;

impl Occupancy {
    fn at(&self, x: u32, y: u32) -> (f64, u32) {
        self.owner[(y * self.width + x) as usize]
    }
}

struct Placed {
    depth: f64,
    footprint: usize,
    visible: usize,
    /// Feature-location center pixels inside the footprint.
    centers: Vec<(u32, u32)>,
}

struct Trial {
    model: usize,
    pose: Pose,
    bbox: [f64; 4],
    hull: Vec<Point2>,
    pixels: Vec<(u32, u32)>,
    centers: Vec<(u32, u32)>,
}

fn location_center_pixels(
    spec: &PyramidSpec,
    level: usize,
    bbox: &[f64; 4],
    hull: &[Point2],
    cam: &CameraIntrinsics,
) -> Vec<(u32, u32)> {
    let s = spec.strides[level] as f64;
    let (rows, cols) = spec.grid_shape(level, cam);
    let c0 = ((bbox[0] / s - 0.5).floor().max(0.0)) as u32;
    let r0 = ((bbox[1] / s - 0.5).floor().max(0.0)) as u32;
    let c1 = ((bbox[2] / s).ceil().max(0.0) as u32).min(cols);
    let r1 = ((bbox[3] / s).ceil().max(0.0) as u32).min(rows);
    let mut out = Vec::new();
    for row in r0..r1 {
        for col in c0..c1 {
            let loc = FeatureLocation::new(spec, level, row, col);
            let (px, py) = (loc.center[0].floor(), loc.center[1].floor());
            if in_hull(hull, px + 0.5, py + 0.5) {
                out.push((px as u32, py as u32));
            }
        }
    }
    out
}

fn sample_trial(
    rng: &mut ChaCha8Rng,
    models: &[ObjectModel],
    cam: &CameraIntrinsics,
    cfg: &SceneConfig,
) -> Option<Trial> {
    let model = rng.random_range(0..models.len());
    let rotation = random_rotation(rng);
    let z = rng.random_range(cfg.depth_range[0]..=cfg.depth_range[1]);
    let u = rng.random_range(0.0..cam.width as f64);
    let v = rng.random_range(0.0..cam.height as f64);
    let t = Vec3::new((u - cam.cx) * z / cam.fx, (v - cam.cy) * z / cam.fy, z);
    let pose = Pose::new(rotation, t);
    let m = &models[model];
    let corners = project(&m.cuboid, &pose, cam).ok()?;
    let bbox = corners.iter().fold(
        [
            f64::INFINITY,
            f64::INFINITY,
            f64::NEG_INFINITY,
            f64::NEG_INFINITY,
        ],
        |b, p| [b[0].min(p.x), b[1].min(p.y), b[2].max(p.x), b[3].max(p.y)],
    );
    let mg = cfg.margin_px;
    if bbox[0] < mg
        || bbox[1] < mg
        || bbox[2] > cam.width as f64 - mg
        || bbox[3] > cam.height as f64 - mg
    {
        return None;
    }
    let hull = convex_hull(&corners);
    let level = assign_level(m.diameter, z, &cfg.pyramid).ok()?;
    let centers = location_center_pixels(&cfg.pyramid, level, &bbox, &hull, cam);
    if centers.len() < cfg.min_true_locations {
        return None;
    }
    let pixels = rasterize_hull(&hull, cam);
    if pixels.is_empty() {
        return None;
    }
    Some(Trial {
        model,
        pose,
        bbox,
        hull,
        pixels,
        centers,
    })
}

/// Random scene: instance count uniform in the configured range, objects
/// uniform over `models`, depth uniform in the depth range, image position
/// uniform, rotation uniform on SO(3). Placements that would leave any
/// instance insufficiently visible, too close to a same-object instance or
/// partly outside the image are redrawn. Visibility is the projected-cuboid
/// footprint minus nearer footprints. Deterministic given `seed`.
pub fn generate_scene(
    models: &[ObjectModel],
    cam: &CameraIntrinsics,
    cfg: &SceneConfig,
    seed: u64,
) -> Result<SceneGroundTruth> {
    if models.is_empty() {
        return Err(Error::degenerate(
            "scene generation needs at least one model",
        ));
    }
    cfg.validate()?;
    let mut rng = substream(seed, "scene");
    let n = rng.random_range(cfg.count_range[0]..=cfg.count_range[1]);
    let mut occ = Occupancy {
        width: cam.width,
        owner: vec![(f64::INFINITY, FREE); (cam.width * cam.height) as usize],
    };
    let mut placed: Vec<Placed> = Vec::with_capacity(n);
    let mut trials: Vec<Trial> = Vec::with_capacity(n);
    let min_vis = cfg.min_visible_fraction;
    let enough = |vis: usize, fp: usize| vis as f64 >= min_vis * fp as f64;

    for k in 0..n {
        let mut accepted = None;
        for _ in 0..cfg.max_attempts {
            let Some(tr) = sample_trial(&mut rng, models, cam, cfg) else {
                continue;
            };
            let z = tr.pose.translation.z;
            if trials.iter().any(|o| {
                o.model == tr.model && box_iou(&o.bbox, &tr.bbox) >= cfg.max_same_class_iou
            }) {
                continue;
            }
            let mut lost: HashMap<u32, usize> = HashMap::new();
            let mut visible = 0;
            for &(x, y) in &tr.pixels {
                let (d, o) = occ.at(x, y);
                if z <= d {
                    visible += 1;
                    if o != FREE {
                        *lost.entry(o).or_insert(0) += 1;
                    }
                }
            }
            if !enough(visible, tr.pixels.len()) {
                continue;
            }
            let own_centers = tr
                .centers
                .iter()
                .filter(|&&(x, y)| z <= occ.at(x, y).0)
                .count();
            if own_centers < cfg.min_true_locations {
                continue;
            }
            let others_ok = lost.iter().all(|(&o, &l)| {
                let p = &placed[o as usize];
                if !enough(p.visible - l, p.footprint) {
                    return false;
                }
                let keep = p
                    .centers
                    .iter()
                    .filter(|&&(x, y)| {
                        occ.at(x, y).1 == o
                            && !(in_hull(&tr.hull, x as f64 + 0.5, y as f64 + 0.5) && z <= p.depth)
                    })
                    .count();
                keep >= cfg.min_true_locations
            });
            if !others_ok {
                continue;
            }
            accepted = Some((tr, visible, lost));
            break;
        }
        let Some((tr, visible, lost)) = accepted else {
            return Err(Error::degenerate(format!(
                "could not place instance {} of {n} after {} attempts",
                k + 1,
                cfg.max_attempts
            )));
        };
        let z = tr.pose.translation.z;
        for &(x, y) in &tr.pixels {
            let cell = &mut occ.owner[(y * cam.width + x) as usize];
            if z <= cell.0 {
                *cell = (z, k as u32);
            }
        }
        for (o, l) in lost {
            placed[o as usize].visible -= l;
        }
        placed.push(Placed {
            depth: z,
            footprint: tr.pixels.len(),
            visible,
            centers: tr.centers.clone(),
        });
        trials.push(tr);
    }

    let mut visible_px: Vec<Vec<(u32, u32)>> = vec![Vec::new(); n];
    for (i, &(_, o)) in occ.owner.iter().enumerate() {
        if o != FREE {
            let i = i as u32;
            visible_px[o as usize].push((i % cam.width, i / cam.width));
        }
    }
    let instances = trials
        .into_iter()
        .zip(placed)
        .zip(visible_px)
        .map(|((tr, p), px)| SceneInstance {
            model: tr.model,
            pose: tr.pose,
            visible_fraction: p.visible as f64 / p.footprint as f64,
            bbox: tr.bbox,
            visible_mask: PixelMask::from_pixels(px),
        })
        .collect();
    Ok(SceneGroundTruth {
        camera: *cam,
        instances,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseSpec {
    pub corner_sigma_px: f64,
    pub rotation_sigma_rad: f64,
    pub translation_sigma_m: f64,
    /// True-class scores are uniform in this range.
    pub score_range: [f64; 2],
    /// Per instance, probability of one spurious hypothesis elsewhere.
    pub false_positive_rate: f64,
    /// Per instance, probability of emitting nothing for it.
    pub miss_rate: f64,
    pub rng_seed: u64,
    /// Remaining feature locations get class scores uniform below this;
    /// `None` emits foreground only.
    pub background_score_max: Option<f64>,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        NoiseSpec {
            corner_sigma_px: 0.0,
            rotation_sigma_rad: 0.0,
            translation_sigma_m: 0.0,
            score_range: [0.9, 1.0],
            false_positive_rate: 0.0,
            miss_rate: 0.0,
            rng_seed: 0,
            background_score_max: Some(0.1),
        }
    }
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<()> {
        let sig = [
            self.corner_sigma_px,
            self.rotation_sigma_rad,
            self.translation_sigma_m,
        ];
        let rate = |r: f64| (0.0..=1.0).contains(&r);
        let [lo, hi] = self.score_range;
        if sig.iter().any(|s| !(*s >= 0.0 && s.is_finite()))
            || !rate(self.false_positive_rate)
            || !rate(self.miss_rate)
            || !(0.0 <= lo && lo <= hi && hi <= 1.0)
            || self.background_score_max.is_some_and(|b| !rate(b))
        {
            return Err(Error::degenerate(
                "noise sigmas must be >= 0 and rates and scores within [0, 1]",
            ));
        }
        Ok(())
    }
}

/// Hypotheses in location order, with the scene instance each one was
/// generated from (`None` for false positives and background).
#[derive(Debug, Clone, PartialEq)]
pub struct MockOutput {
    pub hypotheses: Vec<Hypothesis>,
    pub sources: Vec<Option<usize>>,
}

impl MockOutput {
    pub fn foreground(&self) -> usize {
        self.sources.iter().filter(|s| s.is_some()).count()
    }
}

fn num_classes(models: &[ObjectModel]) -> usize {
    models.iter().map(|m| m.class_id + 1).max().unwrap_or(0)
}

fn corners_box(c: &[Point2; 8]) -> [f64; 4] {
    c.iter().fold(
        [
            f64::INFINITY,
            f64::INFINITY,
            f64::NEG_INFINITY,
            f64::NEG_INFINITY,
        ],
        |b, p| [b[0].min(p.x), b[1].min(p.y), b[2].max(p.x), b[3].max(p.y)],
    )
}

fn noisy_hypothesis(
    rng: &mut ChaCha8Rng,
    model: &ObjectModel,
    pose: &Pose,
    cam: &CameraIntrinsics,
    noise: &NoiseSpec,
    classes: usize,
    location: usize,
) -> Result<Hypothesis> {
    let proj = project(&model.cuboid, pose, cam)?;
    let mut corners = [Point2::origin(); 8];
    for (c, p) in corners.iter_mut().zip(&proj) {
        let dx: f64 = rng.sample(StandardNormal);
        let dy: f64 = rng.sample(StandardNormal);
        *c = Point2::new(
            p.x + noise.corner_sigma_px * dx,
            p.y + noise.corner_sigma_px * dy,
        );
    }
    let omega = gaussian3(rng, noise.rotation_sigma_rad);
    let dt = gaussian3(rng, noise.translation_sigma_m);
    let p_hat = Pose::new(
        RotationMatrix::from_matrix_unchecked(
            RotationMatrix::exp(&omega).matrix() * pose.rotation.matrix(),
        ),
        pose.translation + dt,
    );
    let mut class_scores = vec![0.0; classes];
    let [lo, hi] = noise.score_range;
    class_scores[model.class_id] = if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    };
    let consistency =
        consistency_score(&corners, &p_hat, &model.cuboid, cam).unwrap_or(f64::INFINITY);
    Ok(Hypothesis {
        location,
        class_scores,
        bbox: corners_box(&corners),
        corners,
        pose: p_hat,
        consistency,
    })
}

/// Stand-in for the network: one hypothesis per true location of every
/// instance, perturbed per `noise`, plus optional false positives and
/// low-score background at all remaining feature locations.
pub fn mock_predict(
    scene: &SceneGroundTruth,
    models: &[ObjectModel],
    spec: &PyramidSpec,
    noise: &NoiseSpec,
) -> Result<MockOutput> {
    noise.validate()?;
    spec.validate()?;
    let cam = &scene.camera;
    let mut rng = substream(noise.rng_seed, "noise");
    let classes = num_classes(models);
    let mut offsets = Vec::with_capacity(spec.num_levels());
    let mut total = 0usize;
    for l in 0..spec.num_levels() {
        offsets.push(total);
        let (r, c) = spec.grid_shape(l, cam);
        total += (r * c) as usize;
    }
    let index = |loc: &FeatureLocation| {
        let (_, cols) = spec.grid_shape(loc.level, cam);
        offsets[loc.level] + (loc.row * cols + loc.col) as usize
    };
    let mut slots: Vec<Option<(Hypothesis, Option<usize>)>> = vec![None; total];

    let mut spurious = 0;
    for (k, inst) in scene.instances.iter().enumerate() {
        let model = models.get(inst.model).ok_or(Error::IndexOutOfRange {
            index: inst.model,
            len: models.len(),
        })?;
        if rng.random_bool(noise.false_positive_rate) {
            spurious += 1;
        }
        if rng.random_bool(noise.miss_rate) {
            continue;
        }
        let ann = InstanceAnnotation {
            class_id: model.class_id,
            bbox: inst.bbox,
            visibility: VisibilityInfo {
                visible_fraction: inst.visible_fraction,
                footprint: Some(inst.visible_mask.clone()),
            },
            pose: inst.pose,
        };
        for t in sample_true_locations(&ann, spec, model, cam)?.targets {
            let loc = index(&t.location);
            let h = noisy_hypothesis(&mut rng, model, &inst.pose, cam, noise, classes, loc)?;
            slots[loc] = Some((h, Some(k)));
        }
    }

    let free: Vec<usize> = (0..total).filter(|&i| slots[i].is_none()).collect();
    for _ in 0..spurious.min(free.len()) {
        let loc = loop {
            let i = free[rng.random_range(0..free.len())];
            if slots[i].is_none() {
                break i;
            }
        };
        let m = rng.random_range(0..models.len());
        let z = rng.random_range(0.5..2.0);
        let u = rng.random_range(0.0..cam.width as f64);
        let v = rng.random_range(0.0..cam.height as f64);
        let pose = Pose::new(
            random_rotation(&mut rng),
            Vec3::new((u - cam.cx) * z / cam.fx, (v - cam.cy) * z / cam.fy, z),
        );
        // A degenerate draw behind the camera just yields no hypothesis.
        if let Ok(h) = noisy_hypothesis(&mut rng, &models[m], &pose, cam, noise, classes, loc) {
            slots[loc] = Some((h, None));
        }
    }

    if let Some(bg) = noise.background_score_max {
        let locs = spec.locations(cam);
        for (i, slot) in slots.iter_mut().enumerate() {
            if slot.is_some() {
                continue;
            }
            let l = &locs[i];
            let half = 2.0 * spec.strides[l.level] as f64;
            let (cx, cy) = (l.center[0], l.center[1]);
            let class_scores = (0..classes).map(|_| rng.random_range(0.0..=bg)).collect();
            *slot = Some((
                Hypothesis {
                    location: i,
                    class_scores,
                    bbox: [cx - half, cy - half, cx + half, cy + half],
                    corners: [Point2::new(cx, cy); 8],
                    pose: Pose::new(RotationMatrix::identity(), Vec3::new(0.0, 0.0, 1.0)),
                    consistency: f64::INFINITY,
                },
                None,
            ));
        }
    }

    let (hypotheses, sources) = slots.into_iter().flatten().unzip();
    Ok(MockOutput {
        hypotheses,
        sources,
    })
}

/// Scene instance behind each estimate, via its seed hypothesis. An
/// instance claimed twice keeps the earlier (higher-score) estimate.
pub fn match_estimates(
    estimates: &[InstanceEstimate],
    sources: &[Option<usize>],
    num_instances: usize,
) -> Vec<Option<usize>> {
    let mut gt_to_est = vec![None; num_instances];
    for (e, est) in estimates.iter().enumerate() {
        if let Some(Some(k)) = est.members.first().map(|&h| sources[h]) {
            if gt_to_est[k].is_none() {
                gt_to_est[k] = Some(e);
            }
        }
    }
    gt_to_est
}

/// BOP ground truth of a generated scene.
pub fn scene_gt_image(
    scene: &SceneGroundTruth,
    models: &[ObjectModel],
    scene_id: u32,
    im_id: u32,
) -> GtImage {
    let xywh = |b: [f64; 4]| [b[0], b[1], b[2] - b[0], b[3] - b[1]];
    GtImage {
        scene_id,
        im_id,
        camera: scene.camera,
        instances: scene
            .instances
            .iter()
            .map(|i| {
                let mut g = GtInstance::from_pose(models[i.model].obj_id, &i.pose);
                g.visib_fract = Some(i.visible_fraction);
                g.bbox_obj = Some(xywh(i.bbox));
                g.bbox_visib = (!i.visible_mask.is_empty())
                    .then(|| xywh(i.visible_mask.bounds().map(|v| v as f64)));
                g
            })
            .collect(),
    }
}

/// Estimates as results-file rows.
pub fn estimates_to_results(
    estimates: &[InstanceEstimate],
    models: &[ObjectModel],
    scene_id: u32,
    im_id: u32,
    time: f64,
) -> Vec<ResultRow> {
    let by_class: HashMap<usize, u32> = models.iter().map(|m| (m.class_id, m.obj_id)).collect();
    estimates
        .iter()
        .filter_map(|e| {
            let obj = *by_class.get(&e.class_id)?;
            Some(ResultRow::from_pose(
                scene_id, im_id, obj, e.score, &e.pose, time,
            ))
        })
        .collect()
}

/// Write scenes as one BOP scene directory (`im_id` = position), including
/// visible masks.
pub fn write_bop_scene(
    dir: &Path,
    scenes: &[SceneGroundTruth],
    models: &[ObjectModel],
    scene_id: u32,
) -> Result<()> {
    let images: Vec<GtImage> = scenes
        .iter()
        .enumerate()
        .map(|(i, s)| scene_gt_image(s, models, scene_id, i as u32))
        .collect();
    bop::write_scene(dir, &images)?;
    let mask_dir = dir.join(bop::MASK_VISIB_DIR);
    std::fs::create_dir_all(&mask_dir).map_err(|e| Error::from(e).in_file(&mask_dir))?;
    for (im, s) in scenes.iter().enumerate() {
        for (k, inst) in s.instances.iter().enumerate() {
            let mut img = image::GrayImage::new(s.camera.width, s.camera.height);
            for (x, y) in inst.visible_mask.pixels() {
                img.put_pixel(x, y, image::Luma([255]));
            }
            let mut png = Vec::new();
            img.write_to(&mut std::io::Cursor::new(&mut png), image::ImageFormat::Png)
                .map_err(|e| Error::UnsupportedFormat(e.to_string()))?;
            bop::write_atomic(&mask_dir.join(format!("{im:06}_{k:06}.png")), &png)?;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchmarkConfig {
    pub counts: Vec<usize>,
    pub repeats: usize,
    pub seed: u64,
    pub noise: NoiseSpec,
    pub postprocess: PostprocessConfig,
    pub scene: SceneConfig,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            counts: vec![10, 20, 30, 40, 50, 60, 70, 80, 90, 100],
            repeats: 5,
            seed: 0,
            noise: NoiseSpec::default(),
            postprocess: PostprocessConfig::default(),
            scene: SceneConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkBucket {
    pub count: usize,
    pub mean_ms: f64,
    /// Sample standard deviation.
    pub std_ms: f64,
    pub samples_ms: Vec<f64>,
    /// All hypotheses handed to postprocessing.
    pub hypotheses: usize,
    pub foreground_hypotheses: usize,
    pub detected: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub buckets: Vec<BenchmarkBucket>,
}

impl BenchmarkReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("count,mean_ms,std_ms,hypotheses\n");
        for b in &self.buckets {
            s.push_str(&format!(
                "{},{},{},{}\n",
                b.count, b.mean_ms, b.std_ms, b.hypotheses
            ));
        }
        s
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

/// Wall time of `postprocess_image` per instance count: one scene per
/// count, one untimed warm-up, then `repeats` timed runs on this thread.
pub fn benchmark_postprocess(
    models: &[ObjectModel],
    cam: &CameraIntrinsics,
    cfg: &BenchmarkConfig,
) -> Result<BenchmarkReport> {
    if cfg.counts.is_empty() || cfg.repeats == 0 {
        return Err(Error::degenerate(
            "benchmark needs counts and at least one repeat",
        ));
    }
    cfg.postprocess.validate()?;
    let mut buckets = Vec::with_capacity(cfg.counts.len());
    for &count in &cfg.counts {
        let scene_cfg = SceneConfig {
            count_range: [count, count],
            ..cfg.scene.clone()
        };
        let seed = cfg.seed.wrapping_add(count as u64);
        let scene = generate_scene(models, cam, &scene_cfg, seed)?;
        let noise = NoiseSpec {
            rng_seed: seed,
            ..cfg.noise.clone()
        };
        let out = mock_predict(&scene, models, &scene_cfg.pyramid, &noise)?;
        let detected = postprocess_image(&out.hypotheses, &cfg.postprocess).len();
        let mut samples = Vec::with_capacity(cfg.repeats);
        for _ in 0..cfg.repeats {
            let start = Instant::now();
            let est = postprocess_image(&out.hypotheses, &cfg.postprocess);
            samples.push(start.elapsed().as_secs_f64() * 1e3);
            std::hint::black_box(est);
        }
        let (mean_ms, std_ms) = mean_std(&samples);
        buckets.push(BenchmarkBucket {
            count,
            mean_ms,
            std_ms,
            samples_ms: samples,
            hypotheses: out.hypotheses.len(),
            foreground_hypotheses: out.foreground(),
            detected,
        });
    }
    Ok(BenchmarkReport { buckets })
}

/// Paired one-sided sign test that `b` tends to be below `a`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignTest {
    /// Pairs with `b < a`.
    pub wins: usize,
    pub losses: usize,
    pub ties: usize,
    /// `P(X >= wins)` for `X ~ Binomial(wins + losses, 1/2)`.
    pub p_value: f64,
}

pub fn sign_test(a: &[f64], b: &[f64]) -> SignTest {
    let (mut wins, mut losses, mut ties) = (0, 0, 0);
    for (x, y) in a.iter().zip(b) {
        match y.total_cmp(x) {
            std::cmp::Ordering::Less => wins += 1,
            std::cmp::Ordering::Greater => losses += 1,
            std::cmp::Ordering::Equal => ties += 1,
        }
    }
    let n = (wins + losses) as u64;
    let p_value = if wins == 0 {
        1.0
    } else {
        let bin = Binomial::new(0.5, n).expect("valid binomial");
        bin.sf(wins as u64 - 1)
    };
    SignTest {
        wins,
        losses,
        ties,
        p_value,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub scenes: usize,
    pub seed: u64,
    pub noise: NoiseSpec,
    pub postprocess: PostprocessConfig,
    pub scene: SceneConfig,
    pub ransac: RansacConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            scenes: 100,
            seed: 0,
            noise: NoiseSpec {
                corner_sigma_px: 2.0,
                rotation_sigma_rad: 5f64.to_radians(),
                translation_sigma_m: 0.005,
                background_score_max: None,
                ..NoiseSpec::default()
            },
            postprocess: PostprocessConfig::default(),
            scene: SceneConfig::default(),
            ransac: RansacConfig::default(),
        }
    }
}

struct SceneRun {
    scene: SceneGroundTruth,
    out: MockOutput,
    estimates: Vec<InstanceEstimate>,
    matched: Vec<Option<usize>>,
}

fn run_scene(
    models: &[ObjectModel],
    cam: &CameraIntrinsics,
    cfg: &ExperimentConfig,
    i: usize,
) -> Result<SceneRun> {
    let seed = substream(cfg.seed, "scenes")
        .random::<u64>()
        .wrapping_add(i as u64);
    let scene = generate_scene(models, cam, &cfg.scene, seed)?;
    let noise = NoiseSpec {
        rng_seed: seed,
        ..cfg.noise.clone()
    };
    let out = mock_predict(&scene, models, &cfg.scene.pyramid, &noise)?;
    let estimates = postprocess_image(&out.hypotheses, &cfg.postprocess);
    let matched = match_estimates(&estimates, &out.sources, scene.instances.len());
    Ok(SceneRun {
        scene,
        out,
        estimates,
        matched,
    })
}

/// Per-scene mean rotation error (radians) of matched instances for each
/// `top_n` in `ns`. Clusters do not depend on `top_n`, so every `n` is
/// scored on the same instances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopNReport {
    pub ns: Vec<usize>,
    /// `errors[j][s]`: scene `s` aggregated with `ns[j]`.
    pub errors: Vec<Vec<f64>>,
}

impl TopNReport {
    pub fn mean(&self, j: usize) -> f64 {
        let e = &self.errors[j];
        e.iter().sum::<f64>() / e.len().max(1) as f64
    }
}

pub fn top_n_experiment(
    models: &[ObjectModel],
    cam: &CameraIntrinsics,
    cfg: &ExperimentConfig,
    ns: &[usize],
    exec: Execution,
) -> Result<TopNReport> {
    let per_scene = par::try_map_range(exec, cfg.scenes, |i| {
        let run = run_scene(models, cam, cfg, i)?;
        let raw = &run.out.hypotheses;
        ns.iter()
            .map(|&n| {
                let mut sum = 0.0;
                let mut cnt = 0usize;
                for (k, e) in run.matched.iter().enumerate() {
                    let Some(e) = e else { continue };
                    let pose = aggregate_pose(raw, &run.estimates[*e].members, n)?;
                    sum += geodesic_distance(&pose.rotation, &run.scene.instances[k].pose.rotation);
                    cnt += 1;
                }
                Ok(if cnt == 0 { 0.0 } else { sum / cnt as f64 })
            })
            .collect::<Result<Vec<f64>>>()
    })?;
    let errors = (0..ns.len())
        .map(|j| per_scene.iter().map(|s| s[j]).collect())
        .collect();
    Ok(TopNReport {
        ns: ns.to_vec(),
        errors,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VotingRow {
    pub method: String,
    pub add_recall: f64,
}

/// ADD(-S) recall of RANSAC-EPnP on the clustered corner predictions
/// against direct pose aggregation over the `n` most consistent members.
/// Rows are `PnP`, `n=1`, `n=5`, `n=10`, `all`.
pub fn pnp_vs_voting(
    models: &[ObjectModel],
    cam: &CameraIntrinsics,
    cfg: &ExperimentConfig,
    exec: Execution,
) -> Result<Vec<VotingRow>> {
    let metric_cfg = MetricConfig::default();
    let eval_models: Vec<EvalModel> = models
        .iter()
        .map(|m| EvalModel::new(m.clone(), &metric_cfg))
        .collect();
    let variants: [(&str, Option<usize>); 5] = [
        ("PnP", None),
        ("n=1", Some(1)),
        ("n=5", Some(5)),
        ("n=10", Some(10)),
        ("all", Some(usize::MAX)),
    ];
    let per_scene = par::try_map_range(exec, cfg.scenes, |i| {
        let run = run_scene(models, cam, cfg, i)?;
        let raw = &run.out.hypotheses;
        let mut rows: Vec<Vec<AddPair>> = vec![Vec::new(); variants.len()];
        for (k, inst) in run.scene.instances.iter().enumerate() {
            for (v, (_, n)) in variants.iter().enumerate() {
                let estimate = match run.matched[k] {
                    None => None,
                    Some(e) => {
                        let members = &run.estimates[e].members;
                        match n {
                            Some(n) => Some(aggregate_pose(raw, members, *n)?),
                            None => pnp_pose(raw, members, &models[inst.model], cam, cfg, i, k),
                        }
                    }
                };
                rows[v].push(AddPair {
                    model: inst.model,
                    estimate,
                    gt: inst.pose,
                });
            }
        }
        Ok::<_, Error>(rows)
    })?;
    variants
        .iter()
        .enumerate()
        .map(|(v, (name, _))| {
            let pairs: Vec<AddPair> = per_scene.iter().flat_map(|s| s[v].clone()).collect();
            Ok(VotingRow {
                method: name.to_string(),
                add_recall: add_recall(&pairs, &eval_models, 0.1)?,
            })
        })
        .collect()
}

fn pnp_pose(
    raw: &[Hypothesis],
    members: &[usize],
    model: &ObjectModel,
    cam: &CameraIntrinsics,
    cfg: &ExperimentConfig,
    scene: usize,
    instance: usize,
) -> Option<Pose> {
    let mut object: Vec<Point3> = Vec::with_capacity(8 * members.len());
    let mut image = Vec::with_capacity(8 * members.len());
    for &m in members {
        object.extend_from_slice(&model.cuboid);
        image.extend_from_slice(&raw[m].corners);
    }
    let corr = CorrespondenceSet::new(object, image, *cam).ok()?;
    let stream = format!("ransac/{scene}/{instance}");
    let rc = RansacConfig {
        rng_seed: substream(cfg.seed, &stream).random(),
        ..cfg.ransac
    };
    ransac_pnp(&corr, &rc).ok().map(|r| r.pose)
}
