//! Inference tail: per-location hypotheses are filtered by class score,
//! clustered into instances by box overlap and reduced to one pose each.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, Mat3, Point2, Point3, Pose, RotationMatrix, Vec3};

/// One feature location's prediction tuple.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    /// Feature-location index; unique within an image.
    pub location: usize,
    pub class_scores: Vec<f64>,
    /// Amodal box `[x1, y1, x2, y2]` in pixels.
    pub bbox: [f64; 4],
    pub corners: [Point2; 8],
    /// Egocentric pose.
    pub pose: Pose,
    /// Pixels; lower is more consistent.
    pub consistency: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PostprocessConfig {
    pub detection_threshold: f64,
    pub cluster_iou: f64,
    pub top_n: usize,
    pub max_instances: usize,
    pub discard_singletons: bool,
}

impl Default for PostprocessConfig {
    fn default() -> Self {
        PostprocessConfig {
            detection_threshold: 0.5,
            cluster_iou: 0.5,
            top_n: 10,
            max_instances: 100,
            discard_singletons: true,
        }
    }
}

impl PostprocessConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| v > 0.0 && v <= 1.0;
        if !unit(self.detection_threshold) || !unit(self.cluster_iou) || self.top_n == 0 {
            return Err(Error::degenerate(
                "thresholds must lie in (0, 1] and top_n must be at least 1",
            ));
        }
        Ok(())
    }
}

/// A hypothesis that survived filtering, reduced to its best class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    /// Position in the raw hypothesis list.
    pub hypothesis: usize,
    pub location: usize,
    pub class_id: usize,
    pub score: f64,
    pub bbox: [f64; 4],
}

#[derive(Debug, Clone, PartialEq)]
pub struct InstanceEstimate {
    pub class_id: usize,
    /// Highest class score among members.
    pub score: f64,
    pub pose: Pose,
    /// Box of the seed hypothesis.
    pub bbox: [f64; 4],
    /// Positions in the raw hypothesis list, seed first.
    pub members: Vec<usize>,
}

/// Mean corner distance between predicted corners and the reprojected
/// cuboid under the predicted pose.
pub fn consistency_score(
    corners: &[Point2; 8],
    pose: &Pose,
    g3d: &[Point3; 8],
    cam: &CameraIntrinsics,
) -> Result<f64> {
    let mut sum = 0.0;
    for (k, (g, p)) in corners.iter().zip(g3d).enumerate() {
        let q = cam.project_camera_point(&pose.transform(p).coords, k)?;
        sum += (g - q).norm();
    }
    Ok(sum / 8.0)
}

fn check_box(b: &[f64; 4]) -> Result<()> {
    if b[0] < b[2] && b[1] < b[3] {
        Ok(())
    } else {
        Err(Error::InvalidBox(b[0], b[1], b[2], b[3]))
    }
}

pub fn iou(a: &[f64; 4], b: &[f64; 4]) -> Result<f64> {
    check_box(a)?;
    check_box(b)?;
    Ok(iou_unchecked(a, b))
}

fn area(b: &[f64; 4]) -> f64 {
    (b[2] - b[0]) * (b[3] - b[1])
}

fn iou_unchecked(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let w = a[2].min(b[2]) - a[0].max(b[0]);
    let h = a[3].min(b[3]) - a[1].max(b[1]);
    if w <= 0.0 || h <= 0.0 {
        return 0.0;
    }
    let inter = w * h;
    inter / (area(a) + area(b) - inter)
}

/// Keep each hypothesis' argmax class (lowest index on ties) and drop those
/// below the detection threshold or with an invalid box.
pub fn filter_hypotheses(raw: &[Hypothesis], cfg: &PostprocessConfig) -> Vec<Candidate> {
    raw.iter()
        .enumerate()
        .filter_map(|(i, h)| {
            let (class_id, &score) = h.class_scores.iter().enumerate().fold(
                None,
                |best: Option<(usize, &f64)>, (c, s)| match best {
                    Some((_, b)) if *s <= *b => best,
                    _ => Some((c, s)),
                },
            )?;
            (score >= cfg.detection_threshold && check_box(&h.bbox).is_ok()).then_some(Candidate {
                hypothesis: i,
                location: h.location,
                class_id,
                score,
                bbox: h.bbox,
            })
        })
        .collect()
}

/// Uniform grid over box centers, one layer per class. With a clustering
/// threshold of at least 0.5, a box can only reach it against a seed if its
/// center lies inside the seed box, so a seed only needs to visit the cells
/// it covers in its own class layer.
struct CenterGrid {
    x0: f64,
    y0: f64,
    inv_cell: f64,
    cols: usize,
    rows: usize,
    /// Candidates bucketed by cell: cell `k` owns `items[start[k]..start[k + 1]]`.
    start: Vec<usize>,
    // Live entries per cell; consumed items are swapped past the end.
    live: Vec<usize>,
    items: Vec<usize>,
}

impl CenterGrid {
    fn new(cands: &[Candidate]) -> Self {
        let center = |b: &[f64; 4]| (0.5 * (b[0] + b[2]), 0.5 * (b[1] + b[3]));
        let (mut x0, mut y0, mut x1, mut y1) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
        let (mut side_sum, mut layers) = (0.0, 1);
        for c in cands {
            let (x, y) = center(&c.bbox);
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x);
            y1 = y1.max(y);
            side_sum += (c.bbox[2] - c.bbox[0]).min(c.bbox[3] - c.bbox[1]);
            layers = layers.max(c.class_id + 1);
        }
        let mean_side = side_sum / cands.len().max(1) as f64;
        // Coarsen until the cell count stays proportional to the input.
        let budget = (8 * cands.len() + 4096) as f64;
        let mut cell = (0.5 * mean_side).max(1.0);
        while ((x1 - x0) / cell + 1.0) * ((y1 - y0) / cell + 1.0) * layers as f64 > budget {
            cell *= 1.5;
        }
        let cols = ((x1 - x0) / cell).floor() as usize + 1;
        let rows = ((y1 - y0) / cell).floor() as usize + 1;
        let layer = cols * rows;
        let mut grid = CenterGrid {
            x0,
            y0,
            inv_cell: cell.recip(),
            cols,
            rows,
            start: vec![0; layer * layers + 1],
            live: Vec::new(),
            items: vec![0; cands.len()],
        };
        let keys: Vec<usize> = cands
            .iter()
            .map(|c| {
                let (x, y) = center(&c.bbox);
                c.class_id * layer + grid.row(y) * cols + grid.col(x)
            })
            .collect();
        for &k in &keys {
            grid.start[k + 1] += 1;
        }
        for k in 0..layer * layers {
            grid.start[k + 1] += grid.start[k];
        }
        let mut fill = grid.start.clone();
        for (i, &k) in keys.iter().enumerate() {
            grid.items[fill[k]] = i;
            fill[k] += 1;
        }
        grid.live = grid.start.windows(2).map(|w| w[1] - w[0]).collect();
        grid
    }

    fn col(&self, x: f64) -> usize {
        // Offsets are non-negative, so truncation is floor.
        (((x - self.x0) * self.inv_cell) as usize).min(self.cols - 1)
    }

    fn row(&self, y: f64) -> usize {
        (((y - self.y0) * self.inv_cell) as usize).min(self.rows - 1)
    }

    /// Calls `f` on every live item of `class` whose center cell meets `b`;
    /// items for which `f` returns false are dropped from the grid.
    fn visit(&mut self, class: usize, b: &[f64; 4], mut f: impl FnMut(usize) -> bool) {
        let (c0, c1) = (self.col(b[0]), self.col(b[2]));
        let base = class * self.cols * self.rows;
        for r in self.row(b[1])..=self.row(b[3]) {
            let row = base + r * self.cols;
            for k in row + c0..=row + c1 {
                let s = self.start[k];
                let mut n = self.live[k];
                let mut j = 0;
                while j < n {
                    if f(self.items[s + j]) {
                        j += 1;
                    } else {
                        n -= 1;
                        self.items.swap(s + j, s + n);
                    }
                }
                self.live[k] = n;
            }
        }
    }
}

/// Unsigned key whose order matches `f64::total_cmp`.
fn total_order_key(x: f64) -> u64 {
    let b = x.to_bits() as i64;
    ((b ^ ((((b >> 63) as u64) >> 1) as i64)) as u64) ^ (1 << 63)
}

/// Packs a primary key with a (location, index) tie-break; the index comes
/// back out of the low 32 bits.
fn sort_key(primary: u64, location: usize, index: usize) -> u128 {
    let lo = (location.min(u32::MAX as usize) as u64) << 32
        | u32::try_from(index).expect("index fits in 32 bits") as u64;
    (primary as u128) << 64 | lo as u128
}

fn key_index(key: u128) -> usize {
    key as u32 as usize
}

/// Greedy score-ordered clustering. Each cluster is seeded by the best
/// unassigned candidate and absorbs every unassigned same-class candidate
/// overlapping the seed by at least `cluster_iou`. Returned clusters list
/// candidate positions, seed first, in decreasing seed score.
pub fn cluster_instances(cands: &[Candidate], cfg: &PostprocessConfig) -> Vec<Vec<usize>> {
    cluster_impl(cands, cfg, cfg.cluster_iou >= 0.5)
}

fn cluster_impl(cands: &[Candidate], cfg: &PostprocessConfig, use_grid: bool) -> Vec<Vec<usize>> {
    // Descending score, then ascending location and hypothesis, as integer
    // keys. Candidates are in hypothesis order, so their positions break
    // ties the same way. Keys are unique, so an unstable sort is
    // deterministic.
    let mut keyed: Vec<u128> = cands
        .iter()
        .enumerate()
        .map(|(i, c)| sort_key(!total_order_key(c.score), c.location, i))
        .collect();
    keyed.sort_unstable();
    let mut grid = use_grid.then(|| CenterGrid::new(cands));

    let mut assigned = vec![false; cands.len()];
    let mut clusters = Vec::new();
    let mut found = Vec::new();
    for &key in &keyed {
        if clusters.len() >= cfg.max_instances {
            break;
        }
        let seed = key_index(key);
        if assigned[seed] {
            continue;
        }
        assigned[seed] = true;
        let sb = &cands[seed].bbox;
        let class = cands[seed].class_id;
        found.clear();
        // Returns whether `i` stays available to later seeds. Members are
        // collected by key so they sort into seed order.
        let mut consider = |i: usize| {
            if assigned[i] {
                return false;
            }
            let c = &cands[i];
            if c.class_id == class && iou_unchecked(sb, &c.bbox) >= cfg.cluster_iou {
                found.push(sort_key(!total_order_key(c.score), c.location, i));
                return false;
            }
            true
        };
        match &mut grid {
            Some(g) => g.visit(class, sb, &mut consider),
            None => (0..cands.len()).for_each(|i| {
                consider(i);
            }),
        }
        found.sort_unstable();
        let mut members = Vec::with_capacity(found.len() + 1);
        members.push(seed);
        for &k in &found {
            let i = key_index(k);
            assigned[i] = true;
            members.push(i);
        }
        if cfg.discard_singletons && members.len() < 2 {
            continue;
        }
        clusters.push(members);
    }
    clusters
}

/// Mean of the `top_n` most consistent member poses: arithmetic mean of the
/// translations and chordal mean of the rotations. `members` are positions
/// in `raw`; ties in consistency go to the lower location index.
pub fn aggregate_pose(raw: &[Hypothesis], members: &[usize], top_n: usize) -> Result<Pose> {
    if members.is_empty() {
        return Err(Error::degenerate("cannot aggregate an empty cluster"));
    }
    let mut keyed: Vec<u128> = members
        .iter()
        .map(|&i| sort_key(total_order_key(raw[i].consistency), raw[i].location, i))
        .collect();
    let n = top_n.max(1);
    if keyed.len() > n {
        keyed.select_nth_unstable(n - 1);
        keyed.truncate(n);
    }
    if keyed.len() == 1 {
        return Ok(raw[key_index(keyed[0])].pose);
    }
    // Sum in a fixed order so the result does not depend on member order.
    keyed.sort_unstable();
    let k = keyed.len() as f64;
    let t = keyed
        .iter()
        .map(|&e| raw[key_index(e)].pose.translation)
        .sum::<Vec3>()
        / k;
    let m = keyed.iter().fold(Mat3::zeros(), |acc, &e| {
        acc + raw[key_index(e)].pose.rotation.matrix()
    });
    Ok(Pose::new(RotationMatrix::project(&(m / k))?, t))
}

/// Filter, cluster and aggregate. Instances come out by decreasing score.
/// A cluster whose rotations average to a degenerate matrix falls back to
/// its most consistent member's rotation.
pub fn postprocess_image(raw: &[Hypothesis], cfg: &PostprocessConfig) -> Vec<InstanceEstimate> {
    let cands = filter_hypotheses(raw, cfg);
    let clusters = cluster_instances(&cands, cfg);
    clusters
        .into_iter()
        .map(|cl| {
            let members: Vec<usize> = cl.iter().map(|&c| cands[c].hypothesis).collect();
            let seed = &cands[cl[0]];
            let pose = aggregate_pose(raw, &members, cfg.top_n).unwrap_or_else(|_| {
                let most = aggregate_pose(raw, &members, 1).expect("non-empty cluster");
                let t = members
                    .iter()
                    .map(|&i| raw[i].pose.translation)
                    .sum::<Vec3>()
                    / members.len() as f64;
                Pose::new(most.rotation, t)
            });
            InstanceEstimate {
                class_id: seed.class_id,
                score: seed.score,
                pose,
                bbox: seed.bbox,
                members,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{geodesic_distance, project, RotationMatrix};
    use crate::mesh::{cuboid_corners, TriangleMesh};
    use approx::assert_abs_diff_eq;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn hyp(location: usize, scores: &[f64], bbox: [f64; 4]) -> Hypothesis {
        Hypothesis {
            location,
            class_scores: scores.to_vec(),
            bbox,
            corners: [Point2::origin(); 8],
            pose: Pose::new(RotationMatrix::identity(), Vec3::new(0.0, 0.0, 1.0)),
            consistency: 0.0,
        }
    }

    #[test]
    fn iou_examples() {
        let a = [0.0, 0.0, 2.0, 2.0];
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        assert_eq!(iou(&a, &[5.0, 5.0, 6.0, 6.0]).unwrap(), 0.0);
        assert_abs_diff_eq!(iou(&a, &[1.0, 0.0, 3.0, 2.0]).unwrap(), 1.0 / 3.0);
        assert!(matches!(
            iou(&a, &[1.0, 0.0, 1.0, 2.0]),
            Err(Error::InvalidBox(..))
        ));
    }

    #[test]
    fn consistency_examples() {
        let cam = CameraIntrinsics::new(500.0, 500.0, 320.0, 240.0, 640, 480).unwrap();
        let g3d = cuboid_corners(&TriangleMesh::cuboid(Vec3::new(0.1, 0.2, 0.1)));
        let pose = Pose::new(RotationMatrix::rot_y(0.4), Vec3::new(0.05, 0.0, 0.8));
        let proj: [Point2; 8] = project(&g3d, &pose, &cam).unwrap().try_into().unwrap();
        assert_eq!(consistency_score(&proj, &pose, &g3d, &cam).unwrap(), 0.0);
        let off = proj.map(|p| Point2::new(p.x, p.y + 2.0));
        assert_abs_diff_eq!(
            consistency_score(&off, &pose, &g3d, &cam).unwrap(),
            2.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn filter_examples() {
        let cfg = PostprocessConfig::default();
        assert!(filter_hypotheses(&[], &cfg).is_empty());
        let b = [0.0, 0.0, 10.0, 10.0];
        let kept = filter_hypotheses(&[hyp(0, &[0.9, 0.3], b)], &cfg);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].class_id, 0);
        assert!(filter_hypotheses(&[hyp(0, &[0.4, 0.4], b)], &cfg).is_empty());
        assert!(postprocess_image(&[hyp(0, &[0.3], b)], &cfg).is_empty());
    }

    #[test]
    fn cluster_examples() {
        let cfg = PostprocessConfig::default();
        // Widths 10 and 10 with 7.5 overlap: 75 / 125 = 0.6.
        let a = hyp(0, &[0.9], [0.0, 0.0, 10.0, 10.0]);
        let b = hyp(1, &[0.8], [2.5, 0.0, 12.5, 10.0]);
        let out = postprocess_image(&[a.clone(), b], &cfg);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].members, vec![0, 1]);
        // 10·(10 - x) / (100 + 10x) = 0.4 → x = 30/7.
        let x = 30.0 / 7.0;
        let c = hyp(1, &[0.8], [x, 0.0, 10.0 + x, 10.0]);
        assert!(postprocess_image(&[a.clone(), c], &cfg).is_empty());
        let d = hyp(1, &[0.1, 0.8], [0.0, 0.0, 10.0, 10.0]);
        assert!(postprocess_image(&[a, d], &cfg).is_empty());
    }

    #[test]
    fn aggregate_examples() {
        let mut members = Vec::new();
        for i in 0..25 {
            let mut h = hyp(i, &[0.9], [0.0, 0.0, 10.0, 10.0]);
            h.consistency = (25 - i) as f64;
            h.pose.translation.x = i as f64;
            members.push(h);
        }
        let idx: Vec<usize> = (0..25).collect();
        let p = aggregate_pose(&members, &idx, 10).unwrap();
        // Lowest consistency: i = 15..25.
        assert_abs_diff_eq!(p.translation.x, 19.5, epsilon = 1e-12);
        let one = aggregate_pose(&members, &idx, 1).unwrap();
        assert_eq!(one, members[24].pose);

        let mut a = hyp(0, &[0.9], [0.0; 4]);
        let mut b = hyp(1, &[0.9], [0.0; 4]);
        a.pose.rotation = RotationMatrix::rot_z(0.3);
        b.pose.rotation = RotationMatrix::rot_z(-0.3);
        let p = aggregate_pose(&[a.clone(), b], &[0, 1], 10).unwrap();
        assert!(geodesic_distance(&p.rotation, &RotationMatrix::identity()) < 1e-12);
        assert_eq!(p.translation, a.pose.translation);
        assert!(aggregate_pose(&[a], &[], 10).is_err());
    }

    fn random_hyps(rng: &mut ChaCha8Rng, n: usize) -> Vec<Hypothesis> {
        (0..n)
            .map(|i| {
                let x = rng.random_range(0.0..600.0);
                let y = rng.random_range(0.0..440.0);
                let w = rng.random_range(20.0..60.0);
                let mut h = hyp(
                    i,
                    &[rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)],
                    [x, y, x + w, y + w],
                );
                h.consistency = rng.random_range(0.0..5.0);
                h.pose.rotation = RotationMatrix::rot_z(rng.random_range(-0.2..0.2));
                h
            })
            .collect()
    }

    #[test]
    fn permutation_invariance_and_membership() {
        let cfg = PostprocessConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let hyps = random_hyps(&mut rng, 400);
        let a = postprocess_image(&hyps, &cfg);
        assert!(!a.is_empty());
        for inst in &a {
            let seed = &hyps[inst.members[0]];
            for &m in &inst.members {
                assert!(iou(&seed.bbox, &hyps[m].bbox).unwrap() >= cfg.cluster_iou);
            }
        }
        let mut shuffled = hyps.clone();
        shuffled.shuffle(&mut rng);
        let b = postprocess_image(&shuffled, &cfg);
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.pose, y.pose);
            let lx: Vec<usize> = x.members.iter().map(|&i| hyps[i].location).collect();
            let ly: Vec<usize> = y.members.iter().map(|&i| shuffled[i].location).collect();
            assert_eq!(lx, ly);
        }
    }

    #[test]
    fn grid_matches_exhaustive_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let hyps = random_hyps(&mut rng, 600);
        let cfg = PostprocessConfig::default();
        let cands = filter_hypotheses(&hyps, &cfg);
        assert_eq!(
            cluster_impl(&cands, &cfg, true),
            cluster_impl(&cands, &cfg, false)
        );
    }

    #[test]
    fn max_instances_cap() {
        let mut hyps = Vec::new();
        for i in 0..150 {
            let x = (i % 15) as f64 * 40.0;
            let y = (i / 15) as f64 * 40.0;
            hyps.push(hyp(2 * i, &[0.9], [x, y, x + 30.0, y + 30.0]));
            hyps.push(hyp(2 * i + 1, &[0.8], [x, y, x + 30.0, y + 30.0]));
        }
        let out = postprocess_image(&hyps, &PostprocessConfig::default());
        assert_eq!(out.len(), 100);
    }
}
