//! BOP dataset files: ground-truth JSON, results CSV, model directories and
//! visible-instance masks.
//!
//! Lengths are millimeters on disk and meters in memory. Raw rotation and
//! translation values are kept as read so that exporting ground truth as
//! results reproduces the exact same numbers.

use std::collections::{BTreeMap, HashSet};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoding::{InstanceAnnotation, PixelMask, VisibilityInfo};
use crate::error::{Error, Result};
use crate::geometry::{project, CameraIntrinsics, Mat3, Pose, RotationMatrix, Vec3};
use crate::mesh::{load_ply, read_models_info, LengthUnit, ObjectModel, SymmetrySet};

pub const SCENE_GT: &str = "scene_gt.json";
pub const SCENE_GT_INFO: &str = "scene_gt_info.json";
pub const SCENE_CAMERA: &str = "scene_camera.json";
pub const MASK_VISIB_DIR: &str = "mask_visib";
pub const MODELS_INFO: &str = "models_info.json";

/// Header of a results file, in the required field order.
pub const RESULTS_HEADER: &str = "scene_id,im_id,obj_id,score,R,t,time";

/// Rotation from nine row-major values. Exact rotations are taken bit for
/// bit; values printed with limited precision are projected onto SO(3).
pub fn rotation_from_row_major(r: &[f64; 9]) -> Result<RotationMatrix> {
    RotationMatrix::from_row_major(r).or_else(|_| RotationMatrix::project(&Mat3::from_row_slice(r)))
}

fn pose_from_raw(r: &[f64; 9], t_mm: &[f64; 3]) -> Result<Pose> {
    Ok(Pose::new(
        rotation_from_row_major(r)?,
        Vec3::new(t_mm[0], t_mm[1], t_mm[2]) / 1000.0,
    ))
}

fn raw_from_pose(pose: &Pose) -> ([f64; 9], [f64; 3]) {
    let t = pose.translation * 1000.0;
    (pose.rotation.to_row_major(), [t.x, t.y, t.z])
}

/// One annotated object instance.
#[derive(Debug, Clone, PartialEq)]
pub struct GtInstance {
    pub obj_id: u32,
    /// `cam_R_m2c`, row-major.
    pub rotation: [f64; 9],
    /// `cam_t_m2c`, millimeters.
    pub translation_mm: [f64; 3],
    pub visib_fract: Option<f64>,
    /// `[x, y, width, height]` in pixels.
    pub bbox_obj: Option<[f64; 4]>,
    pub bbox_visib: Option<[f64; 4]>,
}

impl GtInstance {
    pub fn from_pose(obj_id: u32, pose: &Pose) -> Self {
        let (rotation, translation_mm) = raw_from_pose(pose);
        GtInstance {
            obj_id,
            rotation,
            translation_mm,
            visib_fract: None,
            bbox_obj: None,
            bbox_visib: None,
        }
    }

    pub fn pose(&self) -> Result<Pose> {
        pose_from_raw(&self.rotation, &self.translation_mm)
    }

    /// Visible fraction, treating a missing value as fully visible.
    pub fn visibility(&self) -> f64 {
        self.visib_fract.unwrap_or(1.0)
    }
}

/// Ground truth of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct GtImage {
    pub scene_id: u32,
    pub im_id: u32,
    pub camera: CameraIntrinsics,
    pub instances: Vec<GtInstance>,
}

#[derive(Debug, Serialize, Deserialize)]
#[allow(non_snake_case)]
struct GtEntry {
    cam_R_m2c: [f64; 9],
    cam_t_m2c: [f64; 3],
    obj_id: u32,
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct GtInfoEntry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bbox_obj: Option<[f64; 4]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bbox_visib: Option<[f64; 4]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    visib_fract: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[allow(non_snake_case)]
struct CameraEntry {
    cam_K: [f64; 9],
    #[serde(default = "unit_depth_scale")]
    depth_scale: f64,
    /// Image size is not part of the per-image BOP record; it is stored here
    /// or taken from a dataset-level `camera.json`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    width: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    height: Option<u32>,
}

fn unit_depth_scale() -> f64 {
    1.0
}

/// Dataset-level `camera.json`.
#[derive(Debug, Deserialize)]
struct DatasetCamera {
    width: u32,
    height: u32,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::from(e).in_file(path))?;
    serde_json::from_str(&text).map_err(|e| Error::from(e).in_file(path))
}

fn dataset_image_size(scene_dir: &Path) -> Option<(u32, u32)> {
    let mut dir = Some(scene_dir);
    // The scene directory, the split directory and the dataset root.
    for _ in 0..3 {
        let d = dir?;
        let p = d.join("camera.json");
        if p.is_file() {
            let c: DatasetCamera = read_json(&p).ok()?;
            return Some((c.width, c.height));
        }
        dir = d.parent();
    }
    None
}

/// Read one scene directory. `scene_gt_info.json` is optional.
pub fn read_scene(dir: &Path, scene_id: u32) -> Result<Vec<GtImage>> {
    let gt: BTreeMap<u32, Vec<GtEntry>> = read_json(&dir.join(SCENE_GT))?;
    let cams: BTreeMap<u32, CameraEntry> = read_json(&dir.join(SCENE_CAMERA))?;
    let info_path = dir.join(SCENE_GT_INFO);
    let info: BTreeMap<u32, Vec<GtInfoEntry>> = if info_path.is_file() {
        read_json(&info_path)?
    } else {
        BTreeMap::new()
    };
    let fallback_size = dataset_image_size(dir);
    let mut images = Vec::with_capacity(gt.len());
    for (im_id, entries) in gt {
        let cam = cams.get(&im_id).ok_or_else(|| {
            Error::MissingAnnotation(format!("no camera for image {im_id}"))
                .in_file(dir.join(SCENE_CAMERA))
        })?;
        let (w, h) = match (cam.width, cam.height) {
            (Some(w), Some(h)) => (w, h),
            _ => fallback_size.ok_or_else(|| {
                Error::MissingAnnotation(format!("no image size for image {im_id}"))
                    .in_file(dir.join(SCENE_CAMERA))
            })?,
        };
        let camera = CameraIntrinsics::from_k(&cam.cam_K, w, h)?;
        let infos = info.get(&im_id);
        if let Some(inf) = infos {
            if inf.len() != entries.len() {
                return Err(Error::MissingAnnotation(format!(
                    "image {im_id} has {} instances but {} info records",
                    entries.len(),
                    inf.len()
                ))
                .in_file(info_path));
            }
        }
        let instances = entries
            .into_iter()
            .enumerate()
            .map(|(k, e)| {
                let inf = infos.map(|v| &v[k]);
                GtInstance {
                    obj_id: e.obj_id,
                    rotation: e.cam_R_m2c,
                    translation_mm: e.cam_t_m2c,
                    visib_fract: inf.and_then(|i| i.visib_fract),
                    bbox_obj: inf.and_then(|i| i.bbox_obj),
                    bbox_visib: inf.and_then(|i| i.bbox_visib),
                }
            })
            .collect();
        images.push(GtImage {
            scene_id,
            im_id,
            camera,
            instances,
        });
    }
    Ok(images)
}

fn numeric_name(p: &Path) -> Option<u32> {
    p.file_name()?.to_str()?.parse().ok()
}

/// Scene directories under `dir`: `dir` itself when it holds a
/// `scene_gt.json`, otherwise its numerically named subdirectories.
pub fn scene_dirs(dir: &Path) -> Result<Vec<(u32, PathBuf)>> {
    if dir.join(SCENE_GT).is_file() {
        return Ok(vec![(numeric_name(dir).unwrap_or(0), dir.to_path_buf())]);
    }
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::from(e).in_file(dir))? {
        let p = entry?.path();
        if let Some(id) = numeric_name(&p) {
            if p.join(SCENE_GT).is_file() {
                out.push((id, p));
            }
        }
    }
    if out.is_empty() {
        return Err(Error::MissingAnnotation(format!(
            "no {SCENE_GT} found in or below the directory"
        ))
        .in_file(dir));
    }
    out.sort();
    Ok(out)
}

/// Every image of a single scene or of a split with numbered scenes.
pub fn read_gt_dir(dir: &Path) -> Result<Vec<GtImage>> {
    let mut images = Vec::new();
    for (id, d) in scene_dirs(dir)? {
        images.extend(read_scene(&d, id)?);
    }
    Ok(images)
}

/// Write `scene_gt.json`, `scene_gt_info.json` and `scene_camera.json`.
pub fn write_scene(dir: &Path, images: &[GtImage]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::from(e).in_file(dir))?;
    let mut gt = BTreeMap::new();
    let mut info = BTreeMap::new();
    let mut cams = BTreeMap::new();
    for img in images {
        gt.insert(
            img.im_id,
            img.instances
                .iter()
                .map(|i| GtEntry {
                    cam_R_m2c: i.rotation,
                    cam_t_m2c: i.translation_mm,
                    obj_id: i.obj_id,
                })
                .collect::<Vec<_>>(),
        );
        info.insert(
            img.im_id,
            img.instances
                .iter()
                .map(|i| GtInfoEntry {
                    bbox_obj: i.bbox_obj,
                    bbox_visib: i.bbox_visib,
                    visib_fract: i.visib_fract,
                })
                .collect::<Vec<_>>(),
        );
        cams.insert(
            img.im_id,
            CameraEntry {
                cam_K: img.camera.k_row_major(),
                depth_scale: 1.0,
                width: Some(img.camera.width),
                height: Some(img.camera.height),
            },
        );
    }
    write_atomic(&dir.join(SCENE_GT), &serde_json::to_vec(&gt)?)?;
    write_atomic(&dir.join(SCENE_GT_INFO), &serde_json::to_vec(&info)?)?;
    write_atomic(&dir.join(SCENE_CAMERA), &serde_json::to_vec(&cams)?)?;
    Ok(())
}

/// Write through a temporary file in the same directory, then rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let parent = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let wrap = |e: std::io::Error| Error::from(e).in_file(path);
    let mut tmp = tempfile::NamedTempFile::new_in(parent).map_err(wrap)?;
    tmp.write_all(bytes).map_err(wrap)?;
    tmp.as_file().sync_all().map_err(wrap)?;
    tmp.persist(path).map_err(|e| wrap(e.error))?;
    Ok(())
}

/// Visible mask `mask_visib/{im_id:06}_{gt_index:06}.png`, if present.
pub fn load_visib_mask(scene_dir: &Path, im_id: u32, gt_index: usize) -> Result<Option<PixelMask>> {
    let path = scene_dir
        .join(MASK_VISIB_DIR)
        .join(format!("{im_id:06}_{gt_index:06}.png"));
    if !path.is_file() {
        return Ok(None);
    }
    let img = image::open(&path)
        .map_err(|e| Error::UnsupportedFormat(e.to_string()).in_file(&path))?
        .to_luma8();
    let pixels = img
        .enumerate_pixels()
        .filter(|(_, _, p)| p.0[0] > 0)
        .map(|(x, y, _)| (x, y));
    Ok(Some(PixelMask::from_pixels(pixels)))
}

/// Encoding input for one annotated instance. The amodal box comes from
/// `bbox_obj` when present, otherwise from the projected cuboid.
pub fn annotation(
    inst: &GtInstance,
    model: &ObjectModel,
    camera: &CameraIntrinsics,
    mask: Option<PixelMask>,
) -> Result<InstanceAnnotation> {
    let pose = inst.pose()?;
    let bbox = match inst.bbox_obj {
        Some([x, y, w, h]) => [x, y, x + w, y + h],
        None => projected_box(&model.cuboid, &pose, camera)?,
    };
    Ok(InstanceAnnotation {
        class_id: model.class_id,
        bbox,
        visibility: VisibilityInfo {
            visible_fraction: inst.visibility(),
            footprint: mask,
        },
        pose,
    })
}

/// `[x0, y0, x1, y1]` of the projections of `points`.
pub fn projected_box(
    points: &[crate::geometry::Point3],
    pose: &Pose,
    cam: &CameraIntrinsics,
) -> Result<[f64; 4]> {
    let px = project(points, pose, cam)?;
    Ok(px.iter().fold(
        [
            f64::INFINITY,
            f64::INFINITY,
            f64::NEG_INFINITY,
            f64::NEG_INFINITY,
        ],
        |b, p| [b[0].min(p.x), b[1].min(p.y), b[2].max(p.x), b[3].max(p.y)],
    ))
}

/// One line of a results file.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub scene_id: u32,
    pub im_id: u32,
    pub obj_id: u32,
    pub score: f64,
    /// Row-major.
    pub rotation: [f64; 9],
    /// Millimeters.
    pub translation_mm: [f64; 3],
    /// Seconds; negative when unknown.
    pub time: f64,
}

impl ResultRow {
    pub fn from_pose(
        scene_id: u32,
        im_id: u32,
        obj_id: u32,
        score: f64,
        pose: &Pose,
        time: f64,
    ) -> Self {
        let (rotation, translation_mm) = raw_from_pose(pose);
        ResultRow {
            scene_id,
            im_id,
            obj_id,
            score,
            rotation,
            translation_mm,
            time,
        }
    }

    pub fn pose(&self) -> Result<Pose> {
        pose_from_raw(&self.rotation, &self.translation_mm)
    }

    fn is_finite(&self) -> bool {
        self.score.is_finite()
            && self.time.is_finite()
            && self
                .rotation
                .iter()
                .chain(&self.translation_mm)
                .all(|v| v.is_finite())
    }
}

fn join(v: &[f64]) -> String {
    v.iter()
        .map(|x| format!("{x}"))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Write rows with shortest round-trip float formatting.
pub fn write_results<W: Write>(out: &mut W, rows: &[ResultRow]) -> Result<()> {
    writeln!(out, "{RESULTS_HEADER}")?;
    for (i, r) in rows.iter().enumerate() {
        if !r.is_finite() {
            return Err(Error::Schema {
                row: i + 1,
                message: "non-finite value".into(),
            });
        }
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.scene_id,
            r.im_id,
            r.obj_id,
            r.score,
            join(&r.rotation),
            join(&r.translation_mm),
            r.time
        )?;
    }
    Ok(())
}

fn parse_floats<const N: usize>(field: &str, name: &str, row: usize) -> Result<[f64; N]> {
    let vals: Vec<f64> = field
        .split_whitespace()
        .map(|s| s.parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Schema {
            row,
            message: format!("{name}: {e}"),
        })?;
    vals.try_into().map_err(|v: Vec<f64>| Error::Schema {
        row,
        message: format!("{name} needs {N} values, got {}", v.len()),
    })
}

/// Parse a results file. Error rows are numbered from 1 for the first data
/// line after the header. An empty input holds no rows.
pub fn read_results<R: Read>(input: R) -> Result<Vec<ResultRow>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(input);
    let mut records = rdr.records();
    let header = match records.next() {
        None => return Ok(Vec::new()),
        Some(h) => h.map_err(|e| Error::Schema {
            row: 0,
            message: e.to_string(),
        })?,
    };
    let fields: Vec<&str> = header.iter().map(str::trim).collect();
    if fields.join(",") != RESULTS_HEADER {
        return Err(Error::Schema {
            row: 0,
            message: format!("expected header `{RESULTS_HEADER}`"),
        });
    }
    let mut rows = Vec::new();
    for (i, rec) in records.enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| Error::Schema {
            row,
            message: e.to_string(),
        })?;
        if rec.len() != 7 {
            return Err(Error::Schema {
                row,
                message: format!("expected 7 fields, got {}", rec.len()),
            });
        }
        let int = |k: usize, name: &str| -> Result<u32> {
            rec[k].trim().parse().map_err(|e| Error::Schema {
                row,
                message: format!("{name}: {e}"),
            })
        };
        let [score] = parse_floats::<1>(&rec[3], "score", row)?;
        let [time] = parse_floats::<1>(&rec[6], "time", row)?;
        let r = ResultRow {
            scene_id: int(0, "scene_id")?,
            im_id: int(1, "im_id")?,
            obj_id: int(2, "obj_id")?,
            score,
            rotation: parse_floats(&rec[4], "R", row)?,
            translation_mm: parse_floats(&rec[5], "t", row)?,
            time,
        };
        if !r.is_finite() {
            return Err(Error::Schema {
                row,
                message: "non-finite value".into(),
            });
        }
        rows.push(r);
    }
    Ok(rows)
}

pub fn read_results_file(path: &Path) -> Result<Vec<ResultRow>> {
    let f = std::fs::File::open(path).map_err(|e| Error::from(e).in_file(path))?;
    read_results(std::io::BufReader::new(f)).map_err(|e| e.in_file(path))
}

pub fn write_results_file(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let mut buf = Vec::new();
    write_results(&mut buf, rows)?;
    write_atomic(path, &buf)
}

/// Ground truth restated as perfect estimates with score 1.
pub fn gt_as_results(images: &[GtImage]) -> Vec<ResultRow> {
    images
        .iter()
        .flat_map(|img| {
            img.instances.iter().map(move |i| ResultRow {
                scene_id: img.scene_id,
                im_id: img.im_id,
                obj_id: i.obj_id,
                score: 1.0,
                rotation: i.rotation,
                translation_mm: i.translation_mm,
                time: -1.0,
            })
        })
        .collect()
}

/// Object id of a model file: the trailing digits of its stem.
fn obj_id_from_stem(stem: &str) -> Option<u32> {
    let digits: String = stem
        .chars()
        .rev()
        .take_while(|c| c.is_ascii_digit())
        .collect::<Vec<_>>()
        .into_iter()
        .rev()
        .collect();
    digits.parse().ok()
}

/// PLY files of a models directory, sorted by file name, with their
/// object ids. Files without a numeric suffix are numbered by position.
pub fn model_files(dir: &Path) -> Result<Vec<(u32, PathBuf)>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::from(e).in_file(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| e.eq_ignore_ascii_case("ply"))
        })
        .collect();
    files.sort();
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(files.len());
    for (k, p) in files.into_iter().enumerate() {
        let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or("");
        let id = obj_id_from_stem(stem).unwrap_or(k as u32 + 1);
        if !seen.insert(id) {
            return Err(Error::UnsupportedFormat(format!("duplicate object id {id}")).in_file(&p));
        }
        out.push((id, p));
    }
    out.sort_by_key(|(id, _)| *id);
    Ok(out)
}

/// Load every model of a directory. Class ids follow ascending object id.
/// A `models_info.json` next to the meshes overrides diameters, cuboids and
/// symmetries.
pub fn load_models_dir(
    dir: &Path,
    unit: LengthUnit,
    symmetry_steps: usize,
) -> Result<Vec<ObjectModel>> {
    let info_path = dir.join(MODELS_INFO);
    let info = if info_path.is_file() {
        Some(read_models_info(&info_path)?)
    } else {
        None
    };
    let mut models = Vec::new();
    for (class_id, (obj_id, path)) in model_files(dir)?.into_iter().enumerate() {
        let mesh = load_ply(&path, unit)?;
        let mut m = ObjectModel::new(class_id, obj_id, mesh, SymmetrySet::default())
            .map_err(|e| e.in_file(&path))?;
        if let Some(rec) = info.as_ref().and_then(|i| i.get(&obj_id.to_string())) {
            m.apply_info(rec, symmetry_steps)
                .map_err(|e| e.in_file(&info_path))?;
        }
        models.push(m);
    }
    Ok(models)
}
