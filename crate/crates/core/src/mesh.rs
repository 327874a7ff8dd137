//! Object meshes and their geometric priors: diameter, enclosing cuboid
//! corners and symmetry sets.

use std::collections::BTreeMap;
use std::f64::consts::TAU;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Mat3, Point3, Pose, RotationMatrix, Vec3};
use crate::par::{self, Execution};

pub mod ply;

pub use ply::{load_ply, read_ply, write_ply, LengthUnit, PlyEncoding};

/// Meshes with at least this many vertices use the pruned diameter search.
pub const EXACT_DIAMETER_LIMIT: usize = 10_000;

/// Default sampling density for continuous symmetries.
pub const DEFAULT_CONTINUOUS_STEPS: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct TriangleMesh {
    pub vertices: Vec<Point3>,
    pub triangles: Vec<[u32; 3]>,
}

impl TriangleMesh {
    pub fn new(vertices: Vec<Point3>, triangles: Vec<[u32; 3]>) -> Result<Self> {
        if vertices.is_empty() {
            return Err(Error::degenerate("mesh has no vertices"));
        }
        let n = vertices.len();
        if let Some(bad) = triangles.iter().flatten().find(|&&i| i as usize >= n) {
            return Err(Error::IndexOutOfRange {
                index: *bad as usize,
                len: n,
            });
        }
        Ok(TriangleMesh {
            vertices,
            triangles,
        })
    }

    /// Axis-aligned box centered at the origin with edge lengths `size`.
    pub fn cuboid(size: Vec3) -> Self {
        let h = size / 2.0;
        let vertices = (0..8).map(|i| corner_of(i, &(-h), &h)).collect::<Vec<_>>();
        // Corner index bits: x = 4, y = 2, z = 1.
        let quads = [
            [0, 1, 3, 2], // -x
            [4, 6, 7, 5], // +x
            [0, 4, 5, 1], // -y
            [2, 3, 7, 6], // +y
            [0, 2, 6, 4], // -z
            [1, 5, 7, 3], // +z
        ];
        let triangles = quads
            .iter()
            .flat_map(|q| [[q[0], q[1], q[2]], [q[0], q[2], q[3]]])
            .collect();
        TriangleMesh {
            vertices,
            triangles,
        }
    }

    /// Subdivided icosahedron projected onto a sphere of `radius`.
    pub fn icosphere(radius: f64, subdivisions: usize) -> Self {
        let t = (1.0 + 5f64.sqrt()) / 2.0;
        let mut verts: Vec<Vec3> = [
            (-1.0, t, 0.0),
            (1.0, t, 0.0),
            (-1.0, -t, 0.0),
            (1.0, -t, 0.0),
            (0.0, -1.0, t),
            (0.0, 1.0, t),
            (0.0, -1.0, -t),
            (0.0, 1.0, -t),
            (t, 0.0, -1.0),
            (t, 0.0, 1.0),
            (-t, 0.0, -1.0),
            (-t, 0.0, 1.0),
        ]
        .iter()
        .map(|&(x, y, z)| Vec3::new(x, y, z).normalize())
        .collect();
        let mut faces: Vec<[u32; 3]> = vec![
            [0, 11, 5],
            [0, 5, 1],
            [0, 1, 7],
            [0, 7, 10],
            [0, 10, 11],
            [1, 5, 9],
            [5, 11, 4],
            [11, 10, 2],
            [10, 7, 6],
            [7, 1, 8],
            [3, 9, 4],
            [3, 4, 2],
            [3, 2, 6],
            [3, 6, 8],
            [3, 8, 9],
            [4, 9, 5],
            [2, 4, 11],
            [6, 2, 10],
            [8, 6, 7],
            [9, 8, 1],
        ];
        for _ in 0..subdivisions {
            let mut midpoints: BTreeMap<(u32, u32), u32> = BTreeMap::new();
            let mut mid = |a: u32, b: u32, verts: &mut Vec<Vec3>| -> u32 {
                let key = (a.min(b), a.max(b));
                *midpoints.entry(key).or_insert_with(|| {
                    let m = (verts[a as usize] + verts[b as usize]).normalize();
                    verts.push(m);
                    (verts.len() - 1) as u32
                })
            };
            let mut next = Vec::with_capacity(faces.len() * 4);
            for [a, b, c] in faces {
                let ab = mid(a, b, &mut verts);
                let bc = mid(b, c, &mut verts);
                let ca = mid(c, a, &mut verts);
                next.extend([[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
            }
            faces = next;
        }
        TriangleMesh {
            vertices: verts.iter().map(|v| Point3::from(v * radius)).collect(),
            triangles: faces,
        }
    }

    /// Closed cylinder around the z axis, centered at the origin.
    pub fn cylinder(radius: f64, height: f64, segments: usize) -> Self {
        let segments = segments.max(3);
        let h = height / 2.0;
        let mut vertices = Vec::with_capacity(2 * segments + 2);
        for i in 0..segments {
            let a = TAU * i as f64 / segments as f64;
            let (s, c) = a.sin_cos();
            vertices.push(Point3::new(radius * c, radius * s, -h));
            vertices.push(Point3::new(radius * c, radius * s, h));
        }
        let bottom = vertices.len() as u32;
        vertices.push(Point3::new(0.0, 0.0, -h));
        let top = vertices.len() as u32;
        vertices.push(Point3::new(0.0, 0.0, h));
        let mut triangles = Vec::with_capacity(4 * segments);
        for i in 0..segments as u32 {
            let j = (i + 1) % segments as u32;
            let (b0, t0, b1, t1) = (2 * i, 2 * i + 1, 2 * j, 2 * j + 1);
            triangles.push([b0, b1, t1]);
            triangles.push([b0, t1, t0]);
            triangles.push([bottom, b1, b0]);
            triangles.push([top, t0, t1]);
        }
        TriangleMesh {
            vertices,
            triangles,
        }
    }

    pub fn transformed(&self, pose: &Pose) -> TriangleMesh {
        TriangleMesh {
            vertices: self.vertices.iter().map(|v| pose.transform(v)).collect(),
            triangles: self.triangles.clone(),
        }
    }

    /// Axis-aligned bounds `(min, max)`.
    pub fn bounds(&self) -> (Vec3, Vec3) {
        let mut lo = Vec3::repeat(f64::INFINITY);
        let mut hi = Vec3::repeat(f64::NEG_INFINITY);
        for v in &self.vertices {
            lo = lo.inf(&v.coords);
            hi = hi.sup(&v.coords);
        }
        (lo, hi)
    }
}

fn corner_of(i: usize, lo: &Vec3, hi: &Vec3) -> Point3 {
    Point3::new(
        if i & 4 == 0 { lo.x } else { hi.x },
        if i & 2 == 0 { lo.y } else { hi.y },
        if i & 1 == 0 { lo.z } else { hi.z },
    )
}

/// The 8 corners of the axis-aligned bounding box. Corner `i` takes the max
/// along x if bit 2 of `i` is set, along y for bit 1 and along z for bit 0,
/// so the order is `(-,-,-), (-,-,+), (-,+,-), (-,+,+), (+,-,-), ...`.
pub fn cuboid_corners(mesh: &TriangleMesh) -> [Point3; 8] {
    let (lo, hi) = mesh.bounds();
    cuboid_from_bounds(&lo, &hi)
}

pub fn cuboid_from_bounds(lo: &Vec3, hi: &Vec3) -> [Point3; 8] {
    std::array::from_fn(|i| corner_of(i, lo, hi))
}

#[inline]
fn dist(a: &Point3, b: &Point3) -> f64 {
    (a - b).norm()
}

/// Largest pairwise vertex distance.
pub fn diameter(mesh: &TriangleMesh) -> Result<f64> {
    diameter_of_points(&mesh.vertices, Execution::default())
}

pub fn diameter_of_points(points: &[Point3], exec: Execution) -> Result<f64> {
    if points.len() < 2 {
        return Err(Error::degenerate("diameter needs at least two vertices"));
    }
    if points.len() < EXACT_DIAMETER_LIMIT {
        Ok(diameter_brute_force(points, exec))
    } else {
        Ok(diameter_pruned(points, exec))
    }
}

/// Exact O(n²) search over all vertex pairs.
pub fn diameter_brute_force(points: &[Point3], exec: Execution) -> f64 {
    let n = points.len();
    par::max_range(exec, n, |i| {
        points[i + 1..]
            .iter()
            .map(|q| dist(&points[i], q))
            .fold(0.0, f64::max)
    })
}

/// Exact diameter restricted to vertices that can still be an endpoint of a
/// longest pair.
///
/// With `c` the box center and `R` the largest distance from `c`, any pair
/// `(p, q)` satisfies `|p - q| <= |p - c| + R`. Given a lower bound `D0` on
/// the diameter, only vertices with `|p - c| + R >= D0` can be endpoints.
pub fn diameter_pruned(points: &[Point3], exec: Execution) -> f64 {
    let n = points.len();
    if n < 2 {
        return 0.0;
    }
    let (lo, hi) = points.iter().fold(
        (Vec3::repeat(f64::INFINITY), Vec3::repeat(f64::NEG_INFINITY)),
        |(lo, hi), p| (lo.inf(&p.coords), hi.sup(&p.coords)),
    );
    let center = Point3::from((lo + hi) / 2.0);
    let radii = par::map(exec, points, |p| dist(p, &center));
    let r_max = radii.iter().copied().fold(0.0, f64::max);

    // Lower bound from the farthest partners of directional extreme points.
    let mut dirs = Vec::with_capacity(13);
    for x in -1i32..=1 {
        for y in -1i32..=1 {
            for z in -1i32..=1 {
                let d = Vec3::new(x as f64, y as f64, z as f64);
                // One of each antipodal pair, skipping zero.
                if (x, y, z) > (0, 0, 0) {
                    dirs.push(d);
                }
            }
        }
    }
    let mut extremes: Vec<usize> = Vec::with_capacity(2 * dirs.len());
    for d in &dirs {
        let (mut imin, mut imax) = (0, 0);
        let (mut vmin, mut vmax) = (f64::INFINITY, f64::NEG_INFINITY);
        for (i, p) in points.iter().enumerate() {
            let v = d.dot(&p.coords);
            if v < vmin {
                vmin = v;
                imin = i;
            }
            if v > vmax {
                vmax = v;
                imax = i;
            }
        }
        extremes.push(imin);
        extremes.push(imax);
    }
    extremes.sort_unstable();
    extremes.dedup();
    let lower = par::max_range(exec, extremes.len(), |k| {
        let e = &points[extremes[k]];
        points.iter().map(|q| dist(e, q)).fold(0.0, f64::max)
    });

    let slack = lower * 1e-12;
    let candidates: Vec<Point3> = points
        .iter()
        .zip(&radii)
        .filter(|(_, &r)| r + r_max >= lower - slack)
        .map(|(p, _)| *p)
        .collect();
    diameter_brute_force(&candidates, exec).max(lower)
}

/// A continuous rotational symmetry about `axis` through `offset`
/// (object frame, meters).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContinuousSymmetry {
    pub axis: Vec3,
    pub offset: Vec3,
}

/// Finite set of object-frame rigid transforms under which the object looks
/// the same. The first element is always the identity.
#[derive(Debug, Clone, PartialEq)]
pub struct SymmetrySet {
    transforms: Vec<Pose>,
}

impl Default for SymmetrySet {
    fn default() -> Self {
        SymmetrySet {
            transforms: vec![Pose::identity()],
        }
    }
}

impl SymmetrySet {
    pub fn identity_only() -> Self {
        Self::default()
    }

    pub fn transforms(&self) -> &[Pose] {
        &self.transforms
    }

    pub fn len(&self) -> usize {
        self.transforms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transforms.is_empty()
    }

    pub fn get(&self, index: usize) -> Result<&Pose> {
        self.transforms.get(index).ok_or(Error::IndexOutOfRange {
            index,
            len: self.transforms.len(),
        })
    }

    pub fn is_trivial(&self) -> bool {
        self.transforms.len() == 1
    }
}

/// Identity, then the discrete transforms, then for every continuous axis the
/// rotations by `2πj/steps` for `j = 1..steps`.
pub fn build_symmetry_set(
    discrete: &[Pose],
    continuous: &[ContinuousSymmetry],
    steps: usize,
) -> Result<SymmetrySet> {
    if steps == 0 {
        return Err(Error::degenerate("continuous symmetry steps must be >= 1"));
    }
    let mut transforms = vec![Pose::identity()];
    transforms.extend_from_slice(discrete);
    for sym in continuous {
        for j in 1..steps {
            let angle = TAU * j as f64 / steps as f64;
            let r = RotationMatrix::about_axis(&sym.axis, angle)?;
            let t = sym.offset - r.rotate(&sym.offset);
            transforms.push(Pose::new(r, t));
        }
    }
    Ok(SymmetrySet { transforms })
}

/// Largest distance from a transformed vertex to its nearest original vertex.
/// Zero (up to rounding) when `s` maps the vertex set onto itself.
pub fn symmetry_residual(mesh: &TriangleMesh, s: &Pose) -> f64 {
    let v = &mesh.vertices;
    par::max_range(Execution::default(), v.len(), |i| {
        let p = s.transform(&v[i]);
        v.iter().map(|q| dist(&p, q)).fold(f64::INFINITY, f64::min)
    })
}

/// A mesh together with the priors the pipeline derives from it.
#[derive(Debug, Clone)]
pub struct ObjectModel {
    /// Class label in `[0, a)`.
    pub class_id: usize,
    /// Dataset object id (BOP `obj_id`).
    pub obj_id: u32,
    pub mesh: TriangleMesh,
    /// Meters.
    pub diameter: f64,
    pub cuboid: [Point3; 8],
    pub symmetries: SymmetrySet,
}

impl ObjectModel {
    pub fn new(
        class_id: usize,
        obj_id: u32,
        mesh: TriangleMesh,
        symmetries: SymmetrySet,
    ) -> Result<Self> {
        let diameter = diameter(&mesh)?;
        if !(diameter > 0.0) {
            return Err(Error::degenerate("mesh diameter is zero"));
        }
        let cuboid = cuboid_corners(&mesh);
        Ok(ObjectModel {
            class_id,
            obj_id,
            mesh,
            diameter,
            cuboid,
            symmetries,
        })
    }

    /// Replace computed priors with the values in a models-info record.
    pub fn apply_info(&mut self, info: &ModelInfo, steps: usize) -> Result<()> {
        if let Some(d) = info.diameter {
            if !(d > 0.0) {
                return Err(Error::degenerate(format!(
                    "models info diameter {d} for object {} is not positive",
                    self.obj_id
                )));
            }
            self.diameter = d / 1000.0;
        }
        if let (Some(mn), Some(sz)) = (info.min(), info.size()) {
            let lo = mn / 1000.0;
            let hi = lo + sz / 1000.0;
            self.cuboid = cuboid_from_bounds(&lo, &hi);
        }
        if info.symmetries_discrete.is_some() || info.symmetries_continuous.is_some() {
            self.symmetries = info.symmetry_set(steps)?;
        }
        Ok(())
    }

    pub fn is_symmetric(&self) -> bool {
        !self.symmetries.is_trivial()
    }

    pub fn info(&self) -> ModelInfo {
        let (lo, hi) = cuboid_bounds(&self.cuboid);
        let size = hi - lo;
        let mut discrete = Vec::new();
        for s in self.symmetries.transforms().iter().skip(1) {
            let r = s.rotation.to_row_major();
            let t = s.translation * 1000.0;
            discrete.push([
                r[0], r[1], r[2], t.x, r[3], r[4], r[5], t.y, r[6], r[7], r[8], t.z, 0.0, 0.0, 0.0,
                1.0,
            ]);
        }
        ModelInfo {
            diameter: Some(self.diameter * 1000.0),
            min_x: Some(lo.x * 1000.0),
            min_y: Some(lo.y * 1000.0),
            min_z: Some(lo.z * 1000.0),
            size_x: Some(size.x * 1000.0),
            size_y: Some(size.y * 1000.0),
            size_z: Some(size.z * 1000.0),
            symmetries_discrete: (!discrete.is_empty()).then_some(discrete),
            symmetries_continuous: None,
        }
    }
}

fn cuboid_bounds(c: &[Point3; 8]) -> (Vec3, Vec3) {
    c.iter().fold(
        (Vec3::repeat(f64::INFINITY), Vec3::repeat(f64::NEG_INFINITY)),
        |(lo, hi), p| (lo.inf(&p.coords), hi.sup(&p.coords)),
    )
}

/// One entry of a BOP-style `models_info.json`. Lengths in millimeters.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelInfo {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diameter: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_x: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_y: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_z: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub size_x: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub size_y: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub size_z: Option<f64>,
    /// Row-major 4x4 transforms, translation in millimeters.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub symmetries_discrete: Option<Vec<[f64; 16]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub symmetries_continuous: Option<Vec<ContinuousSymmetryInfo>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContinuousSymmetryInfo {
    pub axis: [f64; 3],
    /// Millimeters.
    #[serde(default)]
    pub offset: [f64; 3],
}

impl ModelInfo {
    fn min(&self) -> Option<Vec3> {
        Some(Vec3::new(self.min_x?, self.min_y?, self.min_z?))
    }

    fn size(&self) -> Option<Vec3> {
        Some(Vec3::new(self.size_x?, self.size_y?, self.size_z?))
    }

    pub fn symmetry_set(&self, steps: usize) -> Result<SymmetrySet> {
        let discrete = self
            .symmetries_discrete
            .iter()
            .flatten()
            .map(|m| {
                let r = Mat3::new(m[0], m[1], m[2], m[4], m[5], m[6], m[8], m[9], m[10]);
                let t = Vec3::new(m[3], m[7], m[11]) / 1000.0;
                Ok(Pose::new(RotationMatrix::project(&r)?, t))
            })
            .collect::<Result<Vec<_>>>()?;
        let continuous: Vec<ContinuousSymmetry> = self
            .symmetries_continuous
            .iter()
            .flatten()
            .map(|c| ContinuousSymmetry {
                axis: Vec3::from(c.axis),
                offset: Vec3::from(c.offset) / 1000.0,
            })
            .collect();
        build_symmetry_set(&discrete, &continuous, steps)
    }
}

/// `models_info.json`: object id (as a string key) to record.
pub type ModelsInfo = BTreeMap<String, ModelInfo>;

pub fn read_models_info(path: &Path) -> Result<ModelsInfo> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::from(e).in_file(path))?;
    serde_json::from_str(&text).map_err(|e| Error::from(e).in_file(path))
}
