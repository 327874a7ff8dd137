//! Software z-buffer depth rendering, sampled at pixel centers.

use crate::geometry::{CameraIntrinsics, Pose, Vec3};
use crate::mesh::TriangleMesh;

/// Vertices closer than this are treated as behind the camera and their
/// triangles are skipped.
const NEAR_PLANE: f64 = 1e-6;

/// Rectangular window of a depth image in meters; 0 marks no surface.
/// Pixels outside the window read as 0.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub x0: u32,
    pub y0: u32,
    pub width: u32,
    pub height: u32,
    pub data: Vec<f64>,
}

impl DepthMap {
    pub fn zeros(width: u32, height: u32) -> Self {
        Self::window(0, 0, width, height)
    }

    pub fn window(x0: u32, y0: u32, width: u32, height: u32) -> Self {
        DepthMap {
            x0,
            y0,
            width,
            height,
            data: vec![0.0; (width as usize) * (height as usize)],
        }
    }

    /// Depth at absolute pixel `(x, y)`.
    pub fn get(&self, x: u32, y: u32) -> f64 {
        if x < self.x0 || y < self.y0 {
            return 0.0;
        }
        let (dx, dy) = (x - self.x0, y - self.y0);
        if dx >= self.width || dy >= self.height {
            return 0.0;
        }
        self.data[(dy * self.width + dx) as usize]
    }

    pub fn set(&mut self, x: u32, y: u32, v: f64) {
        assert!(x >= self.x0 && y >= self.y0);
        let (dx, dy) = (x - self.x0, y - self.y0);
        assert!(dx < self.width && dy < self.height);
        self.data[(dy * self.width + dx) as usize] = v;
    }

    /// Absolute `[x0, y0, x1, y1)` bounds.
    pub fn bounds(&self) -> [u32; 4] {
        [
            self.x0,
            self.y0,
            self.x0 + self.width,
            self.y0 + self.height,
        ]
    }

    pub fn count_nonzero(&self) -> usize {
        self.data.iter().filter(|&&d| d > 0.0).count()
    }
}

/// Full-image depth render of a mesh under a pose.
pub fn render_depth(mesh: &TriangleMesh, pose: &Pose, cam: &CameraIntrinsics) -> DepthMap {
    let mut map = DepthMap::zeros(cam.width, cam.height);
    rasterize(mesh, pose, cam, &mut map);
    map
}

/// Render restricted to the bounding rectangle of the projected vertices.
pub fn render_depth_roi(mesh: &TriangleMesh, pose: &Pose, cam: &CameraIntrinsics) -> DepthMap {
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    for v in &mesh.vertices {
        let p = pose.transform(v);
        if p.z <= NEAR_PLANE {
            continue;
        }
        let u = cam.fx * p.x / p.z + cam.cx;
        let w = cam.fy * p.y / p.z + cam.cy;
        lo = [lo[0].min(u), lo[1].min(w)];
        hi = [hi[0].max(u), hi[1].max(w)];
    }
    let clip = |v: f64, max: u32| v.max(0.0).min(max as f64) as u32;
    let x0 = clip(lo[0].floor(), cam.width);
    let y0 = clip(lo[1].floor(), cam.height);
    let x1 = clip(hi[0].ceil() + 1.0, cam.width);
    let y1 = clip(hi[1].ceil() + 1.0, cam.height);
    if !(lo[0].is_finite()) || x1 <= x0 || y1 <= y0 {
        return DepthMap::window(0, 0, 0, 0);
    }
    let mut map = DepthMap::window(x0, y0, x1 - x0, y1 - y0);
    rasterize(mesh, pose, cam, &mut map);
    map
}

fn rasterize(mesh: &TriangleMesh, pose: &Pose, cam: &CameraIntrinsics, map: &mut DepthMap) {
    if map.width == 0 || map.height == 0 {
        return;
    }
    let cam_pts: Vec<Vec3> = mesh
        .vertices
        .iter()
        .map(|v| pose.transform(v).coords)
        .collect();
    let [bx0, by0, bx1, by1] = map.bounds();
    for tri in &mesh.triangles {
        let p = tri.map(|i| cam_pts[i as usize]);
        if p.iter().any(|v| v.z <= NEAR_PLANE) {
            continue;
        }
        let s = p.map(|v| (cam.fx * v.x / v.z + cam.cx, cam.fy * v.y / v.z + cam.cy));
        let area = edge(s[0], s[1], s[2]);
        if area == 0.0 || !area.is_finite() {
            continue;
        }
        let min_x = s.iter().map(|q| q.0).fold(f64::INFINITY, f64::min);
        let max_x = s.iter().map(|q| q.0).fold(f64::NEG_INFINITY, f64::max);
        let min_y = s.iter().map(|q| q.1).fold(f64::INFINITY, f64::min);
        let max_y = s.iter().map(|q| q.1).fold(f64::NEG_INFINITY, f64::max);
        // Pixel (x, y) is sampled at (x + 0.5, y + 0.5).
        let xs = ((min_x - 0.5).ceil().max(bx0 as f64)) as u32;
        let ys = ((min_y - 0.5).ceil().max(by0 as f64)) as u32;
        let xe = ((max_x - 0.5).floor().min(bx1 as f64 - 1.0)) as i64;
        let ye = ((max_y - 0.5).floor().min(by1 as f64 - 1.0)) as i64;
        let inv_z = p.map(|v| 1.0 / v.z);
        for y in ys as i64..=ye {
            for x in xs as i64..=xe {
                let c = (x as f64 + 0.5, y as f64 + 0.5);
                let w0 = edge(s[1], s[2], c) / area;
                let w1 = edge(s[2], s[0], c) / area;
                let w2 = edge(s[0], s[1], c) / area;
                if w0 < 0.0 || w1 < 0.0 || w2 < 0.0 {
                    continue;
                }
                // Perspective-correct: 1/z is affine in screen space.
                let z = 1.0 / (w0 * inv_z[0] + w1 * inv_z[1] + w2 * inv_z[2]);
                let (x, y) = (x as u32, y as u32);
                let cur = map.get(x, y);
                if cur == 0.0 || z < cur {
                    map.set(x, y, z);
                }
            }
        }
    }
}

fn edge(a: (f64, f64), b: (f64, f64), c: (f64, f64)) -> f64 {
    (b.0 - a.0) * (c.1 - a.1) - (b.1 - a.1) * (c.0 - a.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Point3, RotationMatrix};

    fn cam() -> CameraIntrinsics {
        CameraIntrinsics::new(100.0, 100.0, 50.0, 50.0, 100, 100).unwrap()
    }

    fn square(half: f64, z: f64) -> TriangleMesh {
        TriangleMesh::new(
            vec![
                Point3::new(-half, -half, z),
                Point3::new(half, -half, z),
                Point3::new(half, half, z),
                Point3::new(-half, half, z),
            ],
            vec![[0, 1, 2], [0, 2, 3]],
        )
        .unwrap()
    }

    #[test]
    fn empty_mesh_renders_nothing() {
        let m = TriangleMesh {
            vertices: vec![Point3::origin()],
            triangles: vec![],
        };
        assert_eq!(
            render_depth(&m, &Pose::identity(), &cam()).count_nonzero(),
            0
        );
    }

    #[test]
    fn square_fills_known_rect() {
        // ±0.1 m at 1 m → ±10 px around (50, 50): centers 40.5..59.5.
        let d = render_depth(&square(0.1, 1.0), &Pose::identity(), &cam());
        for y in 0..100 {
            for x in 0..100 {
                let inside = (40..60).contains(&x) && (40..60).contains(&y);
                let v = d.get(x, y);
                if inside {
                    assert!((v - 1.0).abs() < 1e-12, "({x},{y}) = {v}");
                } else {
                    assert_eq!(v, 0.0, "({x},{y})");
                }
            }
        }
        assert_eq!(d.count_nonzero(), 400);
    }

    #[test]
    fn nearest_surface_wins() {
        let mut near = square(0.1, 1.0);
        let far = square(0.3, 2.0);
        let n = near.vertices.len() as u32;
        near.vertices.extend(far.vertices);
        near.triangles
            .extend(far.triangles.iter().map(|t| t.map(|i| i + n)));
        let d = render_depth(&near, &Pose::identity(), &cam());
        assert!((d.get(50, 50) - 1.0).abs() < 1e-12);
        assert!((d.get(36, 50) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn roi_matches_full_render() {
        let m = TriangleMesh::icosphere(0.05, 2);
        let pose = Pose::new(RotationMatrix::rot_y(0.3), Vec3::new(0.02, -0.01, 0.4));
        let full = render_depth(&m, &pose, &cam());
        let roi = render_depth_roi(&m, &pose, &cam());
        assert!(roi.width < 100);
        for y in 0..100 {
            for x in 0..100 {
                assert_eq!(full.get(x, y), roi.get(x, y));
            }
        }
        // Perspective-correct depth lies on the sphere surface.
        let v = full.get(50 + 5, 50 - 2);
        assert!(v > 0.35 && v < 0.4);
    }
}
