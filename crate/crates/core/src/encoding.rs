//! Anchor-free training targets: pyramid level from object diameter and
//! depth, true-location sampling from visible masks, and diameter-based
//! standardization of corner offsets.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    egocentric_to_allocentric, matrix_to_rot6d, project, CameraIntrinsics, Point2, Pose,
};
use crate::mesh::ObjectModel;

/// Instances below this visible fraction are background for classification.
pub const CLS_VISIBILITY_MIN: f64 = 0.25;
/// Regression losses only use instances at least this visible.
pub const REG_VISIBILITY_MIN: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PyramidSpec {
    /// Pixel stride per level, finest first.
    pub strides: Vec<u32>,
    /// Level offset.
    pub f: f64,
    /// Logarithm base.
    pub d: f64,
}

impl Default for PyramidSpec {
    fn default() -> Self {
        PyramidSpec {
            strides: vec![8, 16, 32],
            f: 2.0,
            d: 3.0,
        }
    }
}

impl PyramidSpec {
    pub fn validate(&self) -> Result<()> {
        if self.strides.is_empty() {
            return Err(Error::degenerate("pyramid needs at least one level"));
        }
        if !self.strides.iter().all(|s| s.is_power_of_two()) {
            return Err(Error::degenerate("strides must be powers of two"));
        }
        if !self.strides.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::degenerate("strides must be strictly increasing"));
        }
        if !(self.d > 1.0) || !self.f.is_finite() {
            return Err(Error::degenerate("log base must exceed 1 and f be finite"));
        }
        Ok(())
    }

    pub fn num_levels(&self) -> usize {
        self.strides.len()
    }

    /// Grid `(rows, cols)` of a level for an image.
    pub fn grid_shape(&self, level: usize, cam: &CameraIntrinsics) -> (u32, u32) {
        let s = self.strides[level];
        (cam.height.div_ceil(s), cam.width.div_ceil(s))
    }

    /// Every feature location of the pyramid, level by level, row-major.
    pub fn locations(&self, cam: &CameraIntrinsics) -> Vec<FeatureLocation> {
        let mut out = Vec::new();
        for level in 0..self.num_levels() {
            let (rows, cols) = self.grid_shape(level, cam);
            for row in 0..rows {
                for col in 0..cols {
                    out.push(FeatureLocation::new(self, level, row, col));
                }
            }
        }
        out
    }
}

/// Continuous level value `f + log_d(δ / t_z)` before rounding and clamping.
pub fn level_value(delta_o: f64, t_z: f64, spec: &PyramidSpec) -> Result<f64> {
    if !(delta_o > 0.0) || !(t_z > 0.0) {
        return Err(Error::degenerate(format!(
            "level assignment needs positive diameter and depth (got {delta_o}, {t_z})"
        )));
    }
    Ok(spec.f + (delta_o / t_z).ln() / spec.d.ln())
}

/// Rounded (half up) but unclamped level.
pub fn unclamped_level(delta_o: f64, t_z: f64, spec: &PyramidSpec) -> Result<i64> {
    Ok((level_value(delta_o, t_z, spec)? + 0.5).floor() as i64)
}

pub fn assign_level(delta_o: f64, t_z: f64, spec: &PyramidSpec) -> Result<usize> {
    let top = spec.num_levels() as i64 - 1;
    Ok(unclamped_level(delta_o, t_z, spec)?.clamp(0, top) as usize)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureLocation {
    pub level: usize,
    pub row: u32,
    pub col: u32,
    /// Cell center in input-image pixels.
    pub center: [f64; 2],
}

impl FeatureLocation {
    pub fn new(spec: &PyramidSpec, level: usize, row: u32, col: u32) -> Self {
        let s = spec.strides[level] as f64;
        FeatureLocation {
            level,
            row,
            col,
            center: [(col as f64 + 0.5) * s, (row as f64 + 0.5) * s],
        }
    }

    pub fn center_point(&self) -> Point2 {
        Point2::new(self.center[0], self.center[1])
    }
}

/// Object diameter projected to pixels at depth `t_z`, using the mean focal
/// length.
pub fn projected_diameter_px(delta_o: f64, t_z: f64, cam: &CameraIntrinsics) -> Result<f64> {
    if !(delta_o > 0.0) || !(t_z > 0.0) {
        return Err(Error::degenerate(
            "projected diameter needs positive inputs",
        ));
    }
    Ok(0.5 * (cam.fx + cam.fy) * delta_o / t_z)
}

fn check_scale(delta_px: f64) -> Result<()> {
    if !(delta_px > 0.0) || !delta_px.is_finite() {
        return Err(Error::degenerate(format!(
            "standardization scale must be positive (got {delta_px})"
        )));
    }
    Ok(())
}

/// `y = (c - g) / δ_px` for every corner, laid out `[x0, y0, x1, y1, ...]`.
pub fn standardize(corners: &[Point2; 8], center: &Point2, delta_px: f64) -> Result<[f64; 16]> {
    check_scale(delta_px)?;
    let mut y = [0.0; 16];
    for (k, g) in corners.iter().enumerate() {
        y[2 * k] = (center.x - g.x) / delta_px;
        y[2 * k + 1] = (center.y - g.y) / delta_px;
    }
    Ok(y)
}

pub fn destandardize(y: &[f64; 16], center: &Point2, delta_px: f64) -> Result<[Point2; 8]> {
    check_scale(delta_px)?;
    Ok(std::array::from_fn(|k| {
        Point2::new(
            center.x - y[2 * k] * delta_px,
            center.y - y[2 * k + 1] * delta_px,
        )
    }))
}

/// Box `[x1, y1, x2, y2]` standardized like the corners.
pub fn standardize_box(bbox: &[f64; 4], center: &Point2, delta_px: f64) -> Result<[f64; 4]> {
    check_scale(delta_px)?;
    Ok([
        (center.x - bbox[0]) / delta_px,
        (center.y - bbox[1]) / delta_px,
        (center.x - bbox[2]) / delta_px,
        (center.y - bbox[3]) / delta_px,
    ])
}

pub fn destandardize_box(y: &[f64; 4], center: &Point2, delta_px: f64) -> Result<[f64; 4]> {
    check_scale(delta_px)?;
    Ok([
        center.x - y[0] * delta_px,
        center.y - y[1] * delta_px,
        center.x - y[2] * delta_px,
        center.y - y[3] * delta_px,
    ])
}

/// Pixel set stored as a bitmap over its bounding rectangle.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PixelMask {
    x0: u32,
    y0: u32,
    width: u32,
    height: u32,
    bits: Vec<bool>,
}

impl PixelMask {
    pub fn from_pixels(pixels: impl IntoIterator<Item = (u32, u32)>) -> Self {
        let pixels: Vec<(u32, u32)> = pixels.into_iter().collect();
        if pixels.is_empty() {
            return PixelMask::default();
        }
        let x0 = pixels.iter().map(|p| p.0).min().unwrap();
        let x1 = pixels.iter().map(|p| p.0).max().unwrap();
        let y0 = pixels.iter().map(|p| p.1).min().unwrap();
        let y1 = pixels.iter().map(|p| p.1).max().unwrap();
        let (width, height) = (x1 - x0 + 1, y1 - y0 + 1);
        let mut bits = vec![false; (width * height) as usize];
        for (x, y) in pixels {
            bits[((y - y0) * width + (x - x0)) as usize] = true;
        }
        PixelMask {
            x0,
            y0,
            width,
            height,
            bits,
        }
    }

    /// Rectangle `[x0, x1) × [y0, y1)`.
    pub fn from_rect(x0: u32, y0: u32, x1: u32, y1: u32) -> Self {
        if x1 <= x0 || y1 <= y0 {
            return PixelMask::default();
        }
        PixelMask {
            x0,
            y0,
            width: x1 - x0,
            height: y1 - y0,
            bits: vec![true; ((x1 - x0) * (y1 - y0)) as usize],
        }
    }

    /// Bitmap with an explicit origin; `bits` is row-major over `width × height`.
    pub fn from_bitmap(x0: u32, y0: u32, width: u32, height: u32, bits: Vec<bool>) -> Self {
        assert_eq!(bits.len(), (width * height) as usize);
        PixelMask {
            x0,
            y0,
            width,
            height,
            bits,
        }
    }

    pub fn contains(&self, x: u32, y: u32) -> bool {
        if x < self.x0 || y < self.y0 {
            return false;
        }
        let (dx, dy) = (x - self.x0, y - self.y0);
        dx < self.width && dy < self.height && self.bits[(dy * self.width + dx) as usize]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    /// Bounding rectangle `[x0, y0, x1, y1)` (exclusive upper bounds).
    pub fn bounds(&self) -> [u32; 4] {
        [
            self.x0,
            self.y0,
            self.x0 + self.width,
            self.y0 + self.height,
        ]
    }

    pub fn pixels(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(|(i, _)| {
                let i = i as u32;
                (self.x0 + i % self.width, self.y0 + i / self.width)
            })
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct VisibilityInfo {
    pub visible_fraction: f64,
    /// Visible pixels; `None` falls back to the amodal box.
    pub footprint: Option<PixelMask>,
}

/// One annotated object instance in an image.
#[derive(Debug, Clone)]
pub struct InstanceAnnotation {
    pub class_id: usize,
    /// Amodal box `[x1, y1, x2, y2]` in pixels.
    pub bbox: [f64; 4],
    pub visibility: VisibilityInfo,
    /// Egocentric pose.
    pub pose: Pose,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingTarget {
    pub location: FeatureLocation,
    pub class_id: usize,
    /// Amodal box `[x1, y1, x2, y2]`, pixels.
    pub bbox: [f64; 4],
    /// Standardized corner offsets.
    pub y_g: [f64; 16],
    /// Allocentric rotation, first two columns.
    pub rot6d: [f64; 6],
    /// Meters.
    pub translation: [f64; 3],
    /// Projected diameter used for standardization.
    pub delta_px: f64,
    pub use_for_cls: bool,
    pub use_for_reg: bool,
}

#[derive(Debug, Clone, Default)]
pub struct SampledTargets {
    pub level: usize,
    pub targets: Vec<TrainingTarget>,
    /// The amodal box stood in for a missing visible mask.
    pub used_box_fallback: bool,
}

/// True training locations of one instance: all cells of the assigned level
/// whose center pixel lies in the visible footprint.
pub fn sample_true_locations(
    instance: &InstanceAnnotation,
    spec: &PyramidSpec,
    model: &ObjectModel,
    cam: &CameraIntrinsics,
) -> Result<SampledTargets> {
    let t = &instance.pose.translation;
    let level = assign_level(model.diameter, t.z, spec)?;
    let vf = instance.visibility.visible_fraction;
    let used_box_fallback = instance.visibility.footprint.is_none();
    let mut out = SampledTargets {
        level,
        targets: Vec::new(),
        used_box_fallback,
    };
    if vf < CLS_VISIBILITY_MIN {
        return Ok(out);
    }
    let use_for_reg = vf >= REG_VISIBILITY_MIN;

    let corners_px: [Point2; 8] = project(&model.cuboid, &instance.pose, cam)?
        .try_into()
        .expect("cuboid has 8 corners");
    let delta_px = projected_diameter_px(model.diameter, t.z, cam)?;
    let allo = egocentric_to_allocentric(&instance.pose)?;
    let rot6d = matrix_to_rot6d(&allo.rotation).to_array();

    let stride = spec.strides[level] as f64;
    let (rows, cols) = spec.grid_shape(level, cam);
    let inside = |cx: f64, cy: f64| -> bool {
        match &instance.visibility.footprint {
            Some(mask) => mask.contains(cx.floor() as u32, cy.floor() as u32),
            None => {
                let b = &instance.bbox;
                cx >= b[0] && cx < b[2] && cy >= b[1] && cy < b[3]
            }
        }
    };
    // Only scan cells that can intersect the footprint.
    let [bx0, by0, bx1, by1] = match &instance.visibility.footprint {
        Some(mask) => mask.bounds().map(|v| v as f64),
        None => instance.bbox,
    };
    let col_lo = ((bx0 / stride - 0.5).floor().max(0.0)) as u32;
    let row_lo = ((by0 / stride - 0.5).floor().max(0.0)) as u32;
    let col_hi = (((bx1 / stride).ceil()).max(0.0) as u32).min(cols);
    let row_hi = (((by1 / stride).ceil()).max(0.0) as u32).min(rows);
    for row in row_lo..row_hi {
        for col in col_lo..col_hi {
            let loc = FeatureLocation::new(spec, level, row, col);
            if !inside(loc.center[0], loc.center[1]) {
                continue;
            }
            let y_g = standardize(&corners_px, &loc.center_point(), delta_px)?;
            out.targets.push(TrainingTarget {
                location: loc,
                class_id: instance.class_id,
                bbox: instance.bbox,
                y_g,
                rot6d,
                translation: [t.x, t.y, t.z],
                delta_px,
                use_for_cls: true,
                use_for_reg,
            });
        }
    }
    Ok(out)
}
