//! Frame-level data types shared by every stage: calibration, images,
//! point clouds, depth maps, per-pixel features and label maps.

use nalgebra::{Matrix3, Point3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Semantic categories, in legend order. Numeric ids run 1..=9.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Category {
    Road,
    Sky,
    Vehicle,
    Cyclist,
    Pedestrian,
    Sitter,
    Pole,
    Greenbelt,
    Roadside,
}

impl Category {
    pub const COUNT: usize = 9;

    pub const ALL: [Category; 9] = [
        Category::Road,
        Category::Sky,
        Category::Vehicle,
        Category::Cyclist,
        Category::Pedestrian,
        Category::Sitter,
        Category::Pole,
        Category::Greenbelt,
        Category::Roadside,
    ];

    /// The seven classes recognized by the patch classifier.
    pub const RECOGNIZED: [Category; 7] = [
        Category::Vehicle,
        Category::Cyclist,
        Category::Pedestrian,
        Category::Sitter,
        Category::Pole,
        Category::Greenbelt,
        Category::Roadside,
    ];

    /// Zero-based position in [`Category::ALL`].
    pub fn index(self) -> usize {
        self as usize
    }

    /// One-based category id used in label images and reports.
    pub fn id(self) -> u16 {
        self as u16 + 1
    }

    pub fn from_index(index: usize) -> Option<Category> {
        Self::ALL.get(index).copied()
    }

    pub fn from_id(id: u16) -> Option<Category> {
        id.checked_sub(1).and_then(|i| Self::from_index(i as usize))
    }

    /// Position among the classifier outputs, `None` for Road and Sky.
    pub fn recognized_index(self) -> Option<usize> {
        Self::RECOGNIZED.iter().position(|&c| c == self)
    }

    pub fn name(self) -> &'static str {
        match self {
            Category::Road => "Road",
            Category::Sky => "Sky",
            Category::Vehicle => "Vehicle",
            Category::Cyclist => "Cyclist",
            Category::Pedestrian => "Pedestrian",
            Category::Sitter => "Sitter",
            Category::Pole => "Pole",
            Category::Greenbelt => "Greenbelt",
            Category::Roadside => "Roadside",
        }
    }

    pub fn from_name(name: &str) -> Option<Category> {
        Self::ALL
            .iter()
            .copied()
            .find(|c| c.name().eq_ignore_ascii_case(name.trim()))
    }

    /// Fixed overlay color for the category legend.
    pub fn color(self) -> [u8; 3] {
        match self {
            Category::Road => [128, 64, 128],
            Category::Sky => [70, 130, 180],
            Category::Vehicle => [0, 0, 142],
            Category::Cyclist => [119, 11, 32],
            Category::Pedestrian => [220, 20, 60],
            Category::Sitter => [255, 170, 0],
            Category::Pole => [153, 153, 153],
            Category::Greenbelt => [107, 142, 35],
            Category::Roadside => [190, 153, 153],
        }
    }
}

/// Pinhole intrinsics plus the rigid lidar-to-camera transform.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraCalibration {
    pub intrinsic: Matrix3<f64>,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl CameraCalibration {
    pub fn new(intrinsic: Matrix3<f64>, rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            intrinsic,
            rotation,
            translation,
        }
    }

    /// Checks positive focal lengths, an upper-triangular intrinsic matrix
    /// and an orthonormal rotation.
    pub fn validate(&self) -> Result<()> {
        let k = &self.intrinsic;
        if !(k[(0, 0)] > 0.0 && k[(1, 1)] > 0.0) {
            return Err(Error::InvalidCalibration("focal lengths must be positive".into()));
        }
        if k[(1, 0)] != 0.0 || k[(2, 0)] != 0.0 || k[(2, 1)] != 0.0 {
            return Err(Error::InvalidCalibration(
                "intrinsic matrix must be upper triangular".into(),
            ));
        }
        if (k[(2, 2)] - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidCalibration("intrinsic K[2][2] must be 1".into()));
        }
        let rrt = self.rotation * self.rotation.transpose();
        if (rrt - Matrix3::identity()).abs().max() > 1e-6 {
            return Err(Error::InvalidCalibration("rotation is not orthonormal".into()));
        }
        if self.intrinsic.iter().chain(self.translation.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidCalibration("non-finite entries".into()));
        }
        Ok(())
    }

    pub fn fx(&self) -> f64 {
        self.intrinsic[(0, 0)]
    }

    pub fn fy(&self) -> f64 {
        self.intrinsic[(1, 1)]
    }

    pub fn principal_point(&self) -> (f64, f64) {
        (self.intrinsic[(0, 2)], self.intrinsic[(1, 2)])
    }

    /// Lidar frame to camera frame.
    pub fn to_camera(&self, p: &Point3<f64>) -> Point3<f64> {
        Point3::from(self.rotation * p.coords + self.translation)
    }

    /// Camera frame back to the lidar frame.
    pub fn to_lidar(&self, p: &Point3<f64>) -> Point3<f64> {
        Point3::from(self.rotation.transpose() * (p.coords - self.translation))
    }

    /// Projects a camera-frame point to continuous pixel coordinates.
    /// Returns `None` for points at or behind the image plane.
    pub fn project_camera(&self, p: &Point3<f64>) -> Option<(f64, f64)> {
        if p.z <= 0.0 {
            return None;
        }
        let q = self.intrinsic * p.coords;
        Some((q.x / q.z, q.y / q.z))
    }

    /// Back-projects pixel `(u, v)` at camera depth `z`.
    pub fn back_project(&self, u: f64, v: f64, z: f64) -> Point3<f64> {
        let (cx, cy) = self.principal_point();
        let skew = self.intrinsic[(0, 1)];
        let y = (v - cy) / self.fy();
        let x = (u - cx - skew * y) / self.fx();
        Point3::new(x * z, y * z, z)
    }
}

/// 8-bit RGB image stored row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ColorImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<[u8; 3]>,
}

impl ColorImage {
    pub fn new(width: usize, height: usize, pixels: Vec<[u8; 3]>) -> Result<Self> {
        if width * height == 0 || pixels.len() != width * height {
            return Err(Error::Shape(format!(
                "image {}x{} with {} pixels",
                width,
                height,
                pixels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        Self {
            width,
            height,
            pixels: vec![rgb; width * height],
        }
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        self.pixels[y * self.width + x]
    }
}

/// Lidar returns in the sensor frame, meters. A point's source index is
/// its position in `points`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point3<f64>>,
}

impl PointCloud {
    pub fn new(points: Vec<Point3<f64>>) -> Self {
        Self { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.points
            .iter()
            .all(|p| p.x.is_finite() && p.y.is_finite() && p.z.is_finite())
    }
}

/// Where a depth value came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DepthSource {
    Missing,
    Seed,
    Interpolated,
}

/// Per-pixel camera depth in meters.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub depth: Vec<f64>,
    pub source: Vec<DepthSource>,
}

impl DepthMap {
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            depth: vec![0.0; width * height],
            source: vec![DepthSource::Missing; width * height],
        }
    }

    pub fn is_valid(&self, i: usize) -> bool {
        self.source[i] != DepthSource::Missing
    }

    pub fn valid_count(&self) -> usize {
        self.source.iter().filter(|s| **s != DepthSource::Missing).count()
    }

    pub fn is_dense(&self) -> bool {
        self.source.iter().all(|s| *s != DepthSource::Missing)
    }
}

/// Affine map from meters to the `[0, 255]` feature range for one axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AxisScaling {
    pub min: f64,
    pub max: f64,
}

impl AxisScaling {
    pub fn apply(&self, v: f64) -> f64 {
        if self.max > self.min {
            ((v - self.min) / (self.max - self.min) * 255.0).clamp(0.0, 255.0)
        } else {
            127.5
        }
    }
}

/// Per-pixel `(R, G, B, X, Y, Z)` with every channel in `[0, 255]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureImage {
    pub width: usize,
    pub height: usize,
    pub features: Vec<[f64; 6]>,
    /// Meters-to-feature mapping used for X, Y, Z.
    pub scaling: [AxisScaling; 3],
}

impl FeatureImage {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn rgb(&self, i: usize) -> [f64; 3] {
        let f = &self.features[i];
        [f[0], f[1], f[2]]
    }
}

/// Object-instance and category label per pixel.
///
/// Object label 0 is the ground and `num_objects + 1` the sky.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMaps {
    pub width: usize,
    pub height: usize,
    pub num_objects: usize,
    pub objects: Vec<u16>,
    pub categories: Vec<Category>,
}

impl LabelMaps {
    pub fn sky_label(&self) -> u16 {
        (self.num_objects + 1) as u16
    }

    pub fn len(&self) -> usize {
        self.objects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.objects.is_empty()
    }

    pub fn category_ids(&self) -> Vec<u16> {
        self.categories.iter().map(|c| c.id()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn calib() -> CameraCalibration {
        CameraCalibration::new(
            Matrix3::new(100.0, 0.0, 50.0, 0.0, 100.0, 20.0, 0.0, 0.0, 1.0),
            Matrix3::identity(),
            Vector3::zeros(),
        )
    }

    #[test]
    fn category_ids_follow_legend_order() {
        assert_eq!(Category::Road.id(), 1);
        assert_eq!(Category::Roadside.id(), 9);
        for c in Category::ALL {
            assert_eq!(Category::from_id(c.id()), Some(c));
            assert_eq!(Category::from_name(c.name()), Some(c));
        }
        assert_eq!(Category::Road.recognized_index(), None);
        assert_eq!(Category::Vehicle.recognized_index(), Some(0));
        assert_eq!(Category::Roadside.recognized_index(), Some(6));
    }

    #[test]
    fn calibration_validation() {
        assert!(calib().validate().is_ok());
        let mut bad = calib();
        bad.intrinsic[(0, 0)] = -1.0;
        assert!(bad.validate().is_err());
        let mut bad = calib();
        bad.intrinsic[(2, 0)] = 0.5;
        assert!(bad.validate().is_err());
        let mut bad = calib();
        bad.rotation[(0, 1)] = 0.1;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn back_projection_inverts_projection() {
        let c = calib();
        let p = Point3::new(1.5, -0.5, 12.0);
        let (u, v) = c.project_camera(&p).unwrap();
        let q = c.back_project(u, v, 12.0);
        assert!((p - q).norm() < 1e-12);
        assert!(c.project_camera(&Point3::new(0.0, 0.0, -1.0)).is_none());
    }

    #[test]
    fn axis_scaling_degenerate_range() {
        let s = AxisScaling { min: 2.0, max: 2.0 };
        assert_eq!(s.apply(2.0), 127.5);
        let s = AxisScaling { min: -20.0, max: 20.0 };
        assert_eq!(s.apply(0.0), 127.5);
    }
}
