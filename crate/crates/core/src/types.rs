//! Domain types shared by every stage of the fusion pipeline.
//!
//! All types validate their invariants at construction and are immutable
//! afterwards, so they can be shared freely across worker threads.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// A 3D point in meters. In the LIDAR frame x points forward, y left and z up.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point3 {
    pub fn new(x: f64, y: f64, z: f64) -> Result<Self> {
        let p = Point3 { x, y, z };
        if !p.is_finite() {
            return Err(Error::InvalidValue(format!("non-finite point ({x}, {y}, {z})")));
        }
        Ok(p)
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn coord(&self, axis: usize) -> f64 {
        match axis {
            0 => self.x,
            1 => self.y,
            _ => self.z,
        }
    }

    pub fn sub(&self, other: &Point3) -> Point3 {
        Point3 {
            x: self.x - other.x,
            y: self.y - other.y,
            z: self.z - other.z,
        }
    }

    pub fn squared_distance(&self, other: &Point3) -> f64 {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        let dz = self.z - other.z;
        dx * dx + dy * dy + dz * dz
    }

    pub fn to_array(&self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }
}

impl From<[f64; 3]> for Point3 {
    fn from(a: [f64; 3]) -> Self {
        Point3 {
            x: a[0],
            y: a[1],
            z: a[2],
        }
    }
}

/// Row-major table with a fixed row width. A width of zero is legal and
/// describes "no per-point features".
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FeatureRows {
    width: usize,
    data: Vec<f64>,
}

impl FeatureRows {
    pub fn new(width: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 && !data.is_empty() {
            return Err(Error::InvalidDimension(
                "zero-width feature rows cannot carry data".into(),
            ));
        }
        if width > 0 && !data.len().is_multiple_of(width) {
            return Err(Error::InvalidDimension(format!(
                "feature data length {} is not a multiple of row width {width}",
                data.len()
            )));
        }
        if let Some(bad) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidValue(format!("non-finite feature value at {bad}")));
        }
        Ok(FeatureRows { width, data })
    }

    /// Zero-width rows.
    pub fn empty() -> Self {
        FeatureRows::default()
    }

    pub fn zeros(rows: usize, width: usize) -> Self {
        FeatureRows {
            width,
            data: vec![0.0; rows * width],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Number of rows, or `None` when the width is zero and the row count is
    /// therefore not recoverable from the data.
    pub fn rows(&self) -> Option<usize> {
        (self.width > 0).then(|| self.data.len() / self.width)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.width..(i + 1) * self.width]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }
}

/// Ordered LIDAR points with per-point reflectance and optional feature rows.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    points: Vec<Point3>,
    reflectance: Vec<f64>,
    features: Option<FeatureRows>,
}

impl PointCloud {
    pub fn new(points: Vec<Point3>, reflectance: Vec<f64>, features: Option<FeatureRows>) -> Result<Self> {
        if reflectance.len() != points.len() {
            return Err(Error::ShapeMismatch {
                dim: "reflectance length",
                expected: points.len(),
                found: reflectance.len(),
            });
        }
        if let Some(i) = points.iter().position(|p| !p.is_finite()) {
            return Err(Error::InvalidValue(format!("point {i} is not finite")));
        }
        if let Some(i) = reflectance.iter().position(|r| !(0.0..=1.0).contains(r)) {
            return Err(Error::InvalidValue(format!(
                "reflectance {} of point {i} is outside [0, 1]",
                reflectance[i]
            )));
        }
        if let Some(f) = &features {
            if let Some(rows) = f.rows() {
                if rows != points.len() {
                    return Err(Error::ShapeMismatch {
                        dim: "feature rows",
                        expected: points.len(),
                        found: rows,
                    });
                }
            }
        }
        Ok(PointCloud {
            points,
            reflectance,
            features,
        })
    }

    /// Cloud with zero reflectance and no features.
    pub fn from_points(points: Vec<Point3>) -> Result<Self> {
        let n = points.len();
        PointCloud::new(points, vec![0.0; n], None)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    pub fn reflectance(&self) -> &[f64] {
        &self.reflectance
    }

    pub fn features(&self) -> Option<&FeatureRows> {
        self.features.as_ref()
    }

    /// Width of the per-point feature rows, zero without features.
    pub fn feature_width(&self) -> usize {
        self.features.as_ref().map_or(0, FeatureRows::width)
    }

    /// Per-point LIDAR feature rows used for fusion. With `include_reflectance`
    /// the reflectance is appended as one extra column.
    pub fn lidar_features(&self, include_reflectance: bool) -> FeatureRows {
        let base = self.feature_width();
        let width = base + usize::from(include_reflectance);
        let mut data = Vec::with_capacity(self.len() * width);
        for i in 0..self.len() {
            if let Some(f) = &self.features {
                data.extend_from_slice(f.row(i));
            }
            if include_reflectance {
                data.push(self.reflectance[i]);
            }
        }
        FeatureRows { width, data }
    }

    /// New cloud made of the given point indices, in order. Indices may repeat.
    pub fn select(&self, indices: &[usize]) -> PointCloud {
        let points = indices.iter().map(|&i| self.points[i]).collect();
        let reflectance = indices.iter().map(|&i| self.reflectance[i]).collect();
        let features = self.features.as_ref().map(|f| {
            let mut data = Vec::with_capacity(indices.len() * f.width());
            for &i in indices {
                data.extend_from_slice(f.row(i));
            }
            FeatureRows { width: f.width(), data }
        });
        PointCloud {
            points,
            reflectance,
            features,
        }
    }

    /// Same points and reflectance with the feature rows replaced.
    pub fn with_features(&self, features: FeatureRows) -> Result<PointCloud> {
        PointCloud::new(self.points.clone(), self.reflectance.clone(), Some(features))
    }
}

/// Dense image-plane feature grid, row-major with channels innermost.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl FeatureMap {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if channels == 0 {
            return Err(Error::InvalidDimension("feature map needs at least one channel".into()));
        }
        let expected = height
            .checked_mul(width)
            .and_then(|v| v.checked_mul(channels))
            .ok_or_else(|| Error::InvalidDimension("feature map size overflows".into()))?;
        if data.len() != expected {
            return Err(Error::ShapeMismatch {
                dim: "feature map data length",
                expected,
                found: data.len(),
            });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidValue(format!("non-finite feature map value at {i}")));
        }
        Ok(FeatureMap {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Result<Self> {
        FeatureMap::new(height, width, channels, vec![0.0; height * width * channels])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Channel vector at (row, col).
    pub fn pixel(&self, row: usize, col: usize) -> &[f32] {
        let start = (row * self.width + col) * self.channels;
        &self.data[start..start + self.channels]
    }
}

/// Channel bookkeeping for the fusion operator.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FusionDims {
    pub c_seg: usize,
    pub c_lidar: usize,
    /// Per-neighbor input width: semantic channels, LIDAR channels and the 3D offset.
    pub d_i: usize,
    pub d_o: usize,
}

impl FusionDims {
    /// Width of the fused output `[y_cc | y_a | y_pool]`.
    pub fn output_width(&self) -> usize {
        2 * self.d_o + self.d_i
    }
}

pub fn fusion_dims(c_seg: usize, c_lidar: usize, d_o: usize) -> Result<FusionDims> {
    if c_seg == 0 {
        return Err(Error::InvalidDimension("c_seg must be at least 1".into()));
    }
    if d_o == 0 {
        return Err(Error::InvalidDimension("d_o must be at least 1".into()));
    }
    Ok(FusionDims {
        c_seg,
        c_lidar,
        d_i: c_seg + c_lidar + 3,
        d_o,
    })
}

/// KITTI object classes.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum ObjectClass {
    Car,
    Van,
    Truck,
    Pedestrian,
    PersonSitting,
    Cyclist,
    Tram,
    Misc,
    DontCare,
    Other(String),
}

impl ObjectClass {
    pub fn as_str(&self) -> &str {
        match self {
            ObjectClass::Car => "Car",
            ObjectClass::Van => "Van",
            ObjectClass::Truck => "Truck",
            ObjectClass::Pedestrian => "Pedestrian",
            ObjectClass::PersonSitting => "Person_sitting",
            ObjectClass::Cyclist => "Cyclist",
            ObjectClass::Tram => "Tram",
            ObjectClass::Misc => "Misc",
            ObjectClass::DontCare => "DontCare",
            ObjectClass::Other(s) => s,
        }
    }
}

impl ObjectClass {
    pub fn from_name(s: &str) -> Self {
        match s {
            "Car" => ObjectClass::Car,
            "Van" => ObjectClass::Van,
            "Truck" => ObjectClass::Truck,
            "Pedestrian" => ObjectClass::Pedestrian,
            "Person_sitting" => ObjectClass::PersonSitting,
            "Cyclist" => ObjectClass::Cyclist,
            "Tram" => ObjectClass::Tram,
            "Misc" => ObjectClass::Misc,
            "DontCare" => ObjectClass::DontCare,
            other => ObjectClass::Other(other.to_string()),
        }
    }
}

impl FromStr for ObjectClass {
    type Err = std::convert::Infallible;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Ok(ObjectClass::from_name(s))
    }
}

impl fmt::Display for ObjectClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Oriented 3D box in the rectified camera frame, KITTI label convention:
/// `center` is the bottom-face center, the box spans `[y - h, y]` vertically,
/// `l` runs along the object x axis and `w` along its z axis before the yaw
/// `ry` about camera Y is applied.
#[derive(Clone, Debug, PartialEq)]
pub struct Box3D {
    pub class: ObjectClass,
    pub truncation: f64,
    pub occlusion: i32,
    pub alpha: f64,
    /// Image-plane box `[left, top, right, bottom]` in pixels.
    pub bbox2d: [f64; 4],
    pub h: f64,
    pub w: f64,
    pub l: f64,
    pub center: [f64; 3],
    pub ry: f64,
}

impl Box3D {
    /// Object box with zeroed 2D annotation fields.
    pub fn new(class: ObjectClass, center: [f64; 3], h: f64, w: f64, l: f64, ry: f64) -> Result<Self> {
        let b = Box3D {
            class,
            truncation: 0.0,
            occlusion: 0,
            alpha: 0.0,
            bbox2d: [0.0; 4],
            h,
            w,
            l,
            center,
            ry,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn is_dont_care(&self) -> bool {
        self.class == ObjectClass::DontCare
    }

    /// DontCare regions carry placeholder geometry in KITTI files and are
    /// exempt from the size and yaw checks.
    pub fn validate(&self) -> Result<()> {
        if self.is_dont_care() {
            return Ok(());
        }
        if !(self.h > 0.0 && self.w > 0.0 && self.l > 0.0) {
            return Err(Error::InvalidValue(format!(
                "box dimensions must be positive, got h={} w={} l={}",
                self.h, self.w, self.l
            )));
        }
        if !(-PI..=PI).contains(&self.ry) {
            return Err(Error::InvalidValue(format!("yaw {} outside [-pi, pi]", self.ry)));
        }
        if !self.center.iter().all(|c| c.is_finite()) {
            return Err(Error::InvalidValue("box center is not finite".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fusion_dims_examples() {
        let d = fusion_dims(4, 128, 64).unwrap();
        assert_eq!((d.d_i, d.output_width()), (135, 263));
        let d = fusion_dims(1, 0, 1).unwrap();
        assert_eq!((d.d_i, d.output_width()), (4, 6));
        let d = fusion_dims(2, 2, 3).unwrap();
        assert_eq!((d.d_i, d.output_width()), (7, 13));
    }

    #[test]
    fn fusion_dims_rejects_zero() {
        assert!(matches!(fusion_dims(0, 3, 4), Err(Error::InvalidDimension(_))));
        assert!(matches!(fusion_dims(3, 3, 0), Err(Error::InvalidDimension(_))));
    }

    #[test]
    fn point_rejects_nan() {
        assert!(Point3::new(f64::NAN, 0.0, 0.0).is_err());
        assert!(Point3::new(0.0, f64::INFINITY, 0.0).is_err());
    }

    #[test]
    fn cloud_shape_checks() {
        let pts = vec![Point3::default(); 2];
        assert!(PointCloud::new(pts.clone(), vec![0.0], None).is_err());
        assert!(PointCloud::new(pts.clone(), vec![0.0, 1.5], None).is_err());
        let f = FeatureRows::new(2, vec![1.0; 6]).unwrap();
        assert!(PointCloud::new(pts.clone(), vec![0.0; 2], Some(f)).is_err());
        let f = FeatureRows::new(2, vec![1.0; 4]).unwrap();
        let c = PointCloud::new(pts, vec![0.25, 0.5], Some(f)).unwrap();
        assert_eq!(c.feature_width(), 2);
        assert_eq!(c.lidar_features(true).row(1), &[1.0, 1.0, 0.5]);
    }

    #[test]
    fn select_repeats_rows() {
        let pts = vec![Point3::new(1.0, 0.0, 0.0).unwrap(), Point3::new(2.0, 0.0, 0.0).unwrap()];
        let f = FeatureRows::new(1, vec![10.0, 20.0]).unwrap();
        let c = PointCloud::new(pts, vec![0.1, 0.2], Some(f)).unwrap();
        let s = c.select(&[1, 1, 0]);
        assert_eq!(s.len(), 3);
        assert_eq!(s.features().unwrap().data(), &[20.0, 20.0, 10.0]);
        assert_eq!(s.reflectance(), &[0.2, 0.2, 0.1]);
    }

    #[test]
    fn feature_map_checks_length() {
        assert!(FeatureMap::new(2, 2, 1, vec![0.0; 3]).is_err());
        assert!(FeatureMap::new(2, 2, 0, vec![]).is_err());
        let m = FeatureMap::new(2, 2, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(m.pixel(1, 0), &[3.0]);
    }

    #[test]
    fn box_validation() {
        assert!(Box3D::new(ObjectClass::Car, [0.0; 3], 1.0, 1.0, 0.0, 0.0).is_err());
        assert!(Box3D::new(ObjectClass::Car, [0.0; 3], 1.0, 1.0, 1.0, 4.0).is_err());
        assert!(Box3D::new(ObjectClass::Car, [0.0; 3], 1.0, 1.0, 1.0, -PI).is_ok());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn offset_slot_is_three(c_seg in 1usize..512, c_lidar in 0usize..512, d_o in 1usize..512) {
                let d = fusion_dims(c_seg, c_lidar, d_o).unwrap();
                prop_assert_eq!(d.d_i - c_seg - c_lidar, 3);
                prop_assert_eq!(d.output_width(), 2 * d_o + d.d_i);
                prop_assert!(fusion_dims(c_seg + 1, c_lidar, d_o).unwrap().output_width() > d.output_width());
                prop_assert!(fusion_dims(c_seg, c_lidar + 1, d_o).unwrap().output_width() > d.output_width());
                prop_assert!(fusion_dims(c_seg, c_lidar, d_o + 1).unwrap().output_width() > d.output_width());
            }
        }
    }
}
