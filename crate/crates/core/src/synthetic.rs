//! A small deterministic KITTI-style frame: two cars, one DontCare region,
//! ground and clutter returns, and a multi-channel image feature map.

use std::fs;
use std::path::Path;

use nalgebra::{Matrix3, Matrix3x4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::kitti_io::{decode_velodyne, encode_velodyne, write_calib, write_feature_map, write_labels, CalibrationSet};
use crate::projection::{box_corners, camera_to_lidar, project_camera_point, ImageSize};
use crate::types::{Box3D, FeatureMap, ObjectClass, Point3, PointCloud};

pub const VELODYNE_FILE: &str = "velodyne.bin";
pub const CALIB_FILE: &str = "calib.txt";
pub const LABEL_FILE: &str = "label.txt";
pub const FEATURES_FILE: &str = "features.pacf";

pub const IMAGE_HEIGHT: usize = 64;
pub const IMAGE_WIDTH: usize = 192;
pub const FEATURE_CHANNELS: usize = 4;

const POINTS_PER_BOX: usize = 350;
const GROUND_POINTS: usize = 2400;
const CLUTTER_POINTS: usize = 600;
const INSET: f64 = 0.05;

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticFrame {
    pub cloud: PointCloud,
    pub calib: CalibrationSet,
    pub boxes: Vec<Box3D>,
    pub features: FeatureMap,
}

impl SyntheticFrame {
    pub fn image_size(&self) -> ImageSize {
        ImageSize::new(IMAGE_HEIGHT, IMAGE_WIDTH)
    }

    /// Writes the four frame files into `dir`, creating it if needed.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        fs::write(dir.join(VELODYNE_FILE), encode_velodyne(&self.cloud))?;
        write_calib(&self.calib, dir.join(CALIB_FILE))?;
        write_labels(&self.boxes, dir.join(LABEL_FILE))?;
        write_feature_map(&self.features, dir.join(FEATURES_FILE))
    }
}

pub fn synthetic_calib() -> CalibrationSet {
    let p2 = Matrix3x4::new(110.0, 0.0, 96.0, 0.0, 0.0, 110.0, 32.0, 0.0, 0.0, 0.0, 1.0, 0.0);
    let (s, c) = 0.01f64.sin_cos();
    let r0 = Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c);
    let tr = Matrix3x4::new(0.0, -1.0, 0.0, 0.0, 0.0, 0.0, -1.0, -0.08, 1.0, 0.0, 0.0, -0.27);
    CalibrationSet::new(p2, r0, tr).expect("synthetic calibration is orthonormal")
}

fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

fn car(center: [f64; 3], h: f64, w: f64, l: f64, ry: f64, calib: &CalibrationSet) -> Result<Box3D> {
    let mut b = Box3D::new(ObjectClass::Car, center, h, w, l, ry)?;
    let size = ImageSize::new(IMAGE_HEIGHT, IMAGE_WIDTH);
    let (mut left, mut top, mut right, mut bottom) =
        (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for corner in box_corners(&b) {
        let px = project_camera_point(&corner, calib, size);
        left = left.min(px.u);
        right = right.max(px.u);
        top = top.min(px.v);
        bottom = bottom.max(px.v);
    }
    b.bbox2d = [round2(left), round2(top), round2(right), round2(bottom)];
    b.alpha = round2(ry - center[0].atan2(center[2]));
    Ok(b)
}

fn dont_care(bbox2d: [f64; 4]) -> Box3D {
    Box3D {
        class: ObjectClass::DontCare,
        truncation: -1.0,
        occlusion: -1,
        alpha: -10.0,
        bbox2d,
        h: -1.0,
        w: -1.0,
        l: -1.0,
        center: [-1000.0, -1000.0, -1000.0],
        ry: -10.0,
    }
}

fn box_interior(b: &Box3D, rng: &mut ChaCha8Rng) -> Point3 {
    let ol = rng.gen_range(-b.l / 2.0 + INSET..b.l / 2.0 - INSET);
    let ow = rng.gen_range(-b.w / 2.0 + INSET..b.w / 2.0 - INSET);
    let oy = rng.gen_range(-b.h + INSET..-INSET);
    let (s, c) = b.ry.sin_cos();
    Point3 {
        x: b.center[0] + c * ol + s * ow,
        y: b.center[1] + oy,
        z: b.center[2] - s * ol + c * ow,
    }
}

fn feature_map() -> FeatureMap {
    let mut data = Vec::with_capacity(IMAGE_HEIGHT * IMAGE_WIDTH * FEATURE_CHANNELS);
    for r in 0..IMAGE_HEIGHT {
        for c in 0..IMAGE_WIDTH {
            let (rf, cf) = (r as f64, c as f64);
            data.push((0.5 + 0.5 * (0.07 * cf + 0.11 * rf).sin()) as f32);
            data.push((rf / (IMAGE_HEIGHT - 1) as f64) as f32);
            data.push((cf / (IMAGE_WIDTH - 1) as f64) as f32);
            data.push(((0.05 * cf).cos() * (0.2 * rf).cos()) as f32);
        }
    }
    FeatureMap::new(IMAGE_HEIGHT, IMAGE_WIDTH, FEATURE_CHANNELS, data).expect("feature map shape")
}

/// Builds the frame for `seed`. Coordinates are quantized to `f32` so the
/// in-memory cloud equals what is written to disk.
pub fn synthetic_frame(seed: u64) -> Result<SyntheticFrame> {
    let calib = synthetic_calib();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let boxes = vec![
        car([-2.0, 0.9, 15.0], 1.5, 1.6, 3.9, 0.3, &calib)?,
        car([4.0, 0.9, 24.0], 1.6, 1.7, 4.2, -1.2, &calib)?,
        dont_care([150.0, 20.0, 180.0, 40.0]),
    ];

    let mut points = Vec::with_capacity(2 * POINTS_PER_BOX + GROUND_POINTS + CLUTTER_POINTS);
    for b in boxes.iter().filter(|b| !b.is_dont_care()) {
        for _ in 0..POINTS_PER_BOX {
            points.push(camera_to_lidar(&box_interior(b, &mut rng), &calib)?);
        }
    }
    for _ in 0..GROUND_POINTS {
        points.push(Point3 {
            x: rng.gen_range(2.0..65.0),
            y: rng.gen_range(-30.0..30.0),
            z: rng.gen_range(-0.97..-0.93),
        });
    }
    for _ in 0..CLUTTER_POINTS {
        points.push(Point3 {
            x: rng.gen_range(-10.0..75.0),
            y: rng.gen_range(-45.0..45.0),
            z: rng.gen_range(-1.5..3.5),
        });
    }
    let reflectance = (0..points.len()).map(|_| rng.gen_range(0.0..1.0)).collect();
    let cloud = PointCloud::new(points, reflectance, None)?;
    let cloud = decode_velodyne(&encode_velodyne(&cloud))?;

    Ok(SyntheticFrame {
        cloud,
        calib,
        boxes,
        features: feature_map(),
    })
}
