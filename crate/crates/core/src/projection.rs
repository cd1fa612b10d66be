//! Geometry between the LIDAR and image frames: projection onto the image
//! plane, region-of-interest filtering, seeded subsampling and point-in-box
//! tests for KITTI labels.
//!
//! The preprocessing order used by the pipeline is: region filter, then
//! camera-frustum validity, then subsampling.

use nalgebra::{Matrix3, Vector3, Vector4};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kitti_io::CalibrationSet;
use crate::types::{Box3D, Point3, PointCloud};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ImageSize {
    pub height: usize,
    pub width: usize,
}

impl ImageSize {
    pub fn new(height: usize, width: usize) -> Self {
        ImageSize { height, width }
    }

    pub fn contains(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && v >= 0.0 && u < self.width as f64 && v < self.height as f64
    }

    /// Pixel `(row, col)` hit by continuous coordinates, rounding halves down.
    /// Coordinates must be inside the image.
    pub fn pixel_of(&self, u: f64, v: f64) -> (usize, usize) {
        let col = (round_half_down(u).max(0.0) as usize).min(self.width.saturating_sub(1));
        let row = (round_half_down(v).max(0.0) as usize).min(self.height.saturating_sub(1));
        (row, col)
    }
}

/// Nearest integer with ties going toward negative infinity.
pub fn round_half_down(x: f64) -> f64 {
    (x - 0.5).ceil()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PixelCoord {
    pub u: f64,
    pub v: f64,
    /// Rectified-camera depth in meters.
    pub depth: f64,
    pub valid: bool,
}

/// Rectified camera frame coordinates of a LIDAR point: `R0_rect * Tr_velo_to_cam * [p; 1]`.
pub fn lidar_to_camera(p: &Point3, calib: &CalibrationSet) -> Point3 {
    let velo = Vector4::new(p.x, p.y, p.z, 1.0);
    let cam = calib.r0_rect * (calib.tr_velo_to_cam * velo);
    Point3 {
        x: cam.x,
        y: cam.y,
        z: cam.z,
    }
}

/// Inverse of [`lidar_to_camera`].
pub fn camera_to_lidar(p: &Point3, calib: &CalibrationSet) -> Result<Point3> {
    let r0_inv = calib
        .r0_rect
        .try_inverse()
        .ok_or_else(|| Error::InvalidValue("R0_rect is singular".into()))?;
    let rot: Matrix3<f64> = calib.tr_velo_to_cam.fixed_view::<3, 3>(0, 0).into_owned();
    let t: Vector3<f64> = calib.tr_velo_to_cam.column(3).into_owned();
    let rot_inv = rot
        .try_inverse()
        .ok_or_else(|| Error::InvalidValue("Tr_velo_to_cam rotation is singular".into()))?;
    let velo = rot_inv * (r0_inv * Vector3::new(p.x, p.y, p.z) - t);
    Ok(Point3 {
        x: velo.x,
        y: velo.y,
        z: velo.z,
    })
}

/// Projects a camera-frame point with `P2`.
pub fn project_camera_point(cam: &Point3, calib: &CalibrationSet, size: ImageSize) -> PixelCoord {
    let img = calib.p2 * Vector4::new(cam.x, cam.y, cam.z, 1.0);
    let depth = img.z;
    let (u, v) = (img.x / depth, img.y / depth);
    let valid = depth > 0.0 && u.is_finite() && v.is_finite() && size.contains(u, v);
    PixelCoord { u, v, depth, valid }
}

/// Projects every point onto the image. Output is index-aligned with the cloud;
/// points behind the camera or outside the image are flagged invalid.
pub fn project_points(cloud: &PointCloud, calib: &CalibrationSet, size: ImageSize) -> Vec<PixelCoord> {
    cloud
        .points()
        .iter()
        .map(|p| project_camera_point(&lidar_to_camera(p, calib), calib, size))
        .collect()
}

/// Axis-aligned LIDAR-frame region with closed bounds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RegionOfInterest {
    pub x: (f64, f64),
    pub y: (f64, f64),
    pub z: (f64, f64),
}

impl Default for RegionOfInterest {
    fn default() -> Self {
        RegionOfInterest {
            x: (0.0, 70.4),
            y: (-40.0, 40.0),
            z: (-1.0, 3.0),
        }
    }
}

impl RegionOfInterest {
    pub fn new(x: (f64, f64), y: (f64, f64), z: (f64, f64)) -> Result<Self> {
        for (name, (lo, hi)) in [("x", x), ("y", y), ("z", z)] {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(Error::InvalidValue(format!(
                    "region bounds on {name} need min < max, got [{lo}, {hi}]"
                )));
            }
        }
        Ok(RegionOfInterest { x, y, z })
    }

    pub fn contains(&self, p: &Point3) -> bool {
        let inside = |v: f64, (lo, hi): (f64, f64)| lo <= v && v <= hi;
        inside(p.x, self.x) && inside(p.y, self.y) && inside(p.z, self.z)
    }
}

/// Points inside the region, with their indices into the input cloud.
pub fn filter_region(cloud: &PointCloud, roi: &RegionOfInterest) -> (PointCloud, Vec<usize>) {
    let kept: Vec<usize> = cloud
        .points()
        .iter()
        .enumerate()
        .filter(|(_, p)| roi.contains(p))
        .map(|(i, _)| i)
        .collect();
    (cloud.select(&kept), kept)
}

/// Points that project validly onto the image, with their indices.
pub fn filter_frustum(cloud: &PointCloud, calib: &CalibrationSet, size: ImageSize) -> (PointCloud, Vec<usize>) {
    let kept: Vec<usize> = project_points(cloud, calib, size)
        .iter()
        .enumerate()
        .filter(|(_, px)| px.valid)
        .map(|(i, _)| i)
        .collect();
    (cloud.select(&kept), kept)
}

/// Sampled point indices: without replacement (ascending) when the cloud has
/// at least `n` points, otherwise every index followed by uniform draws with
/// replacement up to `n`.
pub fn subsample_indices(count: usize, n: usize, seed: u64) -> Result<Vec<usize>> {
    if count == 0 && n > 0 {
        return Err(Error::InvalidValue("cannot subsample an empty cloud".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if count >= n {
        let mut picked = index::sample(&mut rng, count, n).into_vec();
        picked.sort_unstable();
        Ok(picked)
    } else {
        let mut picked: Vec<usize> = (0..count).collect();
        picked.extend((count..n).map(|_| rng.gen_range(0..count)));
        Ok(picked)
    }
}

pub fn subsample(cloud: &PointCloud, n: usize, seed: u64) -> Result<(PointCloud, Vec<usize>)> {
    let picked = subsample_indices(cloud.len(), n, seed)?;
    Ok((cloud.select(&picked), picked))
}

/// Whether a camera-frame point lies in the box grown by `margin` on every side.
pub fn point_in_box(p: &Point3, b: &Box3D, margin: f64) -> bool {
    let dx = p.x - b.center[0];
    let dz = p.z - b.center[2];
    let (s, c) = b.ry.sin_cos();
    // rotate by -ry about camera Y into the object frame
    let along_l = c * dx - s * dz;
    let along_w = s * dx + c * dz;
    let y = p.y;
    along_l.abs() <= b.l / 2.0 + margin
        && along_w.abs() <= b.w / 2.0 + margin
        && y >= b.center[1] - b.h - margin
        && y <= b.center[1] + margin
}

/// The eight corners of a box in the camera frame.
pub fn box_corners(b: &Box3D) -> [Point3; 8] {
    let (s, c) = b.ry.sin_cos();
    let mut out = [Point3::default(); 8];
    let mut i = 0;
    for &ol in &[-b.l / 2.0, b.l / 2.0] {
        for &ow in &[-b.w / 2.0, b.w / 2.0] {
            for &oy in &[-b.h, 0.0] {
                out[i] = Point3 {
                    x: b.center[0] + c * ol + s * ow,
                    y: b.center[1] + oy,
                    z: b.center[2] - s * ol + c * ow,
                };
                i += 1;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::ObjectClass;
    use nalgebra::Matrix3x4;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn hand_calib() -> CalibrationSet {
        let p2 = Matrix3x4::new(100.0, 0.0, 50.0, 0.0, 0.0, 100.0, 50.0, 0.0, 0.0, 0.0, 1.0, 0.0);
        let tr = Matrix3x4::new(0.0, -1.0, 0.0, 0.0, 0.0, 0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0);
        CalibrationSet::new(p2, Matrix3::identity(), tr).unwrap()
    }

    #[test]
    fn identity_projection() {
        let cloud = PointCloud::from_points(vec![Point3 { x: 0.0, y: 0.0, z: 2.0 }]).unwrap();
        let px = project_points(&cloud, &CalibrationSet::identity(), ImageSize::new(4, 4));
        assert_eq!(
            px[0],
            PixelCoord {
                u: 0.0,
                v: 0.0,
                depth: 2.0,
                valid: true
            }
        );
        let px = project_points(&cloud, &CalibrationSet::identity(), ImageSize::new(0, 0));
        assert!(!px[0].valid);
    }

    #[test]
    fn behind_camera_is_invalid() {
        let cloud = PointCloud::from_points(vec![Point3 {
            x: 0.0,
            y: 0.0,
            z: -2.0,
        }])
        .unwrap();
        let px = project_points(&cloud, &CalibrationSet::identity(), ImageSize::new(4, 4));
        assert!(!px[0].valid);
        assert_eq!(px[0].depth, -2.0);
    }

    #[test]
    fn hand_built_calibration() {
        // Hand multiplication: Tr * (2,0,0,1) = (0,0,2); P2 * (0,0,2,1) = (100, 100, 2).
        let cloud = PointCloud::from_points(vec![Point3 { x: 2.0, y: 0.0, z: 0.0 }]).unwrap();
        let px = project_points(&cloud, &hand_calib(), ImageSize::new(100, 100));
        assert_eq!((px[0].u, px[0].v, px[0].depth, px[0].valid), (50.0, 50.0, 2.0, true));
    }

    #[test]
    fn camera_round_trip() {
        let calib = hand_calib();
        let p = Point3 {
            x: 3.0,
            y: -1.5,
            z: 0.25,
        };
        let back = camera_to_lidar(&lidar_to_camera(&p, &calib), &calib).unwrap();
        assert!(p.squared_distance(&back) < 1e-24);
    }

    #[test]
    fn pixel_rounding() {
        let size = ImageSize::new(2, 2);
        assert_eq!(size.pixel_of(1.2, 0.3), (0, 1));
        assert_eq!(size.pixel_of(0.5, 1.5), (1, 0));
        assert_eq!(size.pixel_of(1.9, 1.9), (1, 1));
        assert_eq!(round_half_down(2.5), 2.0);
        assert_eq!(round_half_down(2.51), 3.0);
    }

    #[test]
    fn region_filter_closed_bounds() {
        let roi = RegionOfInterest::default();
        let pts = vec![
            Point3 {
                x: 0.0,
                y: -40.0,
                z: 3.0,
            },
            Point3 {
                x: 70.5,
                y: 0.0,
                z: 0.0,
            },
            Point3 {
                x: 10.0,
                y: 0.0,
                z: -1.0001,
            },
            Point3 {
                x: 70.4,
                y: 40.0,
                z: -1.0,
            },
        ];
        let cloud = PointCloud::from_points(pts).unwrap();
        let (kept, idx) = filter_region(&cloud, &roi);
        assert_eq!(idx, vec![0, 3]);
        assert_eq!(filter_region(&kept, &roi).0, kept);
        assert!(RegionOfInterest::new((1.0, 0.0), (0.0, 1.0), (0.0, 1.0)).is_err());
    }

    #[test]
    fn subsample_rules() {
        let idx = subsample_indices(5, 5, 7).unwrap();
        assert_eq!(idx, vec![0, 1, 2, 3, 4]);
        let idx = subsample_indices(3, 5, 7).unwrap();
        assert_eq!(&idx[..3], &[0, 1, 2]);
        assert_eq!(idx.len(), 5);
        assert!(idx.iter().all(|&i| i < 3));
        assert!(subsample_indices(0, 5, 7).is_err());
        assert!(subsample_indices(0, 0, 7).unwrap().is_empty());
    }

    #[test]
    fn subsample_reproducible() {
        let a = subsample_indices(20000, 16384, 42).unwrap();
        let b = subsample_indices(20000, 16384, 42).unwrap();
        assert_eq!(a, b);
        assert!(a.windows(2).all(|w| w[0] < w[1]));
        assert_ne!(a, subsample_indices(20000, 16384, 43).unwrap());
    }

    fn cube(ry: f64) -> Box3D {
        Box3D::new(ObjectClass::Car, [0.0; 3], 2.0, 2.0, 2.0, ry).unwrap()
    }

    #[test]
    fn box_containment() {
        assert!(point_in_box(
            &Point3 {
                x: 0.0,
                y: -1.0,
                z: 0.0
            },
            &cube(0.0),
            0.0
        ));
        assert!(!point_in_box(
            &Point3 {
                x: 10.0,
                y: 0.0,
                z: 0.0
            },
            &cube(0.0),
            0.0
        ));
        assert!(!point_in_box(&Point3 { x: 0.0, y: 0.5, z: 0.0 }, &cube(0.0), 0.0));
        assert!(point_in_box(&Point3 { x: 0.0, y: 0.5, z: 0.0 }, &cube(0.0), 0.5));
    }

    #[test]
    fn rotated_box() {
        // By hand, ry = pi/2: object-frame coordinates are (-z, x) = (-1.9, 0.9),
        // inside the half extents (2, 1). With ry = 0 they are (0.9, 1.9): outside.
        let p = Point3 {
            x: 0.9,
            y: -1.0,
            z: 1.9,
        };
        let rotated = Box3D::new(ObjectClass::Car, [0.0; 3], 2.0, 2.0, 4.0, FRAC_PI_2).unwrap();
        assert!(point_in_box(&p, &rotated, 0.0));
        let straight = Box3D { ry: 0.0, ..rotated };
        assert!(!point_in_box(&p, &straight, 0.0));
    }

    #[test]
    fn corners_are_on_the_box() {
        let b = Box3D::new(ObjectClass::Car, [1.0, 1.5, 20.0], 1.5, 1.6, 3.9, 0.7).unwrap();
        for c in box_corners(&b) {
            assert!(point_in_box(&c, &b, 1e-9));
            assert!(!point_in_box(&c, &b, -1e-6));
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use rand::Rng;

        proptest! {
            #[test]
            fn yaw_period(px in -5.0f64..5.0, py in -3.0f64..1.0, pz in -5.0f64..5.0,
                          ry in -PI..PI, l in 0.5f64..5.0, w in 0.5f64..3.0) {
                let b = Box3D::new(ObjectClass::Car, [0.3, 0.0, -0.2], 1.7, w, l, ry).unwrap();
                let shifted = Box3D { ry: ry + 2.0 * PI, ..b.clone() };
                let p = Point3 { x: px, y: py, z: pz };
                // points within rounding distance of a face may flip; skip those
                let (s, c) = ry.sin_cos();
                let dl = (c * (px - 0.3) - s * (pz + 0.2)).abs() - l / 2.0;
                let dw = (s * (px - 0.3) + c * (pz + 0.2)).abs() - w / 2.0;
                prop_assume!(dl.abs() > 1e-9 && dw.abs() > 1e-9);
                prop_assert_eq!(point_in_box(&p, &b, 0.0), point_in_box(&p, &shifted, 0.0));
            }

            #[test]
            fn projection_keeps_alignment(n in 0usize..50, seed in any::<u64>()) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let pts = (0..n)
                    .map(|_| Point3 { x: rng.gen_range(-10.0..10.0), y: rng.gen_range(-10.0..10.0), z: rng.gen_range(-10.0..10.0) })
                    .collect();
                let cloud = PointCloud::from_points(pts).unwrap();
                prop_assert_eq!(project_points(&cloud, &hand_calib(), ImageSize::new(100, 100)).len(), n);
            }

            #[test]
            fn pinhole_matches_scalar_formula(x in -20.0f64..20.0, y in -20.0f64..20.0, z in 0.1f64..50.0,
                                             f in 10.0f64..1000.0, cx in 0.0f64..600.0, cy in 0.0f64..200.0) {
                let p2 = Matrix3x4::new(f, 0.0, cx, 0.0, 0.0, f, cy, 0.0, 0.0, 0.0, 1.0, 0.0);
                let calib = CalibrationSet::new(p2, Matrix3::identity(), Matrix3x4::identity()).unwrap();
                let px = project_camera_point(&Point3 { x, y, z }, &calib, ImageSize::new(400, 1300));
                let u = x / z * f + cx;
                let v = y / z * f + cy;
                prop_assert!((px.u - u).abs() <= 1e-9 * u.abs().max(1.0));
                prop_assert!((px.v - v).abs() <= 1e-9 * v.abs().max(1.0));
                prop_assert_eq!(px.depth, z);
            }

            #[test]
            fn subsample_no_duplicates(count in 1usize..500, n in 0usize..500, seed in any::<u64>()) {
                let idx = subsample_indices(count, n, seed).unwrap();
                prop_assert_eq!(idx.len(), n);
                prop_assert_eq!(&idx, &subsample_indices(count, n, seed).unwrap());
                if count >= n {
                    let mut d = idx.clone();
                    d.dedup();
                    prop_assert_eq!(d.len(), n);
                } else {
                    prop_assert_eq!(&idx[..count], &(0..count).collect::<Vec<_>>()[..]);
                }
            }
        }
    }
}
