//! Segmentation supervision derived from 3D labels: per-point foreground
//! labels, the sparse image mask they stamp, and the focal loss computed on
//! supervised pixels only.

use log::warn;

use crate::error::{Error, Result};
use crate::kitti_io::{encode_pgm, CalibrationSet};
use crate::projection::{box_corners, lidar_to_camera, point_in_box, project_camera_point, project_points, ImageSize};
use crate::types::{Box3D, FeatureMap, ObjectClass, PointCloud};

/// Probability clamp keeping `ln(p_t)` finite.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PointLabel {
    Background,
    Foreground,
}

/// Which labeled boxes count as foreground. DontCare never does.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub enum ClassFilter {
    #[default]
    AllObjects,
    Only(Vec<ObjectClass>),
}

impl ClassFilter {
    pub fn accepts(&self, class: &ObjectClass) -> bool {
        if *class == ObjectClass::DontCare {
            return false;
        }
        match self {
            ClassFilter::AllObjects => true,
            ClassFilter::Only(classes) => classes.contains(class),
        }
    }
}

/// Foreground iff the point, in the camera frame, lies in an accepted box
/// grown by `margin`.
pub fn label_points(
    cloud: &PointCloud,
    boxes: &[Box3D],
    calib: &CalibrationSet,
    margin: f64,
    filter: &ClassFilter,
) -> Vec<PointLabel> {
    let active: Vec<&Box3D> = boxes.iter().filter(|b| filter.accepts(&b.class)).collect();
    cloud
        .points()
        .iter()
        .map(|p| {
            let cam = lidar_to_camera(p, calib);
            if active.iter().any(|b| point_in_box(&cam, b, margin)) {
                PointLabel::Foreground
            } else {
                PointLabel::Background
            }
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskState {
    Unsupervised,
    Background,
    Foreground,
}

impl MaskState {
    /// Gray level used when the mask is exported as PGM.
    pub fn gray(self) -> u8 {
        match self {
            MaskState::Unsupervised => 0,
            MaskState::Background => 128,
            MaskState::Foreground => 255,
        }
    }
}

/// Image-plane supervision defined only where labeled points project.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseMask {
    size: ImageSize,
    state: Vec<MaskState>,
    depth: Vec<f64>,
}

impl SparseMask {
    /// Builds a mask from row-major states; depths are left unset.
    pub fn from_states(size: ImageSize, state: Vec<MaskState>) -> Result<Self> {
        if state.len() != size.height * size.width {
            return Err(Error::ShapeMismatch {
                dim: "pixels",
                expected: size.height * size.width,
                found: state.len(),
            });
        }
        let depth = vec![f64::INFINITY; state.len()];
        Ok(SparseMask { size, state, depth })
    }

    /// Reads back the gray levels written by [`SparseMask::to_pgm`].
    pub fn from_gray(size: ImageSize, gray: &[u8]) -> Result<Self> {
        let state = gray
            .iter()
            .map(|g| match g {
                0 => Ok(MaskState::Unsupervised),
                128 => Ok(MaskState::Background),
                255 => Ok(MaskState::Foreground),
                other => Err(Error::Format(format!("unexpected mask level {other}"))),
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_states(size, state)
    }

    pub fn size(&self) -> ImageSize {
        self.size
    }

    pub fn state(&self, row: usize, col: usize) -> MaskState {
        self.state[row * self.size.width + col]
    }

    pub fn states(&self) -> &[MaskState] {
        &self.state
    }

    /// Depth of the point that stamped each pixel; infinite when unsupervised.
    pub fn depths(&self) -> &[f64] {
        &self.depth
    }

    pub fn supervised_count(&self) -> usize {
        self.state.iter().filter(|s| **s != MaskState::Unsupervised).count()
    }

    pub fn to_pgm(&self) -> Vec<u8> {
        let pixels: Vec<u8> = self.state.iter().map(|s| s.gray()).collect();
        encode_pgm(self.size.width, self.size.height, &pixels)
    }
}

/// Extra controls for mask stamping.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MaskOptions {
    /// Image rectangles `[left, top, right, bottom]` where nothing is stamped.
    pub ignore_regions: Vec<[f64; 4]>,
}

/// 2D boxes of the DontCare labels, for [`MaskOptions::ignore_regions`].
pub fn dont_care_regions(boxes: &[Box3D]) -> Vec<[f64; 4]> {
    boxes.iter().filter(|b| b.is_dont_care()).map(|b| b.bbox2d).collect()
}

pub fn make_sparse_mask(
    cloud: &PointCloud,
    labels: &[PointLabel],
    calib: &CalibrationSet,
    size: ImageSize,
) -> Result<SparseMask> {
    make_sparse_mask_with(cloud, labels, calib, size, &MaskOptions::default())
}

/// Stamps every validly projecting point onto its pixel. When several points
/// hit one pixel the nearest (smallest depth) wins, ties going to the lower
/// point index.
pub fn make_sparse_mask_with(
    cloud: &PointCloud,
    labels: &[PointLabel],
    calib: &CalibrationSet,
    size: ImageSize,
    opts: &MaskOptions,
) -> Result<SparseMask> {
    if labels.len() != cloud.len() {
        return Err(Error::ShapeMismatch {
            dim: "point labels",
            expected: cloud.len(),
            found: labels.len(),
        });
    }
    let n = size.height * size.width;
    let mut state = vec![MaskState::Unsupervised; n];
    let mut depth = vec![f64::INFINITY; n];
    let ignored = |u: f64, v: f64| {
        opts.ignore_regions
            .iter()
            .any(|r| u >= r[0] && u <= r[2] && v >= r[1] && v <= r[3])
    };
    for (px, label) in project_points(cloud, calib, size).iter().zip(labels) {
        if !px.valid || ignored(px.u, px.v) {
            continue;
        }
        let (row, col) = size.pixel_of(px.u, px.v);
        let at = row * size.width + col;
        if px.depth < depth[at] {
            depth[at] = px.depth;
            state[at] = match label {
                PointLabel::Foreground => MaskState::Foreground,
                PointLabel::Background => MaskState::Background,
            };
        }
    }
    Ok(SparseMask { size, state, depth })
}

/// Dense one-channel map that is 1 inside the image-plane bounding rectangle
/// of every accepted box and 0 elsewhere. Boxes reaching behind the camera
/// are skipped.
pub fn box_footprint_mask(
    boxes: &[Box3D],
    calib: &CalibrationSet,
    size: ImageSize,
    filter: &ClassFilter,
) -> Result<FeatureMap> {
    let mut data = vec![0.0f32; size.height * size.width];
    for b in boxes.iter().filter(|b| filter.accepts(&b.class)) {
        let projected: Vec<_> = box_corners(b)
            .iter()
            .map(|c| project_camera_point(c, calib, size))
            .collect();
        if projected.iter().any(|p| p.depth.is_nan() || p.depth <= 0.0) {
            warn!("skipping {} box partly behind the camera", b.class);
            continue;
        }
        let (mut u0, mut v0, mut u1, mut v1) = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
        for p in &projected {
            u0 = u0.min(p.u);
            v0 = v0.min(p.v);
            u1 = u1.max(p.u);
            v1 = v1.max(p.v);
        }
        if u1 < 0.0 || v1 < 0.0 || u0 >= size.width as f64 || v0 >= size.height as f64 {
            continue;
        }
        let (r0, c0) = size.pixel_of(u0, v0);
        let (r1, c1) = size.pixel_of(u1, v1);
        for r in r0..=r1 {
            data[r * size.width + c0..=r * size.width + c1].fill(1.0);
        }
    }
    FeatureMap::new(size.height, size.width, 1, data)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FocalLossConfig {
    pub alpha: f64,
    pub gamma: f64,
    /// Weight of the segmentation term in the total loss.
    pub lambda: f64,
}

impl Default for FocalLossConfig {
    fn default() -> Self {
        FocalLossConfig {
            alpha: 0.25,
            gamma: 2.0,
            lambda: 1.0,
        }
    }
}

impl FocalLossConfig {
    pub fn new(alpha: f64, gamma: f64, lambda: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::InvalidValue(format!("alpha {alpha} must lie in (0, 1)")));
        }
        if !(gamma >= 0.0 && gamma.is_finite()) {
            return Err(Error::InvalidValue(format!("gamma {gamma} must be >= 0")));
        }
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::InvalidValue(format!("lambda {lambda} must be >= 0")));
        }
        Ok(FocalLossConfig { alpha, gamma, lambda })
    }
}

/// Focal term `-alpha_t (1 - p_t)^gamma ln(p_t)` for one pixel with predicted
/// foreground probability `p`, and its derivative with respect to `p`.
/// Probabilities are clamped to `[eps, 1 - eps]`; the derivative is zero where
/// the clamp is active.
pub fn focal_term(p: f64, foreground: bool, cfg: &FocalLossConfig) -> (f64, f64) {
    let clamped = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    let (pt, alpha_t, sign) = if foreground {
        (clamped, cfg.alpha, 1.0)
    } else {
        (1.0 - clamped, 1.0 - cfg.alpha, -1.0)
    };
    let q = 1.0 - pt;
    let modulator = q.powf(cfg.gamma);
    let value = -alpha_t * modulator * pt.ln();
    let d_pt = if cfg.gamma == 0.0 {
        -alpha_t / pt
    } else {
        alpha_t * (cfg.gamma * q.powf(cfg.gamma - 1.0) * pt.ln() - modulator / pt)
    };
    let grad = if clamped != p { 0.0 } else { sign * d_pt };
    (value, grad)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FocalLoss {
    /// Mean focal term over supervised pixels.
    pub loss: f64,
    /// d loss / d p per pixel; zero on unsupervised pixels.
    pub grad: Vec<f64>,
    pub supervised: usize,
    /// Set when no pixel carried supervision and the loss was defined as 0.
    pub no_supervision: bool,
}

/// `predictions` holds one foreground probability per pixel, row-major.
pub fn focal_loss(predictions: &[f64], mask: &SparseMask, cfg: &FocalLossConfig) -> Result<FocalLoss> {
    let n = mask.size.height * mask.size.width;
    if predictions.len() != n {
        return Err(Error::ShapeMismatch {
            dim: "prediction pixels",
            expected: n,
            found: predictions.len(),
        });
    }
    if let Some(i) = predictions.iter().position(|p| !p.is_finite()) {
        return Err(Error::InvalidValue(format!("prediction {i} is not finite")));
    }
    let supervised = mask.supervised_count();
    let mut grad = vec![0.0; n];
    if supervised == 0 {
        warn!("focal loss evaluated on a mask without supervised pixels");
        return Ok(FocalLoss {
            loss: 0.0,
            grad,
            supervised,
            no_supervision: true,
        });
    }
    let scale = 1.0 / supervised as f64;
    let mut total = 0.0;
    for (i, (&p, s)) in predictions.iter().zip(&mask.state).enumerate() {
        let fg = match s {
            MaskState::Unsupervised => continue,
            MaskState::Foreground => true,
            MaskState::Background => false,
        };
        let (value, d) = focal_term(p, fg, cfg);
        total += value;
        grad[i] = d * scale;
    }
    Ok(FocalLoss {
        loss: total * scale,
        grad,
        supervised,
        no_supervision: false,
    })
}

/// Detection loss plus the weighted segmentation loss.
pub fn total_loss(det_loss: f64, seg_loss: f64, lambda: f64) -> f64 {
    det_loss + lambda * seg_loss
}
