//! Whole-cloud fusion in the two placements of the operator: mid-pipeline
//! (`V1`, the full operator output) and at the input (`V2`, retrieved
//! semantics concatenated onto the raw point features).

use std::fmt;
use std::str::FromStr;

use super::operator::pacf_forward;
use super::params::PacfParams;
use super::retrieval::{assemble_neighbors, retrieve_features_with, Sampling};
use crate::error::{Error, Result};
use crate::kitti_io::CalibrationSet;
use crate::projection::{project_points, ImageSize};
use crate::spatial_index::{KdTree, DEFAULT_LEAF_SIZE};
use crate::types::{FeatureMap, FeatureRows, PointCloud};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum FusionMode {
    /// Operator output `[y_cc | y_a | y_pool]` per point.
    #[default]
    V1,
    /// `[semantic | point features]` per point, no convolution.
    V2,
}

impl FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "v1" => Ok(FusionMode::V1),
            "v2" => Ok(FusionMode::V2),
            other => Err(Error::InvalidValue(format!("unknown fusion mode `{other}`"))),
        }
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FusionMode::V1 => "v1",
            FusionMode::V2 => "v2",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FuseConfig {
    pub k: usize,
    /// Neighbor search radius in meters; infinite by default.
    pub radius: f64,
    pub mode: FusionMode,
    pub sampling: Sampling,
    /// Appends reflectance to the LIDAR feature columns.
    pub include_reflectance: bool,
    pub leaf_size: usize,
}

impl Default for FuseConfig {
    fn default() -> Self {
        FuseConfig {
            k: 3,
            radius: f64::INFINITY,
            mode: FusionMode::V1,
            sampling: Sampling::Nearest,
            include_reflectance: false,
            leaf_size: DEFAULT_LEAF_SIZE,
        }
    }
}

/// Fuses image semantics into every point of `cloud`. The image size is the
/// feature map's. `params` is required for `V1` and ignored for `V2`.
pub fn fuse_cloud(
    cloud: &PointCloud,
    map: &FeatureMap,
    calib: &CalibrationSet,
    params: Option<&PacfParams>,
    cfg: &FuseConfig,
) -> Result<PointCloud> {
    let size = ImageSize::new(map.height(), map.width());
    let pixels = project_points(cloud, calib, size);
    let semantic = retrieve_features_with(&pixels, map, cfg.sampling);
    let lidar = cloud.lidar_features(cfg.include_reflectance);
    let features = match cfg.mode {
        FusionMode::V2 => {
            let width = semantic.channels() + lidar.width();
            let mut data = Vec::with_capacity(cloud.len() * width);
            for i in 0..cloud.len() {
                data.extend_from_slice(semantic.row(i));
                if lidar.width() > 0 {
                    data.extend_from_slice(lidar.row(i));
                }
            }
            FeatureRows::new(width, data)?
        }
        FusionMode::V1 => {
            let params = params.ok_or_else(|| Error::InvalidValue("V1 fusion needs operator parameters".into()))?;
            if params.k() != cfg.k {
                return Err(Error::ShapeMismatch {
                    dim: "K",
                    expected: cfg.k,
                    found: params.k(),
                });
            }
            if cloud.is_empty() {
                let width = 2 * params.spec().output_width() + params.spec().input_width();
                FeatureRows::new(width, Vec::new())?
            } else {
                let tree = KdTree::build(cloud.points(), cfg.leaf_size)?;
                let neighbors = tree.knn_all(cfg.k, cfg.radius)?;
                let nf = assemble_neighbors(cloud, &lidar, &semantic, &neighbors)?;
                let fused = pacf_forward(&nf, params)?;
                let width = fused.width();
                FeatureRows::new(width, fused.into_data())?
            }
        }
    };
    cloud.with_features(features)
}
