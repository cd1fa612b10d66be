//! Point-wise fusion of LIDAR points with image semantics.
//!
//! The pipeline reads KITTI-format scans and calibration, finds each point's
//! K nearest neighbors with a k-d tree, projects the neighbors onto an image
//! feature map, and fuses the retrieved semantics with geometric offsets
//! through a shared per-neighbor MLP, learned neighbor aggregation and
//! point-axis max-pooling. Sparse segmentation masks and the focal loss used
//! to supervise the image branch are derived from 3D box labels.
//!
//! Modules map onto pipeline stages:
//!
//! - [`types`]: points, clouds, feature maps, boxes and channel bookkeeping
//! - [`kitti_io`]: velodyne, calibration, label and container formats
//! - [`spatial_index`]: k-d tree and brute-force KNN
//! - [`projection`]: LIDAR to image geometry, filtering and subsampling
//! - [`pacf_op`]: the fusion operator, forward and backward
//! - [`supervision`]: mask generation and losses
//! - [`cli`]: command implementations behind the `pacf` binary

pub mod cli;
pub mod error;
pub mod gradcheck;
pub mod kitti_io;
pub mod pacf_op;
pub mod projection;
pub mod spatial_index;
pub mod supervision;
pub mod synthetic;
pub mod types;

pub use error::{Error, Result};
