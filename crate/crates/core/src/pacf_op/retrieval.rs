//! Semantic feature lookup on the image plane and assembly of the per-target
//! neighbor matrices `F'` with rows `[semantic | lidar features | x_k - x_i]`.

use crate::error::{Error, Result};
use crate::projection::{ImageSize, PixelCoord};
use crate::spatial_index::NeighborSet;
use crate::types::{FeatureMap, FeatureRows, PointCloud};

/// How a continuous pixel position reads the feature map.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Sampling {
    /// Value of the pixel whose center is nearest, rounding halves down.
    #[default]
    Nearest,
    /// Bilinear blend of the four surrounding pixel centers.
    Bilinear,
}

/// Per-point semantic vectors. Points that did not project get zeros and a
/// cleared `valid` flag.
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticFeatures {
    channels: usize,
    data: Vec<f64>,
    valid: Vec<bool>,
}

impl SemanticFeatures {
    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn len(&self) -> usize {
        self.valid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.valid.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.channels..(i + 1) * self.channels]
    }

    pub fn is_valid(&self, i: usize) -> bool {
        self.valid[i]
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    pub fn to_rows(&self) -> FeatureRows {
        FeatureRows::new(self.channels, self.data.clone()).expect("retrieved values are finite")
    }
}

pub fn retrieve_features(pixels: &[PixelCoord], map: &FeatureMap) -> SemanticFeatures {
    retrieve_features_with(pixels, map, Sampling::Nearest)
}

pub fn retrieve_features_with(pixels: &[PixelCoord], map: &FeatureMap, sampling: Sampling) -> SemanticFeatures {
    let c = map.channels();
    let size = ImageSize::new(map.height(), map.width());
    let mut data = vec![0.0; pixels.len() * c];
    let mut valid = vec![false; pixels.len()];
    for (i, px) in pixels.iter().enumerate() {
        if !px.valid || !size.contains(px.u, px.v) {
            continue;
        }
        valid[i] = true;
        let out = &mut data[i * c..(i + 1) * c];
        match sampling {
            Sampling::Nearest => {
                let (row, col) = size.pixel_of(px.u, px.v);
                for (o, &v) in out.iter_mut().zip(map.pixel(row, col)) {
                    *o = f64::from(v);
                }
            }
            Sampling::Bilinear => bilinear(map, px.u, px.v, out),
        }
    }
    SemanticFeatures {
        channels: c,
        data,
        valid,
    }
}

fn bilinear(map: &FeatureMap, u: f64, v: f64, out: &mut [f64]) {
    let u = u.clamp(0.0, (map.width() - 1) as f64);
    let v = v.clamp(0.0, (map.height() - 1) as f64);
    let (c0, r0) = (u.floor() as usize, v.floor() as usize);
    let (c1, r1) = ((c0 + 1).min(map.width() - 1), (r0 + 1).min(map.height() - 1));
    let (fu, fv) = (u - c0 as f64, v - r0 as f64);
    let taps = [
        (r0, c0, (1.0 - fu) * (1.0 - fv)),
        (r0, c1, fu * (1.0 - fv)),
        (r1, c0, (1.0 - fu) * fv),
        (r1, c1, fu * fv),
    ];
    out.fill(0.0);
    for (r, c, w) in taps {
        for (o, &val) in out.iter_mut().zip(map.pixel(r, c)) {
            *o += w * f64::from(val);
        }
    }
}

/// Stacked neighbor matrices `F'`, one `K x D_i` block per target point.
#[derive(Clone, Debug, PartialEq)]
pub struct NeighborFeatures {
    k: usize,
    d_i: usize,
    data: Vec<f64>,
    valid: Vec<bool>,
}

impl NeighborFeatures {
    /// `data` holds `targets * k * d_i` values; `valid` one flag per row.
    pub fn new(k: usize, d_i: usize, data: Vec<f64>, valid: Vec<bool>) -> Result<Self> {
        if k == 0 || d_i == 0 {
            return Err(Error::InvalidDimension(
                "neighbor matrices need K >= 1 and D_i >= 1".into(),
            ));
        }
        if !data.len().is_multiple_of(k * d_i) {
            return Err(Error::ShapeMismatch {
                dim: "neighbor matrix data length",
                expected: (data.len() / (k * d_i) + 1) * k * d_i,
                found: data.len(),
            });
        }
        if valid.len() * d_i != data.len() {
            return Err(Error::ShapeMismatch {
                dim: "neighbor validity flags",
                expected: data.len() / d_i,
                found: valid.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidValue("neighbor features must be finite".into()));
        }
        Ok(NeighborFeatures { k, d_i, data, valid })
    }

    /// All rows valid.
    pub fn from_data(k: usize, d_i: usize, data: Vec<f64>) -> Result<Self> {
        let rows = data.len().checked_div(d_i).unwrap_or(0);
        NeighborFeatures::new(k, d_i, data, vec![true; rows])
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn d_i(&self) -> usize {
        self.d_i
    }

    pub fn targets(&self) -> usize {
        self.data.len() / (self.k * self.d_i)
    }

    /// The `K x D_i` block of target `t`.
    pub fn matrix(&self, t: usize) -> &[f64] {
        let n = self.k * self.d_i;
        &self.data[t * n..(t + 1) * n]
    }

    pub fn row(&self, t: usize, slot: usize) -> &[f64] {
        let start = (t * self.k + slot) * self.d_i;
        &self.data[start..start + self.d_i]
    }

    pub fn is_valid(&self, t: usize, slot: usize) -> bool {
        self.valid[t * self.k + slot]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }
}

/// Builds `F'` for every target. `neighbors[i]` lists the neighbors of point
/// `i`; columns are `[semantic (C_seg) | lidar (C_lidar) | offset (3)]`.
/// Neighbors whose projection was invalid keep zero semantics and a real offset.
pub fn assemble_neighbors(
    cloud: &PointCloud,
    point_features: &FeatureRows,
    semantic: &SemanticFeatures,
    neighbors: &[NeighborSet],
) -> Result<NeighborFeatures> {
    let n = cloud.len();
    if semantic.len() != n {
        return Err(Error::ShapeMismatch {
            dim: "semantic rows",
            expected: n,
            found: semantic.len(),
        });
    }
    if let Some(rows) = point_features.rows() {
        if rows != n {
            return Err(Error::ShapeMismatch {
                dim: "point feature rows",
                expected: n,
                found: rows,
            });
        }
    }
    if neighbors.len() != n {
        return Err(Error::ShapeMismatch {
            dim: "neighbor sets",
            expected: n,
            found: neighbors.len(),
        });
    }
    let k = neighbors.first().map_or(1, NeighborSet::k);
    let (c_seg, c_lidar) = (semantic.channels(), point_features.width());
    let d_i = c_seg + c_lidar + 3;
    let mut data = Vec::with_capacity(n * k * d_i);
    let mut valid = Vec::with_capacity(n * k);
    let points = cloud.points();
    for (i, set) in neighbors.iter().enumerate() {
        if set.k() != k {
            return Err(Error::ShapeMismatch {
                dim: "K",
                expected: k,
                found: set.k(),
            });
        }
        if let Some(t) = set.target {
            if t != i {
                return Err(Error::InvalidValue(format!("neighbor set {i} belongs to target {t}")));
            }
        }
        let xi = points[i];
        for &j in &set.indices {
            if j >= n {
                return Err(Error::InvalidValue(format!(
                    "neighbor index {j} out of range for {n} points"
                )));
            }
            data.extend_from_slice(semantic.row(j));
            if c_lidar > 0 {
                data.extend_from_slice(point_features.row(j));
            }
            let off = points[j].sub(&xi);
            data.extend_from_slice(&[off.x, off.y, off.z]);
            valid.push(semantic.is_valid(j));
        }
    }
    NeighborFeatures::new(k, d_i, data, valid)
}
