//! Readers and writers for KITTI velodyne scans, calibration and label files,
//! the `PACF` feature-map container and binary PGM/PPM rasters.

use std::fs;
use std::path::Path;

use nalgebra::{Matrix3, Matrix3x4};

use crate::error::{Error, Result};
use crate::types::{Box3D, FeatureMap, ObjectClass, Point3, PointCloud};

const VELODYNE_RECORD: usize = 16;

pub const FEATURE_MAP_MAGIC: &[u8; 4] = b"PACF";
pub const FEATURE_MAP_VERSION: u16 = 1;
const FEATURE_MAP_HEADER: usize = 4 + 2 + 3 * 4;

const ORTHONORMAL_TOL: f64 = 1e-3;

// ---------------------------------------------------------------------------
// Velodyne scans

/// Decodes packed `(x, y, z, reflectance)` little-endian f32 records.
pub fn decode_velodyne(bytes: &[u8]) -> Result<PointCloud> {
    if !bytes.len().is_multiple_of(VELODYNE_RECORD) {
        let offset = (bytes.len() / VELODYNE_RECORD * VELODYNE_RECORD) as u64;
        return Err(Error::FormatAt {
            offset,
            reason: format!(
                "truncated record: {} trailing bytes, records are {VELODYNE_RECORD} bytes",
                bytes.len() % VELODYNE_RECORD
            ),
        });
    }
    let n = bytes.len() / VELODYNE_RECORD;
    let mut points = Vec::with_capacity(n);
    let mut reflectance = Vec::with_capacity(n);
    for (index, rec) in bytes.chunks_exact(VELODYNE_RECORD).enumerate() {
        let mut v = [0f32; 4];
        for (slot, raw) in v.iter_mut().zip(rec.chunks_exact(4)) {
            *slot = f32::from_le_bytes([raw[0], raw[1], raw[2], raw[3]]);
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteRecord { index });
        }
        points.push(Point3 {
            x: f64::from(v[0]),
            y: f64::from(v[1]),
            z: f64::from(v[2]),
        });
        reflectance.push(f64::from(v[3]));
    }
    PointCloud::new(points, reflectance, None).map_err(|e| Error::Format(e.to_string()))
}

/// Encodes the cloud as packed f32 records. Coordinates are narrowed to f32.
pub fn encode_velodyne(cloud: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(cloud.len() * VELODYNE_RECORD);
    for (p, &r) in cloud.points().iter().zip(cloud.reflectance()) {
        for v in [p.x, p.y, p.z, r] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub fn read_velodyne(path: impl AsRef<Path>) -> Result<PointCloud> {
    decode_velodyne(&fs::read(path)?)
}

pub fn write_velodyne(cloud: &PointCloud, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_velodyne(cloud))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Calibration

/// Camera calibration for one KITTI frame.
#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationSet {
    /// Left color camera projection (rectified frame to image).
    pub p2: Matrix3x4<f64>,
    pub r0_rect: Matrix3<f64>,
    pub tr_velo_to_cam: Matrix3x4<f64>,
}

fn orthonormality_error(r: &Matrix3<f64>) -> f64 {
    (r.transpose() * r - Matrix3::identity()).amax()
}

impl CalibrationSet {
    pub fn new(p2: Matrix3x4<f64>, r0_rect: Matrix3<f64>, tr_velo_to_cam: Matrix3x4<f64>) -> Result<Self> {
        let all_finite = p2
            .iter()
            .chain(r0_rect.iter())
            .chain(tr_velo_to_cam.iter())
            .all(|v| v.is_finite());
        if !all_finite {
            return Err(Error::InvalidValue("calibration contains non-finite values".into()));
        }
        let err = orthonormality_error(&r0_rect);
        if err > ORTHONORMAL_TOL {
            return Err(Error::InvalidValue(format!(
                "R0_rect is not orthonormal (error {err:.3e})"
            )));
        }
        let rot: Matrix3<f64> = tr_velo_to_cam.fixed_view::<3, 3>(0, 0).into_owned();
        let err = orthonormality_error(&rot);
        if err > ORTHONORMAL_TOL {
            return Err(Error::InvalidValue(format!(
                "rotation of Tr_velo_to_cam is not orthonormal (error {err:.3e})"
            )));
        }
        Ok(CalibrationSet {
            p2,
            r0_rect,
            tr_velo_to_cam,
        })
    }

    /// `P2 = [I|0]`, `R0_rect = I`, `Tr_velo_to_cam = [I|0]`.
    pub fn identity() -> Self {
        CalibrationSet {
            p2: Matrix3x4::identity(),
            r0_rect: Matrix3::identity(),
            tr_velo_to_cam: Matrix3x4::identity(),
        }
    }
}

pub fn parse_calib(text: &str) -> Result<CalibrationSet> {
    let mut p2 = None;
    let mut r0 = None;
    let mut tr = None;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, rest)) = line.split_once(':') else {
            return Err(Error::Malformed {
                line: lineno + 1,
                reason: "expected `KEY: values`".into(),
            });
        };
        let key = key.trim();
        let (slot, expected) = match key {
            "P2" => (&mut p2, 12),
            "R0_rect" => (&mut r0, 9),
            "Tr_velo_to_cam" => (&mut tr, 12),
            _ => continue,
        };
        let values = rest
            .split_whitespace()
            .map(|t| {
                t.parse::<f64>().map_err(|_| Error::Malformed {
                    line: lineno + 1,
                    reason: format!("{key}: cannot parse `{t}` as a number"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if values.len() != expected {
            return Err(Error::WrongValueCount {
                key: key.to_string(),
                expected,
                found: values.len(),
            });
        }
        *slot = Some(values);
    }
    let p2 = p2.ok_or_else(|| Error::MissingKey("P2".into()))?;
    let r0 = r0.ok_or_else(|| Error::MissingKey("R0_rect".into()))?;
    let tr = tr.ok_or_else(|| Error::MissingKey("Tr_velo_to_cam".into()))?;
    CalibrationSet::new(
        Matrix3x4::from_row_slice(&p2),
        Matrix3::from_row_slice(&r0),
        Matrix3x4::from_row_slice(&tr),
    )
}

pub fn read_calib(path: impl AsRef<Path>) -> Result<CalibrationSet> {
    parse_calib(&fs::read_to_string(path)?)
}

fn join_row_major<'a>(values: impl Iterator<Item = &'a f64>) -> String {
    values.map(|v| format!("{v:e}")).collect::<Vec<_>>().join(" ")
}

/// Renders the three matrices in KITTI text form. Values round-trip exactly.
pub fn format_calib(calib: &CalibrationSet) -> String {
    // nalgebra iterates column-major; transpose to emit rows.
    format!(
        "P2: {}\nR0_rect: {}\nTr_velo_to_cam: {}\n",
        join_row_major(calib.p2.transpose().iter()),
        join_row_major(calib.r0_rect.transpose().iter()),
        join_row_major(calib.tr_velo_to_cam.transpose().iter()),
    )
}

pub fn write_calib(calib: &CalibrationSet, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, format_calib(calib))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Labels

pub fn parse_labels(text: &str) -> Result<Vec<Box3D>> {
    let mut boxes = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        let malformed = |reason: String| Error::Malformed {
            line: lineno + 1,
            reason,
        };
        if fields.len() < 15 {
            return Err(malformed(format!(
                "expected at least 15 fields, found {}",
                fields.len()
            )));
        }
        let num = |i: usize| -> Result<f64> {
            fields[i]
                .parse::<f64>()
                .map_err(|_| malformed(format!("field {} (`{}`) is not a number", i + 1, fields[i])))
        };
        let class = ObjectClass::from_name(fields[0]);
        let occlusion = fields[2]
            .parse::<i32>()
            .map_err(|_| malformed(format!("occlusion `{}` is not an integer", fields[2])))?;
        let b = Box3D {
            class,
            truncation: num(1)?,
            occlusion,
            alpha: num(3)?,
            bbox2d: [num(4)?, num(5)?, num(6)?, num(7)?],
            h: num(8)?,
            w: num(9)?,
            l: num(10)?,
            center: [num(11)?, num(12)?, num(13)?],
            ry: num(14)?,
        };
        b.validate().map_err(|e| malformed(e.to_string()))?;
        boxes.push(b);
    }
    Ok(boxes)
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<Vec<Box3D>> {
    parse_labels(&fs::read_to_string(path)?)
}

/// KITTI label lines with two decimals, as in the benchmark files.
pub fn format_labels(boxes: &[Box3D]) -> String {
    let mut out = String::new();
    for b in boxes {
        out.push_str(&format!(
            "{} {:.2} {} {:.2} {:.2} {:.2} {:.2} {:.2} {:.2} {:.2} {:.2} {:.2} {:.2} {:.2} {:.2}\n",
            b.class,
            b.truncation,
            b.occlusion,
            b.alpha,
            b.bbox2d[0],
            b.bbox2d[1],
            b.bbox2d[2],
            b.bbox2d[3],
            b.h,
            b.w,
            b.l,
            b.center[0],
            b.center[1],
            b.center[2],
            b.ry
        ));
    }
    out
}

pub fn write_labels(boxes: &[Box3D], path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, format_labels(boxes))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Feature-map container: "PACF", u16 version, u32 H, W, C, then H*W*C f32, all LE.

pub fn encode_feature_map(map: &FeatureMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(FEATURE_MAP_HEADER + 4 * map.data().len());
    out.extend_from_slice(FEATURE_MAP_MAGIC);
    out.extend_from_slice(&FEATURE_MAP_VERSION.to_le_bytes());
    for d in [map.height(), map.width(), map.channels()] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in map.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_feature_map(bytes: &[u8]) -> Result<FeatureMap> {
    if bytes.len() < FEATURE_MAP_HEADER {
        return Err(Error::FormatAt {
            offset: bytes.len() as u64,
            reason: format!("header needs {FEATURE_MAP_HEADER} bytes"),
        });
    }
    if &bytes[..4] != FEATURE_MAP_MAGIC {
        return Err(Error::FormatAt {
            offset: 0,
            reason: "bad magic, expected `PACF`".into(),
        });
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != FEATURE_MAP_VERSION {
        return Err(Error::FormatAt {
            offset: 4,
            reason: format!("unsupported version {version}"),
        });
    }
    let dim = |at: usize| u32::from_le_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]]) as usize;
    let (h, w, c) = (dim(6), dim(10), dim(14));
    let payload = &bytes[FEATURE_MAP_HEADER..];
    let expected = h
        .checked_mul(w)
        .and_then(|v| v.checked_mul(c))
        .and_then(|v| v.checked_mul(4))
        .ok_or_else(|| Error::Format("feature map dimensions overflow".into()))?;
    if payload.len() != expected {
        return Err(Error::FormatAt {
            offset: FEATURE_MAP_HEADER as u64,
            reason: format!("payload is {} bytes, header declares {expected}", payload.len()),
        });
    }
    let data = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    FeatureMap::new(h, w, c, data).map_err(|e| Error::Format(e.to_string()))
}

pub fn write_feature_map(map: &FeatureMap, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_feature_map(map))?;
    Ok(())
}

pub fn read_feature_map(path: impl AsRef<Path>) -> Result<FeatureMap> {
    decode_feature_map(&fs::read(path)?)
}

// ---------------------------------------------------------------------------
// Netpbm rasters

pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    debug_assert_eq!(pixels.len(), width * height);
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

pub fn encode_ppm(width: usize, height: usize, rgb: &[u8]) -> Vec<u8> {
    debug_assert_eq!(rgb.len(), 3 * width * height);
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    out
}

/// Decodes a binary PGM (P5, maxval 255) into a one-channel map scaled to [0, 1].
pub fn decode_pgm(bytes: &[u8]) -> Result<FeatureMap> {
    let mut pos = 0usize;
    let mut tokens = Vec::with_capacity(4);
    while tokens.len() < 4 {
        while pos < bytes.len() {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else if bytes[pos].is_ascii_whitespace() {
                pos += 1;
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::FormatAt {
                offset: pos as u64,
                reason: "truncated PGM header".into(),
            });
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    if tokens[0] != "P5" {
        return Err(Error::FormatAt {
            offset: 0,
            reason: format!("expected P5 magic, found `{}`", tokens[0]),
        });
    }
    let parse = |t: &str| {
        t.parse::<usize>()
            .map_err(|_| Error::Format(format!("bad PGM header value `{t}`")))
    };
    let (width, height, maxval) = (parse(&tokens[1])?, parse(&tokens[2])?, parse(&tokens[3])?);
    if maxval != 255 {
        return Err(Error::Format(format!("PGM maxval must be 255, found {maxval}")));
    }
    let raster = bytes.get(pos..).unwrap_or(&[]);
    if raster.len() != width * height {
        return Err(Error::FormatAt {
            offset: pos as u64,
            reason: format!("raster is {} bytes, header declares {}", raster.len(), width * height),
        });
    }
    let data = raster.iter().map(|&b| f32::from(b) / 255.0).collect();
    FeatureMap::new(height, width, 1, data)
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<FeatureMap> {
    decode_pgm(&fs::read(path)?)
}

/// Reads a feature map from either container, chosen by the leading magic bytes.
pub fn read_map_any(path: impl AsRef<Path>) -> Result<FeatureMap> {
    let bytes = fs::read(path)?;
    if bytes.starts_with(b"P5") {
        decode_pgm(&bytes)
    } else {
        decode_feature_map(&bytes)
    }
}
