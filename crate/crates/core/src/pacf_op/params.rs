//! Learnable weights of the operator and their `PACW` checkpoint container.

use std::fs;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::types::FusionDims;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PACW";
pub const CHECKPOINT_VERSION: u16 = 1;

/// Layer widths of the per-neighbor MLP, input first. Hidden layers use a
/// rectifier, the output layer is linear.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MlpSpec {
    widths: Vec<usize>,
}

impl MlpSpec {
    pub fn new(widths: Vec<usize>) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::InvalidDimension(
                "an MLP needs an input and an output width".into(),
            ));
        }
        if widths.contains(&0) {
            return Err(Error::InvalidDimension(format!("zero layer width in {widths:?}")));
        }
        Ok(MlpSpec { widths })
    }

    /// One hidden layer of width `max(d_i, d_o)`.
    pub fn default_for(dims: &FusionDims) -> Self {
        MlpSpec {
            widths: vec![dims.d_i, dims.d_i.max(dims.d_o), dims.d_o],
        }
    }

    /// `d_i`, then the given hidden widths, then `d_o`.
    pub fn with_hidden(dims: &FusionDims, hidden: &[usize]) -> Result<Self> {
        let mut widths = Vec::with_capacity(hidden.len() + 2);
        widths.push(dims.d_i);
        widths.extend_from_slice(hidden);
        widths.push(dims.d_o);
        MlpSpec::new(widths)
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().expect("validated non-empty")
    }

    pub fn num_layers(&self) -> usize {
        self.widths.len() - 1
    }
}

/// Fully connected layer; `weight` is `outputs x inputs`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Dense {
            inputs,
            outputs,
            weight: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    #[inline]
    pub fn forward(&self, x: &[f64], y: &mut [f64]) {
        for (o, out) in y.iter_mut().enumerate() {
            let row = &self.weight[o * self.inputs..(o + 1) * self.inputs];
            *out = self.bias[o] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
        }
    }
}

/// Shared MLP weights plus the K neighbor-aggregation scalars.
#[derive(Clone, Debug, PartialEq)]
pub struct PacfParams {
    spec: MlpSpec,
    pub layers: Vec<Dense>,
    pub aggr: Vec<f64>,
}

impl PacfParams {
    pub fn new(spec: MlpSpec, layers: Vec<Dense>, aggr: Vec<f64>) -> Result<Self> {
        if layers.len() != spec.num_layers() {
            return Err(Error::ShapeMismatch {
                dim: "layer count",
                expected: spec.num_layers(),
                found: layers.len(),
            });
        }
        for (l, layer) in layers.iter().enumerate() {
            let (i, o) = (spec.widths[l], spec.widths[l + 1]);
            if layer.inputs != i || layer.weight.len() != i * o {
                return Err(Error::ShapeMismatch {
                    dim: "layer input width",
                    expected: i,
                    found: layer.inputs,
                });
            }
            if layer.outputs != o || layer.bias.len() != o {
                return Err(Error::ShapeMismatch {
                    dim: "layer output width",
                    expected: o,
                    found: layer.bias.len(),
                });
            }
        }
        if aggr.is_empty() {
            return Err(Error::InvalidDimension(
                "at least one aggregation weight (K >= 1)".into(),
            ));
        }
        let params = PacfParams { spec, layers, aggr };
        if params.to_flat().iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidValue("parameters must be finite".into()));
        }
        Ok(params)
    }

    /// Glorot-uniform layer weights, zero biases and aggregation weights `1/K`.
    pub fn init<R: Rng + ?Sized>(spec: MlpSpec, k: usize, rng: &mut R) -> Result<Self> {
        let layers = spec
            .widths
            .windows(2)
            .map(|w| {
                let (i, o) = (w[0], w[1]);
                let limit = (6.0 / (i + o) as f64).sqrt();
                let mut layer = Dense::zeros(i, o);
                for v in &mut layer.weight {
                    *v = rng.gen_range(-limit..=limit);
                }
                layer
            })
            .collect();
        PacfParams::new(spec, layers, vec![1.0 / k.max(1) as f64; k])
    }

    /// Same shapes, every value zero.
    pub fn zeros(spec: MlpSpec, k: usize) -> Self {
        let layers = spec.widths.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect();
        PacfParams {
            spec,
            layers,
            aggr: vec![0.0; k],
        }
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn k(&self) -> usize {
        self.aggr.len()
    }

    pub fn num_values(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum::<usize>() + self.aggr.len()
    }

    /// All values in checkpoint order: per layer weights then biases, then the
    /// aggregation weights.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_values());
        for l in &self.layers {
            out.extend_from_slice(&l.weight);
            out.extend_from_slice(&l.bias);
        }
        out.extend_from_slice(&self.aggr);
        out
    }

    pub fn from_flat(spec: MlpSpec, k: usize, values: &[f64]) -> Result<Self> {
        let mut params = PacfParams::zeros(spec, k);
        if values.len() != params.num_values() {
            return Err(Error::ShapeMismatch {
                dim: "parameter count",
                expected: params.num_values(),
                found: values.len(),
            });
        }
        let mut rest = values;
        for l in &mut params.layers {
            let (w, r) = rest.split_at(l.weight.len());
            l.weight.copy_from_slice(w);
            let (b, r) = r.split_at(l.bias.len());
            l.bias.copy_from_slice(b);
            rest = r;
        }
        params.aggr.copy_from_slice(rest);
        PacfParams::new(params.spec, params.layers, params.aggr)
    }
}

// Checkpoint layout, little-endian: "PACW", u16 version, u32 layer-width count,
// u32 widths..., u32 K, then every value of `to_flat` as f64.

pub fn encode_params(params: &PacfParams) -> Vec<u8> {
    let widths = params.spec.widths();
    let mut out = Vec::with_capacity(4 + 2 + 4 * (widths.len() + 2) + 8 * params.num_values());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(widths.len() as u32).to_le_bytes());
    for &w in widths {
        out.extend_from_slice(&(w as u32).to_le_bytes());
    }
    out.extend_from_slice(&(params.k() as u32).to_le_bytes());
    for v in params.to_flat() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::FormatAt {
                offset: self.pos as u64,
                reason: format!("checkpoint truncated, needed {n} more bytes"),
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

pub fn decode_params(bytes: &[u8]) -> Result<PacfParams> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::FormatAt {
            offset: 0,
            reason: "bad magic, expected `PACW`".into(),
        });
    }
    let v = cur.take(2)?;
    let version = u16::from_le_bytes([v[0], v[1]]);
    if version != CHECKPOINT_VERSION {
        return Err(Error::FormatAt {
            offset: 4,
            reason: format!("unsupported checkpoint version {version}"),
        });
    }
    let n = cur.u32()?;
    if n > bytes.len() / 4 {
        return Err(Error::Format(format!("implausible layer count {n}")));
    }
    let widths = (0..n).map(|_| cur.u32()).collect::<Result<Vec<_>>>()?;
    let k = cur.u32()?;
    let spec = MlpSpec::new(widths).map_err(|e| Error::Format(e.to_string()))?;
    let expected = PacfParams::zeros(spec.clone(), 0).num_values() + k;
    let payload = &bytes[cur.pos..];
    if payload.len() != expected * 8 {
        return Err(Error::FormatAt {
            offset: cur.pos as u64,
            reason: format!("payload is {} bytes, header declares {}", payload.len(), expected * 8),
        });
    }
    let values: Vec<f64> = payload
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("chunk of 8")))
        .collect();
    PacfParams::from_flat(spec, k, &values).map_err(|e| Error::Format(e.to_string()))
}

pub fn write_params(params: &PacfParams, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_params(params))?;
    Ok(())
}

pub fn read_params(path: impl AsRef<Path>) -> Result<PacfParams> {
    decode_params(&fs::read(path)?)
}
