//! Forward and reverse-mode passes of the fusion operator.
//!
//! For each target with neighbor matrix `F'` (`K x D_i`):
//!
//! ```text
//! y_cc,k = MLP_cc(F'[k])          shared weights, one pass per slot
//! y_cc   = sum_k y_cc,k
//! y_a    = sum_k w_k * y_cc,k     K scalar weights, no bias
//! y_pool = max_k F'[k]            element-wise over the slot axis
//! y_o    = [y_cc | y_a | y_pool]  width 2 * D_o + D_i
//! ```

use rayon::prelude::*;

use super::params::{Dense, PacfParams};
use super::retrieval::NeighborFeatures;
use crate::error::{Error, Result};

/// Operator output, one row `[y_cc | y_a | y_pool]` per target.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedFeatures {
    d_o: usize,
    d_i: usize,
    data: Vec<f64>,
}

impl FusedFeatures {
    pub fn width(&self) -> usize {
        2 * self.d_o + self.d_i
    }

    pub fn d_o(&self) -> usize {
        self.d_o
    }

    pub fn d_i(&self) -> usize {
        self.d_i
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.width()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, t: usize) -> &[f64] {
        let w = self.width();
        &self.data[t * w..(t + 1) * w]
    }

    pub fn y_cc(&self, t: usize) -> &[f64] {
        &self.row(t)[..self.d_o]
    }

    pub fn y_a(&self, t: usize) -> &[f64] {
        &self.row(t)[self.d_o..2 * self.d_o]
    }

    pub fn y_pool(&self, t: usize) -> &[f64] {
        &self.row(t)[2 * self.d_o..]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }
}

/// Intermediates kept by [`pacf_forward_cached`] for the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    k: usize,
    d_i: usize,
    widths: Vec<usize>,
    /// Per target and slot: every layer's input followed by the MLP output.
    trace: Vec<f64>,
    /// Per target and input column: slot holding the pooled maximum.
    argmax: Vec<usize>,
}

impl ForwardCache {
    fn stride(&self) -> usize {
        self.widths.iter().sum()
    }

    pub fn targets(&self) -> usize {
        self.argmax.len() / self.d_i
    }

    /// Pooling slot chosen for each input column of target `t`.
    pub fn argmax(&self, t: usize) -> &[usize] {
        &self.argmax[t * self.d_i..(t + 1) * self.d_i]
    }
}

fn check_shapes(nf: &NeighborFeatures, params: &PacfParams) -> Result<()> {
    let spec = params.spec();
    if nf.d_i() != spec.input_width() {
        return Err(Error::ShapeMismatch {
            dim: "D_i",
            expected: spec.input_width(),
            found: nf.d_i(),
        });
    }
    if nf.k() != params.k() {
        return Err(Error::ShapeMismatch {
            dim: "K",
            expected: params.k(),
            found: nf.k(),
        });
    }
    Ok(())
}

/// Runs the MLP on one row, writing each layer's input and the final output
/// into `trace` (laid out as `widths`).
fn mlp_trace(layers: &[Dense], row: &[f64], trace: &mut [f64]) {
    trace[..row.len()].copy_from_slice(row);
    let mut offset = 0;
    let last = layers.len() - 1;
    for (l, layer) in layers.iter().enumerate() {
        let (input, rest) = trace[offset..].split_at_mut(layer.inputs);
        let out = &mut rest[..layer.outputs];
        layer.forward(input, out);
        if l != last {
            for v in out.iter_mut() {
                *v = v.max(0.0);
            }
        }
        offset += layer.inputs;
    }
}

fn forward_target(
    params: &PacfParams,
    f: &[f64],
    d_i: usize,
    widths: &[usize],
    out: &mut [f64],
    trace: &mut [f64],
    argmax: &mut [usize],
) {
    let k = params.k();
    let d_o = *widths.last().expect("non-empty widths");
    let stride: usize = widths.iter().sum();
    let (y_cc, rest) = out.split_at_mut(d_o);
    let (y_a, y_pool) = rest.split_at_mut(d_o);
    y_a.fill(0.0);
    for slot in 0..k {
        let row = &f[slot * d_i..(slot + 1) * d_i];
        let tr = &mut trace[slot * stride..(slot + 1) * stride];
        mlp_trace(&params.layers, row, tr);
        let y = &tr[stride - d_o..];
        let w = params.aggr[slot];
        for c in 0..d_o {
            y_a[c] += w * y[c];
        }
    }
    // Summing in value order makes y_cc bitwise independent of slot order.
    let mut column = Vec::with_capacity(k);
    for c in 0..d_o {
        column.clear();
        column.extend((0..k).map(|slot| trace[slot * stride + stride - d_o + c]));
        column.sort_unstable_by(f64::total_cmp);
        y_cc[c] = column.iter().sum();
    }
    for c in 0..d_i {
        let mut best = 0;
        let mut value = f[c];
        for slot in 1..k {
            let v = f[slot * d_i + c];
            // strict comparison keeps the lowest slot on ties
            if v > value {
                value = v;
                best = slot;
            }
        }
        y_pool[c] = value;
        argmax[c] = best;
    }
}

fn run_forward(nf: &NeighborFeatures, params: &PacfParams) -> Result<(FusedFeatures, ForwardCache)> {
    check_shapes(nf, params)?;
    let (k, d_i) = (nf.k(), nf.d_i());
    let widths = params.spec().widths().to_vec();
    let d_o = params.spec().output_width();
    let n = nf.targets();
    let width = 2 * d_o + d_i;
    let stride: usize = widths.iter().sum();
    let mut data = vec![0.0; n * width];
    let mut trace = vec![0.0; n * k * stride];
    let mut argmax = vec![0usize; n * d_i];
    data.par_chunks_mut(width)
        .zip(trace.par_chunks_mut(k * stride))
        .zip(argmax.par_chunks_mut(d_i))
        .enumerate()
        .for_each(|(t, ((out, tr), am))| forward_target(params, nf.matrix(t), d_i, &widths, out, tr, am));
    Ok((
        FusedFeatures { d_o, d_i, data },
        ForwardCache {
            k,
            d_i,
            widths,
            trace,
            argmax,
        },
    ))
}

/// Forward pass without keeping intermediates.
pub fn pacf_forward(nf: &NeighborFeatures, params: &PacfParams) -> Result<FusedFeatures> {
    check_shapes(nf, params)?;
    let (k, d_i) = (nf.k(), nf.d_i());
    let widths = params.spec().widths();
    let d_o = params.spec().output_width();
    let width = 2 * d_o + d_i;
    let stride: usize = widths.iter().sum();
    let mut data = vec![0.0; nf.targets() * width];
    data.par_chunks_mut(width).enumerate().for_each_init(
        || (vec![0.0; k * stride], vec![0usize; d_i]),
        |(trace, argmax), (t, out)| forward_target(params, nf.matrix(t), d_i, widths, out, trace, argmax),
    );
    Ok(FusedFeatures { d_o, d_i, data })
}

pub fn pacf_forward_cached(nf: &NeighborFeatures, params: &PacfParams) -> Result<(FusedFeatures, ForwardCache)> {
    run_forward(nf, params)
}

/// Gradients of a scalar objective with respect to the parameters and to `F'`.
#[derive(Clone, Debug, PartialEq)]
pub struct PacfGradients {
    pub params: PacfParams,
    /// Same layout as [`NeighborFeatures::data`].
    pub input: Vec<f64>,
}

/// Backpropagates `upstream` (one `2 * D_o + D_i` row per target) through the
/// operator. Max-pooling routes each column's gradient to its argmax slot.
pub fn pacf_backward(cache: &ForwardCache, params: &PacfParams, upstream: &[f64]) -> Result<PacfGradients> {
    let widths = params.spec().widths();
    if widths != cache.widths.as_slice() {
        return Err(Error::ShapeMismatch {
            dim: "MLP layer count",
            expected: cache.widths.len(),
            found: widths.len(),
        });
    }
    if params.k() != cache.k {
        return Err(Error::ShapeMismatch {
            dim: "K",
            expected: cache.k,
            found: params.k(),
        });
    }
    let (k, d_i) = (cache.k, cache.d_i);
    let d_o = params.spec().output_width();
    let width = 2 * d_o + d_i;
    let n = cache.targets();
    if upstream.len() != n * width {
        return Err(Error::ShapeMismatch {
            dim: "upstream gradient length",
            expected: n * width,
            found: upstream.len(),
        });
    }
    let stride = cache.stride();
    let max_width = widths.iter().copied().max().unwrap_or(0);
    let mut grads = PacfParams::zeros(params.spec().clone(), k);
    let mut input = vec![0.0; n * k * d_i];
    let mut delta = vec![0.0; max_width];
    let mut delta_prev = vec![0.0; max_width];

    for t in 0..n {
        let g = &upstream[t * width..(t + 1) * width];
        let (g_cc, rest) = g.split_at(d_o);
        let (g_a, g_pool) = rest.split_at(d_o);
        for slot in 0..k {
            let tr = &cache.trace[(t * k + slot) * stride..(t * k + slot + 1) * stride];
            let y = &tr[stride - d_o..];
            grads.aggr[slot] += g_a.iter().zip(y).map(|(a, b)| a * b).sum::<f64>();
            let w = params.aggr[slot];
            for c in 0..d_o {
                delta[c] = g_cc[c] + w * g_a[c];
            }
            let dx = &mut input[(t * k + slot) * d_i..(t * k + slot + 1) * d_i];
            let mut offset = stride - d_o;
            for l in (0..params.layers.len()).rev() {
                let layer = &params.layers[l];
                let gl = &mut grads.layers[l];
                offset -= layer.inputs;
                let a = &tr[offset..offset + layer.inputs];
                for (o, &d) in delta[..layer.outputs].iter().enumerate() {
                    gl.bias[o] += d;
                    let gw = &mut gl.weight[o * layer.inputs..(o + 1) * layer.inputs];
                    for (gwi, ai) in gw.iter_mut().zip(a) {
                        *gwi += d * ai;
                    }
                }
                let back = &mut delta_prev[..layer.inputs];
                back.fill(0.0);
                for (o, &d) in delta[..layer.outputs].iter().enumerate() {
                    let row = &layer.weight[o * layer.inputs..(o + 1) * layer.inputs];
                    for (b, wi) in back.iter_mut().zip(row) {
                        *b += wi * d;
                    }
                }
                if l == 0 {
                    for (x, b) in dx.iter_mut().zip(back.iter()) {
                        *x += b;
                    }
                } else {
                    // rectifier: the cached input is the previous layer's activation
                    for (i, b) in back.iter().enumerate() {
                        delta[i] = if a[i] > 0.0 { *b } else { 0.0 };
                    }
                }
            }
        }
        let am = cache.argmax(t);
        for c in 0..d_i {
            input[(t * k + am[c]) * d_i + c] += g_pool[c];
        }
    }
    Ok(PacfGradients { params: grads, input })
}
