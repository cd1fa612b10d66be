//! Central finite-difference checks of the analytic gradients, as run by
//! `pacf gradcheck`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::pacf_op::{pacf_backward, pacf_forward, pacf_forward_cached, MlpSpec, NeighborFeatures, PacfParams};
use crate::projection::ImageSize;
use crate::supervision::{focal_loss, FocalLossConfig, MaskState, SparseMask};
use crate::types::fusion_dims;

/// Pre-activations closer to zero than this make the rectifier kink reachable
/// by a finite-difference step, so such instances are redrawn.
const KINK_MARGIN: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckConfig {
    pub instances: usize,
    pub targets: usize,
    pub k: usize,
    pub c_seg: usize,
    pub c_lidar: usize,
    pub d_o: usize,
    /// Hidden widths of the MLP; empty for the default single hidden layer.
    pub hidden: Vec<usize>,
    pub step: f64,
    pub tolerance: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            instances: 100,
            targets: 2,
            k: 3,
            c_seg: 2,
            c_lidar: 3,
            d_o: 4,
            hidden: Vec::new(),
            step: 1e-5,
            tolerance: 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub pacf_params_max_rel: f64,
    pub pacf_input_max_rel: f64,
    pub focal_max_rel: f64,
    pub values_checked: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.pacf_params_max_rel < self.tolerance
            && self.pacf_input_max_rel < self.tolerance
            && self.focal_max_rel < self.tolerance
    }
}

/// `|a - b| / max(|a|, |b|, 1e-6)`; the floor keeps exact zeros comparable.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// True when no hidden pre-activation sits near zero and no pooled column has
/// a near tie, so the objective is smooth within one step.
fn smooth_instance(nf: &NeighborFeatures, params: &PacfParams) -> bool {
    let last = params.layers.len() - 1;
    for t in 0..nf.targets() {
        for slot in 0..nf.k() {
            let mut x = nf.row(t, slot).to_vec();
            for (l, layer) in params.layers.iter().enumerate() {
                let mut z = vec![0.0; layer.outputs];
                layer.forward(&x, &mut z);
                if l != last && z.iter().any(|v| v.abs() < KINK_MARGIN) {
                    return false;
                }
                x = z.into_iter().map(|v| v.max(0.0)).collect();
            }
        }
        for c in 0..nf.d_i() {
            let mut col: Vec<f64> = (0..nf.k()).map(|s| nf.row(t, s)[c]).collect();
            col.sort_by(|a, b| b.total_cmp(a));
            if col.len() > 1 && col[0] - col[1] < KINK_MARGIN {
                return false;
            }
        }
    }
    true
}

fn random_instance(cfg: &GradCheckConfig, rng: &mut ChaCha8Rng) -> Result<(NeighborFeatures, PacfParams, Vec<f64>)> {
    let dims = fusion_dims(cfg.c_seg, cfg.c_lidar, cfg.d_o)?;
    let spec = if cfg.hidden.is_empty() {
        MlpSpec::default_for(&dims)
    } else {
        MlpSpec::with_hidden(&dims, &cfg.hidden)?
    };
    loop {
        let mut params = PacfParams::init(spec.clone(), cfg.k, rng)?;
        for layer in &mut params.layers {
            for b in &mut layer.bias {
                *b = rng.gen_range(-0.5..0.5);
            }
        }
        for w in &mut params.aggr {
            *w = rng.gen_range(-1.0..1.0);
        }
        let data = (0..cfg.targets * cfg.k * dims.d_i)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        let nf = NeighborFeatures::from_data(cfg.k, dims.d_i, data)?;
        if !smooth_instance(&nf, &params) {
            continue;
        }
        let upstream = (0..cfg.targets * dims.output_width())
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        return Ok((nf, params, upstream));
    }
}

fn pacf_instance(cfg: &GradCheckConfig, rng: &mut ChaCha8Rng) -> Result<(f64, f64, usize)> {
    let (nf, params, upstream) = random_instance(cfg, rng)?;
    let (_, cache) = pacf_forward_cached(&nf, &params)?;
    let grads = pacf_backward(&cache, &params, &upstream)?;
    let h = cfg.step;

    let flat = params.to_flat();
    let analytic = grads.params.to_flat();
    let mut params_max = 0.0f64;
    for i in 0..flat.len() {
        let mut plus = flat.clone();
        plus[i] += h;
        let mut minus = flat.clone();
        minus[i] -= h;
        let jp = dot(
            &pacf_forward(&nf, &PacfParams::from_flat(params.spec().clone(), cfg.k, &plus)?)?.into_data(),
            &upstream,
        );
        let jm = dot(
            &pacf_forward(&nf, &PacfParams::from_flat(params.spec().clone(), cfg.k, &minus)?)?.into_data(),
            &upstream,
        );
        params_max = params_max.max(relative_error(analytic[i], (jp - jm) / (2.0 * h)));
    }

    let input = nf.data().to_vec();
    let mut input_max = 0.0f64;
    for i in 0..input.len() {
        let mut plus = input.clone();
        plus[i] += h;
        let mut minus = input.clone();
        minus[i] -= h;
        let jp = dot(
            &pacf_forward(&NeighborFeatures::from_data(cfg.k, nf.d_i(), plus)?, &params)?.into_data(),
            &upstream,
        );
        let jm = dot(
            &pacf_forward(&NeighborFeatures::from_data(cfg.k, nf.d_i(), minus)?, &params)?.into_data(),
            &upstream,
        );
        input_max = input_max.max(relative_error(grads.input[i], (jp - jm) / (2.0 * h)));
    }
    Ok((params_max, input_max, flat.len() + input.len()))
}

/// A random small mask with at least one supervised pixel, predictions and config.
pub fn random_focal_instance(rng: &mut ChaCha8Rng) -> Result<(SparseMask, Vec<f64>, FocalLossConfig)> {
    let size = ImageSize::new(rng.gen_range(1..6), rng.gen_range(1..6));
    let n = size.height * size.width;
    let mut states: Vec<MaskState> = (0..n)
        .map(|_| match rng.gen_range(0..3) {
            0 => MaskState::Unsupervised,
            1 => MaskState::Background,
            _ => MaskState::Foreground,
        })
        .collect();
    states[rng.gen_range(0..n)] = MaskState::Foreground;
    let predictions = (0..n).map(|_| rng.gen_range(0.02..0.98)).collect();
    let cfg = FocalLossConfig::new(rng.gen_range(0.05..0.95), rng.gen_range(0.0..4.0), 1.0)?;
    Ok((SparseMask::from_states(size, states)?, predictions, cfg))
}

fn focal_instance(step: f64, rng: &mut ChaCha8Rng) -> Result<(f64, usize)> {
    let (mask, predictions, cfg) = random_focal_instance(rng)?;
    let analytic = focal_loss(&predictions, &mask, &cfg)?.grad;
    let mut worst = 0.0f64;
    for i in 0..predictions.len() {
        let mut plus = predictions.clone();
        plus[i] += step;
        let mut minus = predictions.clone();
        minus[i] -= step;
        let numeric = (focal_loss(&plus, &mask, &cfg)?.loss - focal_loss(&minus, &mask, &cfg)?.loss) / (2.0 * step);
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    Ok((worst, predictions.len()))
}

pub fn run(cfg: &GradCheckConfig, seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport {
        pacf_params_max_rel: 0.0,
        pacf_input_max_rel: 0.0,
        focal_max_rel: 0.0,
        values_checked: 0,
        tolerance: cfg.tolerance,
    };
    for _ in 0..cfg.instances {
        let (p, i, n) = pacf_instance(cfg, &mut rng)?;
        report.pacf_params_max_rel = report.pacf_params_max_rel.max(p);
        report.pacf_input_max_rel = report.pacf_input_max_rel.max(i);
        report.values_checked += n;
        let (f, n) = focal_instance(cfg.step, &mut rng)?;
        report.focal_max_rel = report.focal_max_rel.max(f);
        report.values_checked += n;
    }
    Ok(report)
}
