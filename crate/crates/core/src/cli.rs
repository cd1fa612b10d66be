//! The `pacf` command line: projection, neighbor tables, fusion, mask
//! generation, gradient checks and BEV rendering over KITTI-format files.

use std::ffi::OsString;
use std::fmt;
use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Error;
use crate::gradcheck::{self, GradCheckConfig};
use crate::kitti_io::{
    encode_ppm, read_calib, read_labels, read_map_any, read_pgm, read_velodyne, write_feature_map, CalibrationSet,
};
use crate::pacf_op::{
    fuse_cloud, read_params, retrieve_features, write_params, FuseConfig, FusionMode, MlpSpec, PacfParams, Sampling,
};
use crate::projection::{
    filter_frustum, filter_region, project_points, subsample, subsample_indices, ImageSize, RegionOfInterest,
};
use crate::spatial_index::{knn_brute, KdTree, DEFAULT_LEAF_SIZE};
use crate::supervision::{
    box_footprint_mask, dont_care_regions, focal_loss, label_points, make_sparse_mask_with, total_loss, ClassFilter,
    FocalLossConfig, MaskOptions, PointLabel, SparseMask,
};
use crate::synthetic::synthetic_frame;
use crate::types::{fusion_dims, FeatureMap, ObjectClass};

/// Meters per BEV pixel.
pub const BEV_RESOLUTION: f64 = 0.1;

#[derive(Debug, Parser)]
#[command(name = "pacf", version, about = "Point-wise camera/LIDAR feature fusion toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Project LIDAR points onto the image plane (CSV on stdout).
    Project(ProjectArgs),
    /// K-nearest-neighbor table (CSV on stdout).
    Knn(KnnArgs),
    /// Fuse image semantics into a sampled point cloud.
    Fuse(FuseArgs),
    /// Per-point labels and the sparse image mask they induce.
    Maskgen(MaskgenArgs),
    /// Compare analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
    /// Evaluate the focal loss of a prediction map against a mask.
    Loss(LossArgs),
    /// Bird's-eye raster colored by each point's retrieved semantic value.
    BevRender(BevArgs),
    /// Write the built-in synthetic frame.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct ProjectArgs {
    #[arg(long)]
    pub velodyne: PathBuf,
    #[arg(long)]
    pub calib: PathBuf,
    /// `HEIGHTxWIDTH`
    #[arg(long, default_value = "376x1248", value_parser = parse_image_size)]
    pub image_size: ImageSize,
}

#[derive(Debug, Args)]
pub struct KnnArgs {
    #[arg(long)]
    pub velodyne: PathBuf,
    #[arg(long, default_value_t = 3)]
    pub k: usize,
    /// Search radius in meters, `inf` for unbounded.
    #[arg(long, default_value = "inf", value_parser = parse_radius)]
    pub dist: f64,
    /// Query this many random points instead of all of them.
    #[arg(long)]
    pub targets: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = DEFAULT_LEAF_SIZE)]
    pub leaf_size: usize,
    /// Check every row against an exhaustive scan.
    #[arg(long)]
    pub verify: bool,
}

#[derive(Debug, Args)]
pub struct FuseArgs {
    #[arg(long)]
    pub velodyne: PathBuf,
    #[arg(long)]
    pub calib: PathBuf,
    /// Image feature map: PACF container or P5 PGM.
    #[arg(long)]
    pub features: PathBuf,
    /// Output container with one row per sampled point.
    #[arg(long)]
    pub out: PathBuf,
    /// CSV mapping output rows to input point indices.
    #[arg(long)]
    pub index_out: Option<PathBuf>,
    /// Operator checkpoint; freshly initialized from `--seed` when absent.
    #[arg(long)]
    pub params: Option<PathBuf>,
    #[arg(long)]
    pub params_out: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    pub k: usize,
    #[arg(long, default_value = "inf", value_parser = parse_radius)]
    pub dist: f64,
    #[arg(long, default_value_t = 32)]
    pub dout: usize,
    /// Hidden layer widths, e.g. `64,64`.
    #[arg(long, value_parser = parse_widths)]
    pub mlp: Option<Widths>,
    #[arg(long, default_value = "v1")]
    pub mode: FusionMode,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// `x0,x1,y0,y1,z0,z1` in the LIDAR frame.
    #[arg(long, default_value = "0,70.4,-40,40,-1,3", value_parser = parse_roi)]
    pub roi: RegionOfInterest,
    #[arg(long, default_value_t = 16384)]
    pub n_sample: usize,
    #[arg(long)]
    pub include_reflectance: bool,
    #[arg(long)]
    pub bilinear: bool,
    /// Recompute the neighborhoods by exhaustive scan and compare.
    #[arg(long)]
    pub verify: bool,
}

#[derive(Debug, Args)]
pub struct MaskgenArgs {
    #[arg(long)]
    pub velodyne: PathBuf,
    #[arg(long)]
    pub calib: PathBuf,
    #[arg(long)]
    pub labels: PathBuf,
    #[arg(long, default_value = "376x1248", value_parser = parse_image_size)]
    pub image_size: ImageSize,
    /// Sparse mask as PGM: 0 unsupervised, 128 background, 255 foreground.
    #[arg(long)]
    pub mask_out: PathBuf,
    /// Per-point label CSV.
    #[arg(long)]
    pub labels_out: Option<PathBuf>,
    /// Dense box-footprint map as a PACF container.
    #[arg(long)]
    pub footprint_out: Option<PathBuf>,
    /// Meters added to every box side before the containment test.
    #[arg(long, default_value_t = 0.0)]
    pub margin: f64,
    /// Comma-separated classes counted as foreground; all objects by default.
    #[arg(long, value_delimiter = ',')]
    pub classes: Vec<String>,
    /// Leave DontCare regions unsupervised.
    #[arg(long)]
    pub ignore_dontcare: bool,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 100)]
    pub instances: usize,
    #[arg(long, default_value_t = 3)]
    pub k: usize,
    #[arg(long, default_value_t = 4)]
    pub dout: usize,
    #[arg(long, value_parser = parse_widths)]
    pub mlp: Option<Widths>,
    #[arg(long, default_value_t = 2)]
    pub c_seg: usize,
    #[arg(long, default_value_t = 3)]
    pub c_lidar: usize,
}

#[derive(Debug, Args)]
pub struct LossArgs {
    /// Foreground probabilities, channel 0 of a PACF container or a PGM.
    #[arg(long)]
    pub predictions: PathBuf,
    /// Sparse mask PGM as written by `maskgen`.
    #[arg(long)]
    pub mask: PathBuf,
    #[arg(long, default_value_t = 0.25)]
    pub alpha: f64,
    #[arg(long, default_value_t = 2.0)]
    pub gamma: f64,
    #[arg(long, default_value_t = 1.0)]
    pub lambda: f64,
    /// Detection loss added to the weighted segmentation loss.
    #[arg(long, default_value_t = 0.0)]
    pub det_loss: f64,
}

#[derive(Debug, Args)]
pub struct BevArgs {
    #[arg(long)]
    pub velodyne: PathBuf,
    #[arg(long)]
    pub calib: PathBuf,
    /// Feature map or mask sampled at each point's pixel.
    #[arg(long)]
    pub map: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub channel: usize,
    #[arg(long, default_value = "0,70.4,-40,40,-1,3", value_parser = parse_roi)]
    pub roi: RegionOfInterest,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Widths(pub Vec<usize>);

fn parse_widths(s: &str) -> Result<Widths, String> {
    s.split(',')
        .map(|w| match w.trim().parse::<usize>() {
            Ok(0) | Err(_) => Err(format!("`{w}` is not a positive width")),
            Ok(v) => Ok(v),
        })
        .collect::<Result<Vec<_>, _>>()
        .map(Widths)
}

fn parse_image_size(s: &str) -> Result<ImageSize, String> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected HEIGHTxWIDTH, got `{s}`"))?;
    match (h.parse::<usize>(), w.parse::<usize>()) {
        (Ok(h), Ok(w)) if h > 0 && w > 0 => Ok(ImageSize::new(h, w)),
        _ => Err(format!("expected positive HEIGHTxWIDTH, got `{s}`")),
    }
}

fn parse_radius(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(d) if d > 0.0 => Ok(d),
        _ => Err(format!("radius must be positive or `inf`, got `{s}`")),
    }
}

fn parse_roi(s: &str) -> Result<RegionOfInterest, String> {
    let v = s
        .split(',')
        .map(|x| x.trim().parse::<f64>().map_err(|_| format!("`{x}` is not a number")))
        .collect::<Result<Vec<_>, _>>()?;
    if v.len() != 6 {
        return Err(format!("expected x0,x1,y0,y1,z0,z1, got {} values", v.len()));
    }
    RegionOfInterest::new((v[0], v[1]), (v[2], v[3]), (v[4], v[5])).map_err(|e| e.to_string())
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Run(Error),
    Verification(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Run(e) if e.is_format() => 2,
            CliError::Run(_) => 1,
            CliError::Verification(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(msg) => write!(f, "{msg}"),
            CliError::Run(e) => write!(f, "{e}"),
            CliError::Verification(msg) => write!(f, "verification failed: {msg}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Run(e)
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        CliError::Run(Error::Io(e))
    }
}

type CliResult<T = ()> = std::result::Result<T, CliError>;

/// Parses `args` (program name first), runs the command and returns the
/// process exit code. Errors go to stderr.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let mut out = BufWriter::new(io::stdout());
    let result = with_thread_limit(|| execute(&cli, &mut out)).and_then(|()| out.flush().map_err(CliError::from));
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("pacf: {e}");
            e.exit_code()
        }
    }
}

/// Runs `f` on a pool capped by `PACF_THREADS` when it is set.
fn with_thread_limit<R>(f: impl FnOnce() -> CliResult<R> + Send) -> CliResult<R>
where
    R: Send,
{
    let Ok(raw) = std::env::var("PACF_THREADS") else {
        return f();
    };
    let threads = match raw.trim().parse::<usize>() {
        Ok(n) if n > 0 => n,
        _ => {
            return Err(CliError::Usage(format!(
                "PACF_THREADS must be a positive integer, got `{raw}`"
            )))
        }
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::Usage(format!("cannot start {threads} worker threads: {e}")))?;
    pool.install(f)
}

pub fn execute(cli: &Cli, out: &mut dyn Write) -> CliResult {
    match &cli.command {
        Command::Project(a) => cmd_project(a, out),
        Command::Knn(a) => cmd_knn(a, out),
        Command::Fuse(a) => cmd_fuse(a, out),
        Command::Maskgen(a) => cmd_maskgen(a, out),
        Command::Gradcheck(a) => cmd_gradcheck(a, out),
        Command::Loss(a) => cmd_loss(a, out),
        Command::BevRender(a) => cmd_bev_render(a, out),
        Command::Synth(a) => {
            synthetic_frame(a.seed)?.write(&a.out)?;
            Ok(())
        }
    }
}

fn cmd_project(a: &ProjectArgs, out: &mut dyn Write) -> CliResult {
    let cloud = read_velodyne(&a.velodyne)?;
    let calib = read_calib(&a.calib)?;
    writeln!(out, "index,x,y,z,u,v,depth,valid")?;
    for (i, (p, px)) in cloud
        .points()
        .iter()
        .zip(project_points(&cloud, &calib, a.image_size))
        .enumerate()
    {
        writeln!(
            out,
            "{i},{},{},{},{},{},{},{}",
            p.x, p.y, p.z, px.u, px.v, px.depth, px.valid as u8
        )?;
    }
    Ok(())
}

fn cmd_knn(a: &KnnArgs, out: &mut dyn Write) -> CliResult {
    let cloud = read_velodyne(&a.velodyne)?;
    let tree = KdTree::build(cloud.points(), a.leaf_size)?;
    let targets: Vec<usize> = match a.targets {
        Some(n) if n < cloud.len() => subsample_indices(cloud.len(), n, a.seed)?,
        _ => (0..cloud.len()).collect(),
    };
    writeln!(out, "target,slot,neighbor,distance")?;
    let mut mismatches = 0usize;
    for &t in &targets {
        let set = tree.knn_of(t, a.k, a.dist)?;
        for (slot, (n, d)) in set.indices.iter().zip(&set.distances).enumerate() {
            writeln!(out, "{t},{slot},{n},{d}")?;
        }
        if a.verify {
            let oracle = knn_brute(cloud.points(), &cloud.points()[t], a.k, a.dist)?;
            if oracle.indices != set.indices || oracle.distances != set.distances {
                eprintln!(
                    "mismatch at target {t}: tree {:?}, exhaustive {:?}",
                    set.indices, oracle.indices
                );
                mismatches += 1;
            }
        }
    }
    if a.verify {
        log::info!("verified {} targets, {mismatches} mismatches", targets.len());
        if mismatches > 0 {
            return Err(CliError::Verification(format!(
                "{mismatches} of {} targets differ",
                targets.len()
            )));
        }
    }
    Ok(())
}

fn load_or_init_params(a: &FuseArgs, c_seg: usize, c_lidar: usize) -> CliResult<PacfParams> {
    let dims = fusion_dims(c_seg, c_lidar, a.dout)?;
    let spec = match &a.mlp {
        Some(Widths(hidden)) => MlpSpec::with_hidden(&dims, hidden)?,
        None => MlpSpec::default_for(&dims),
    };
    let params = match &a.params {
        Some(path) => {
            let params = read_params(path)?;
            if params.spec().input_width() != dims.d_i {
                return Err(Error::ShapeMismatch {
                    dim: "D_i",
                    expected: dims.d_i,
                    found: params.spec().input_width(),
                }
                .into());
            }
            params
        }
        None => PacfParams::init(spec, a.k, &mut ChaCha8Rng::seed_from_u64(a.seed))?,
    };
    Ok(params)
}

fn cmd_fuse(a: &FuseArgs, out: &mut dyn Write) -> CliResult {
    let cloud = read_velodyne(&a.velodyne)?;
    let calib = read_calib(&a.calib)?;
    let map = read_map_any(&a.features)?;
    let size = ImageSize::new(map.height(), map.width());

    let (roi_cloud, roi_idx) = filter_region(&cloud, &a.roi);
    let (frustum_cloud, frustum_idx) = filter_frustum(&roi_cloud, &calib, size);
    let (sampled, sample_idx) = subsample(&frustum_cloud, a.n_sample, a.seed)?;
    let source: Vec<usize> = sample_idx.iter().map(|&i| roi_idx[frustum_idx[i]]).collect();
    log::info!(
        "{} points, {} in region, {} in frustum, {} sampled",
        cloud.len(),
        roi_cloud.len(),
        frustum_cloud.len(),
        sampled.len()
    );

    let cfg = FuseConfig {
        k: a.k,
        radius: a.dist,
        mode: a.mode,
        sampling: if a.bilinear {
            Sampling::Bilinear
        } else {
            Sampling::Nearest
        },
        include_reflectance: a.include_reflectance,
        ..FuseConfig::default()
    };
    let params = match a.mode {
        FusionMode::V1 => {
            let c_lidar = sampled.lidar_features(a.include_reflectance).width();
            Some(load_or_init_params(a, map.channels(), c_lidar)?)
        }
        FusionMode::V2 => None,
    };
    if a.verify {
        verify_neighborhoods(&sampled, &cfg)?;
    }
    let fused = fuse_cloud(&sampled, &map, &calib, params.as_ref(), &cfg)?;
    let rows = fused.features().expect("fusion attaches features");
    let width = rows.width();
    let data: Vec<f32> = rows.data().iter().map(|&v| v as f32).collect();
    write_feature_map(&FeatureMap::new(sampled.len(), 1, width, data)?, &a.out)?;

    if let Some(path) = &a.index_out {
        let mut w = BufWriter::new(File::create(path)?);
        writeln!(w, "row,point")?;
        for (row, point) in source.iter().enumerate() {
            writeln!(w, "{row},{point}")?;
        }
        w.flush()?;
    }
    if let (Some(path), Some(params)) = (&a.params_out, &params) {
        write_params(params, path)?;
    }
    writeln!(out, "rows={} width={} mode={}", sampled.len(), width, a.mode)?;
    Ok(())
}

fn verify_neighborhoods(cloud: &crate::types::PointCloud, cfg: &FuseConfig) -> CliResult {
    let tree = KdTree::build(cloud.points(), cfg.leaf_size)?;
    let sets = tree.knn_all(cfg.k, cfg.radius)?;
    let mut mismatches = 0usize;
    for (i, set) in sets.iter().enumerate() {
        let oracle = knn_brute(cloud.points(), &cloud.points()[i], cfg.k, cfg.radius)?;
        if oracle.indices != set.indices || oracle.distances != set.distances {
            mismatches += 1;
        }
    }
    if mismatches > 0 {
        return Err(CliError::Verification(format!(
            "{mismatches} of {} neighborhoods differ",
            sets.len()
        )));
    }
    Ok(())
}

fn cmd_maskgen(a: &MaskgenArgs, out: &mut dyn Write) -> CliResult {
    let cloud = read_velodyne(&a.velodyne)?;
    let calib = read_calib(&a.calib)?;
    let boxes = read_labels(&a.labels)?;
    let filter = if a.classes.is_empty() {
        ClassFilter::AllObjects
    } else {
        ClassFilter::Only(a.classes.iter().map(|c| ObjectClass::from_name(c.trim())).collect())
    };
    if a.margin.is_nan() || a.margin < 0.0 {
        return Err(CliError::Usage(format!(
            "margin must be non-negative, got {}",
            a.margin
        )));
    }
    let labels = label_points(&cloud, &boxes, &calib, a.margin, &filter);
    let opts = MaskOptions {
        ignore_regions: if a.ignore_dontcare {
            dont_care_regions(&boxes)
        } else {
            Vec::new()
        },
    };
    let mask = make_sparse_mask_with(&cloud, &labels, &calib, a.image_size, &opts)?;
    fs::write(&a.mask_out, mask.to_pgm())?;

    if let Some(path) = &a.labels_out {
        let mut w = BufWriter::new(File::create(path)?);
        writeln!(w, "index,label")?;
        for (i, l) in labels.iter().enumerate() {
            writeln!(w, "{i},{}", (*l == PointLabel::Foreground) as u8)?;
        }
        w.flush()?;
    }
    if let Some(path) = &a.footprint_out {
        write_feature_map(&box_footprint_mask(&boxes, &calib, a.image_size, &filter)?, path)?;
    }
    let foreground = labels.iter().filter(|l| **l == PointLabel::Foreground).count();
    writeln!(
        out,
        "points={} foreground={} supervised_pixels={}",
        cloud.len(),
        foreground,
        mask.supervised_count()
    )?;
    Ok(())
}

fn cmd_gradcheck(a: &GradcheckArgs, out: &mut dyn Write) -> CliResult {
    let cfg = GradCheckConfig {
        instances: a.instances,
        k: a.k,
        c_seg: a.c_seg,
        c_lidar: a.c_lidar,
        d_o: a.dout,
        hidden: a.mlp.clone().map(|w| w.0).unwrap_or_default(),
        ..GradCheckConfig::default()
    };
    let report = gradcheck::run(&cfg, a.seed)?;
    writeln!(out, "pacf_params_max_rel_error={:.3e}", report.pacf_params_max_rel)?;
    writeln!(out, "pacf_input_max_rel_error={:.3e}", report.pacf_input_max_rel)?;
    writeln!(out, "focal_max_rel_error={:.3e}", report.focal_max_rel)?;
    writeln!(out, "values_checked={}", report.values_checked)?;
    if !report.passed() {
        return Err(CliError::Verification(format!(
            "relative gradient error exceeds {:e}",
            report.tolerance
        )));
    }
    Ok(())
}

fn cmd_loss(a: &LossArgs, out: &mut dyn Write) -> CliResult {
    let cfg = FocalLossConfig::new(a.alpha, a.gamma, a.lambda)?;
    let predictions = read_map_any(&a.predictions)?;
    let gray = read_pgm(&a.mask)?;
    let size = ImageSize::new(gray.height(), gray.width());
    let levels: Vec<u8> = gray.data().iter().map(|v| (v * 255.0).round() as u8).collect();
    let mask = SparseMask::from_gray(size, &levels)?;
    if (predictions.height(), predictions.width()) != (size.height, size.width) {
        return Err(Error::InvalidValue(format!(
            "predictions are {}x{} but the mask is {}x{}",
            predictions.height(),
            predictions.width(),
            size.height,
            size.width
        ))
        .into());
    }
    let p: Vec<f64> = (0..size.height * size.width)
        .map(|i| predictions.data()[i * predictions.channels()] as f64)
        .collect();
    let seg = focal_loss(&p, &mask, &cfg)?;
    writeln!(out, "focal_loss={}", seg.loss)?;
    writeln!(out, "supervised_pixels={}", seg.supervised)?;
    writeln!(out, "total_loss={}", total_loss(a.det_loss, seg.loss, cfg.lambda))?;
    Ok(())
}

/// Blue through green to red for `t` in `[0, 1]`.
fn heat(t: f64) -> [u8; 3] {
    let t = t.clamp(0.0, 1.0);
    let g = 1.0 - (2.0 * t - 1.0).abs();
    [
        (255.0 * t).round() as u8,
        (255.0 * g).round() as u8,
        (255.0 * (1.0 - t)).round() as u8,
    ]
}

/// Raster size of the BEV grid over `roi`: rows along x, columns along y.
pub fn bev_shape(roi: &RegionOfInterest) -> (usize, usize) {
    let rows = ((roi.x.1 - roi.x.0) / BEV_RESOLUTION).round() as usize;
    let cols = ((roi.y.1 - roi.y.0) / BEV_RESOLUTION).round() as usize;
    (rows.max(1), cols.max(1))
}

/// Renders points seen from above, far x at the top and +y on the left.
/// Cells keep the largest value of their points; points outside the camera
/// view are gray.
pub fn render_bev(
    cloud: &crate::types::PointCloud,
    calib: &CalibrationSet,
    map: &FeatureMap,
    channel: usize,
    roi: &RegionOfInterest,
) -> crate::Result<Vec<u8>> {
    if channel >= map.channels() {
        return Err(Error::InvalidValue(format!(
            "channel {channel} out of range for a {}-channel map",
            map.channels()
        )));
    }
    let (rows, cols) = bev_shape(roi);
    let (inside, _) = filter_region(cloud, roi);
    let pixels = project_points(&inside, calib, ImageSize::new(map.height(), map.width()));
    let semantic = retrieve_features(&pixels, map);

    let mut cell: Vec<Option<f64>> = vec![None; rows * cols];
    let mut seen = vec![false; rows * cols];
    for (i, p) in inside.points().iter().enumerate() {
        let r = (((roi.x.1 - p.x) / BEV_RESOLUTION).floor() as usize).min(rows - 1);
        let c = (((roi.y.1 - p.y) / BEV_RESOLUTION).floor() as usize).min(cols - 1);
        let at = r * cols + c;
        seen[at] = true;
        if semantic.is_valid(i) {
            let v = semantic.row(i)[channel];
            cell[at] = Some(cell[at].map_or(v, |old: f64| old.max(v)));
        }
    }
    let (lo, hi) = cell
        .iter()
        .flatten()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let span = hi - lo;
    let mut rgb = vec![0u8; rows * cols * 3];
    for (at, (value, seen)) in cell.iter().zip(&seen).enumerate() {
        let color = match value {
            Some(v) => heat(if span > 0.0 { (v - lo) / span } else { 1.0 }),
            None if *seen => [80, 80, 80],
            None => continue,
        };
        rgb[at * 3..at * 3 + 3].copy_from_slice(&color);
    }
    Ok(encode_ppm(cols, rows, &rgb))
}

fn cmd_bev_render(a: &BevArgs, out: &mut dyn Write) -> CliResult {
    let cloud = read_velodyne(&a.velodyne)?;
    let calib = read_calib(&a.calib)?;
    let map = read_map_any(&a.map)?;
    let ppm = render_bev(&cloud, &calib, &map, a.channel, &a.roi)?;
    fs::write(&a.out, ppm)?;
    let (rows, cols) = bev_shape(&a.roi);
    writeln!(out, "bev={}x{}", rows, cols)?;
    Ok(())
}
