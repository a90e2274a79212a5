//! The `detkit` command line: one subcommand per pipeline stage.
//!
//! Exit codes: 0 on success, 1 for usage errors, 2 for unreadable or
//! invalid input data. Logs go to stderr; stdout only carries
//! machine-readable output.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use image::Rgb;
use rayon::prelude::*;

use crate::augment::{self, AugSample};
use crate::data_io::{
    self, AnnotatedImage, Dataset, ImageDims, ImageRecord, PipelineConfig, ResultSet,
};
use crate::error::Error;
use crate::eval::{self, EvalParams, EvalReport};
use crate::fusion::{self, ConfType, FusionParams};
use crate::geometry::{BBox, Detection};
use crate::mim_mask::{self, MaskSpec, RegionMode};
use crate::tta::{self, ViewSet, ViewTransform};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;

/// Environment variable overriding the configured seed.
pub const SEED_ENV: &str = "DETKIT_SEED";

#[derive(Debug, Parser)]
#[command(
    name = "detkit",
    version,
    about = "Detection augmentation, masking, TTA, fusion and evaluation toolkit"
)]
pub struct Cli {
    /// Worker threads [default: available cores]
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    /// JSON pipeline config; explicit flags take precedence
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write randomly augmented training images and their annotations
    Augment(AugmentArgs),
    /// Sample a patch mask for masked image modeling
    Mask(MaskArgs),
    /// Map per-view TTA results back to the original images and fuse them
    TtaMerge(TtaMergeArgs),
    /// Fuse several models' results with weighted box fusion
    Fuse(FuseArgs),
    /// Rank evaluation reports and keep the top k models
    Select(SelectArgs),
    /// Evaluate results against COCO annotations
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct AugmentArgs {
    /// COCO annotation file
    #[arg(long)]
    pub annotations: PathBuf,
    /// Directory holding the annotated images
    #[arg(long)]
    pub images: PathBuf,
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
    /// Number of augmented samples [default: one per image]
    #[arg(long)]
    pub n: Option<usize>,
    /// Output side length [default: 640]
    #[arg(long)]
    pub size: Option<u32>,
    /// Mosaic probability [default: 1]
    #[arg(long)]
    pub mosaic_prob: Option<f64>,
    /// Mixup probability [default: 0.5]
    #[arg(long)]
    pub mixup_prob: Option<f64>,
    /// Mixup Beta(alpha, alpha) parameter [default: 32]
    #[arg(long)]
    pub mixup_alpha: Option<f64>,
    /// RNG seed [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct MaskArgs {
    /// Input image (PNG or JPEG)
    #[arg(long)]
    pub image: PathBuf,
    /// Fraction of masked patches [default: 0.6]
    #[arg(long)]
    pub ratio: Option<f64>,
    /// Patch side in pixels [default: 32]
    #[arg(long)]
    pub patch: Option<u32>,
    /// Number of hierarchical visibility scales [default: 4]
    #[arg(long)]
    pub scales: Option<u32>,
    /// whole: mask the full image; cut: crop to --region first
    #[arg(long, default_value = "whole")]
    pub mode: String,
    /// Normalized crop region x1,y1,x2,y2 for --mode cut
    #[arg(long, default_value = "0,0,1,1")]
    pub region: String,
    /// RNG seed [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output plan JSON
    #[arg(long)]
    pub out: PathBuf,
    /// Optional PNG with masked patches painted gray
    #[arg(long)]
    pub viz: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FusionFlags {
    /// Cluster IoU threshold [default: 0.55]
    #[arg(long)]
    pub iou: Option<f64>,
    /// Ignore detections scoring below this [default: 0]
    #[arg(long)]
    pub skip: Option<f64>,
    /// Cluster confidence: avg or max [default: avg]
    #[arg(long)]
    pub conf: Option<ConfType>,
    /// Model id written into the fused results
    #[arg(long, default_value_t = 0)]
    pub model_id: u32,
}

#[derive(Debug, Args)]
pub struct TtaMergeArgs {
    /// One COCO results file per view, in view order
    #[arg(long, required = true, num_args = 1..)]
    pub results: Vec<PathBuf>,
    /// JSON list of views [default: identity, hflip, scale 1.25, scale 0.75]
    #[arg(long)]
    pub views: Option<PathBuf>,
    /// COCO annotations giving the original image sizes
    #[arg(long)]
    pub annotations: PathBuf,
    /// Output results file in original coordinates
    #[arg(long)]
    pub out: PathBuf,
    /// Concatenate the inverted views instead of fusing them
    #[arg(long)]
    pub concat: bool,
    #[command(flatten)]
    pub fusion: FusionFlags,
}

#[derive(Debug, Args)]
pub struct FuseArgs {
    /// COCO results files, one per model
    #[arg(long, required = true, num_args = 1..)]
    pub results: Vec<PathBuf>,
    /// COCO annotations giving the image sizes
    #[arg(long)]
    pub annotations: PathBuf,
    /// Comma-separated positive model weights [default: all 1]
    #[arg(long)]
    pub weights: Option<String>,
    /// Output results file
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub fusion: FusionFlags,
}

#[derive(Debug, Args)]
pub struct SelectArgs {
    /// Directory of evaluation report JSON files
    #[arg(long)]
    pub reports: PathBuf,
    /// Number of models to keep [default: 30]
    #[arg(long)]
    pub k: Option<usize>,
    /// Output text file, one model id per line
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// COCO results file
    #[arg(long)]
    pub results: PathBuf,
    /// COCO annotation file
    #[arg(long)]
    pub annotations: PathBuf,
    /// Output report JSON
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Keep at most this many detections per image and class (strict COCO: 100)
    #[arg(long)]
    pub max_dets: Option<usize>,
    /// Model id recorded in the report
    #[arg(long, default_value_t = 0)]
    pub model_id: u32,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Data(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Data(e)
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

/// Parses `argv` (including the program name), runs the subcommand and
/// returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(cli) {
        Ok(()) => EXIT_OK,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            EXIT_USAGE
        }
        Err(CliError::Data(e)) => {
            eprintln!("error: {e}");
            EXIT_DATA
        }
    }
}

fn load_config(cli: &Cli) -> CliResult<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Ok(raw) = std::env::var(SEED_ENV) {
        cfg.seed = raw
            .trim()
            .parse()
            .map_err(|_| usage(format!("{SEED_ENV}={raw:?} is not an unsigned integer")))?;
    }
    Ok(cfg)
}

fn execute(cli: Cli) -> CliResult<()> {
    let cfg = load_config(&cli)?;
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(usage("--threads must be at least 1"));
        }
        builder = builder.num_threads(n);
    }
    let pool = builder
        .build()
        .map_err(|e| usage(format!("cannot start thread pool: {e}")))?;
    pool.install(|| match &cli.command {
        Command::Augment(a) => run_augment(a, cfg),
        Command::Mask(a) => run_mask(a, cfg),
        Command::TtaMerge(a) => run_tta_merge(a, &cfg),
        Command::Fuse(a) => run_fuse(a, &cfg),
        Command::Select(a) => run_select(a, &cfg),
        Command::Eval(a) => run_eval(a),
    })
}

fn create_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn write_file(path: &Path, contents: &str) -> CliResult<()> {
    fs::write(path, contents).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn checked(cfg: PipelineConfig) -> CliResult<PipelineConfig> {
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    Ok(cfg)
}

fn run_augment(a: &AugmentArgs, mut cfg: PipelineConfig) -> CliResult<()> {
    if let Some(v) = a.size {
        cfg.aug_size = v;
    }
    if let Some(v) = a.mosaic_prob {
        cfg.mosaic_prob = v;
    }
    if let Some(v) = a.mixup_prob {
        cfg.mixup_prob = v;
    }
    if let Some(v) = a.mixup_alpha {
        cfg.mixup_alpha = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    let cfg = checked(cfg)?;

    let dataset = data_io::load_annotations(&a.annotations)?;
    if dataset.images.is_empty() {
        return Err(CliError::Data(Error::InvalidArgument(format!(
            "{} lists no images",
            a.annotations.display()
        ))));
    }
    let pool: Vec<AugSample> = dataset
        .images
        .par_iter()
        .map(|rec| AnnotatedImage::load(rec, &a.images).map(AugSample::from))
        .collect::<Result<_, _>>()?;
    let n = a.n.unwrap_or(pool.len());
    log::info!("augmenting {n} samples from {} images", pool.len());

    let samples: Vec<AugSample> = (0..n)
        .into_par_iter()
        .map(|i| {
            let index = i % pool.len();
            let image_id = dataset.images[index].id;
            let mut rng = augment::rng_for(cfg.seed, image_id, (i / pool.len()) as u64);
            augment::augment_random(&pool, index, &cfg, &mut rng)
        })
        .collect::<Result<_, _>>()?;

    create_dir(&a.out)?;
    let mut out = Dataset {
        images: Vec::with_capacity(n),
        categories: dataset.categories.clone(),
        clipped: 0,
    };
    for (i, s) in samples.iter().enumerate() {
        let file_name = format!("aug_{i:05}.png");
        data_io::save_png(&s.image, &a.out.join(&file_name))?;
        out.images.push(ImageRecord {
            id: i as u64 + 1,
            file_name,
            width: s.image.width(),
            height: s.image.height(),
            truths: s.boxes.clone(),
        });
    }
    let ann_path = a.out.join("annotations.json");
    data_io::save_annotations(&out, &ann_path)?;
    log::info!("wrote {n} images and {}", ann_path.display());
    Ok(())
}

fn parse_region(raw: &str) -> CliResult<BBox> {
    let parts: Vec<f64> = raw
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| {
            usage(format!(
                "--region {raw:?} must be four comma-separated numbers"
            ))
        })?;
    let [x1, y1, x2, y2] = parts[..] else {
        return Err(usage(format!("--region {raw:?} must have four values")));
    };
    let b = BBox::new(x1, y1, x2, y2);
    if !b.is_valid() {
        return Err(usage(format!(
            "--region {raw:?} is not a box inside [0, 1]"
        )));
    }
    Ok(b)
}

fn run_mask(a: &MaskArgs, mut cfg: PipelineConfig) -> CliResult<()> {
    if let Some(v) = a.ratio {
        cfg.mask_ratio = v;
    }
    if let Some(v) = a.patch {
        cfg.patch_size = v;
    }
    if let Some(v) = a.scales {
        cfg.mask_scales = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    let cfg = checked(cfg)?;
    let mode: RegionMode = a.mode.parse().map_err(|e: Error| usage(e.to_string()))?;
    let region = parse_region(&a.region)?;

    let image = data_io::load_image(&a.image)?;
    let spec = MaskSpec {
        patch_size: cfg.patch_size,
        ratio: cfg.mask_ratio,
        num_scales: cfg.mask_scales,
    };
    let mut rng = augment::rng_for(cfg.seed, 0, 0);
    let plan = mim_mask::restrict_to_region(
        image.width(),
        image.height(),
        &spec,
        &region,
        mode,
        &mut rng,
    )?;
    write_file(&a.out, &plan.to_json())?;
    if let Some(viz) = &a.viz {
        let painted = mim_mask::paint_masked(&image, &plan, Rgb([128, 128, 128]));
        data_io::save_png(&painted, viz)?;
    }
    log::info!(
        "masked {} of {} patches ({}x{} grid)",
        plan.masked.len(),
        plan.cells(),
        plan.grid_w,
        plan.grid_h
    );
    Ok(())
}

fn fusion_params(
    flags: &FusionFlags,
    cfg: &PipelineConfig,
    weights: Option<Vec<f64>>,
) -> CliResult<FusionParams> {
    let p = FusionParams {
        iou_thr: flags.iou.unwrap_or(cfg.wbf_iou_thr),
        skip_thr: flags.skip.unwrap_or(cfg.wbf_skip_thr),
        weights,
        conf_type: flags.conf.unwrap_or(cfg.wbf_conf_type),
        output_model_id: flags.model_id,
    };
    if !(p.iou_thr > 0.0 && p.iou_thr <= 1.0) {
        return Err(usage(format!("--iou {} must lie in (0, 1]", p.iou_thr)));
    }
    if !(0.0..=1.0).contains(&p.skip_thr) {
        return Err(usage(format!("--skip {} must lie in [0, 1]", p.skip_thr)));
    }
    Ok(p)
}

fn load_views(path: &Path) -> CliResult<Vec<ViewTransform>> {
    let raw = fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let views: Vec<ViewTransform> = serde_json::from_str(&raw).map_err(|e| Error::Json {
        context: path.display().to_string(),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    Ok(views)
}

fn run_tta_merge(a: &TtaMergeArgs, cfg: &PipelineConfig) -> CliResult<()> {
    let views = match &a.views {
        Some(path) => load_views(path)?,
        None => cfg.tta_views.clone(),
    };
    let views = ViewSet::new(views)?;
    if views.len() != a.results.len() {
        return Err(usage(format!(
            "{} views but {} result files",
            views.len(),
            a.results.len()
        )));
    }
    let params = fusion_params(&a.fusion, cfg, None)?;
    let dataset = data_io::load_annotations(&a.annotations)?;
    let dims = dataset.dims();

    let mut records = std::collections::BTreeMap::new();
    for im in &dataset.images {
        records.insert(im.id, views.records(im.width, im.height)?);
    }
    let mut per_view = Vec::with_capacity(views.len());
    for (v, path) in a.results.iter().enumerate() {
        let view_dims: ImageDims = records
            .iter()
            .map(|(id, recs)| (*id, recs[v].view_size()))
            .collect();
        per_view.push(data_io::load_results(path, v as u32, &view_dims)?.by_image());
    }

    let merged: Vec<(u64, Vec<Detection>)> = records
        .par_iter()
        .map(|(id, recs)| {
            let lists: Vec<Vec<Detection>> = per_view
                .iter()
                .map(|g| g.get(id).cloned().unwrap_or_default())
                .collect();
            let inverted = tta::invert_detections(&lists, recs)?;
            if a.concat {
                return Ok((*id, inverted));
            }
            let mut by_view = vec![Vec::new(); recs.len()];
            for d in inverted {
                by_view[d.model_id as usize].push(d);
            }
            fusion::wbf(&by_view, &params).map(|dets| (*id, dets))
        })
        .collect::<Result<_, Error>>()?;

    let mut out = ResultSet::new(params.output_model_id);
    for (id, dets) in merged {
        for d in dets {
            out.push(id, d);
        }
    }
    data_io::save_results(&out, &a.out, &dims)?;
    log::info!("merged {} views into {} detections", views.len(), out.len());
    Ok(())
}

fn parse_weights(raw: &str, expected: usize) -> CliResult<Vec<f64>> {
    let weights: Vec<f64> = raw
        .split(',')
        .map(|w| w.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| usage(format!("--weights {raw:?} must be comma-separated numbers")))?;
    if weights.len() != expected {
        return Err(usage(format!(
            "--weights has {} values for {expected} result files",
            weights.len()
        )));
    }
    if weights.iter().any(|w| !(*w > 0.0 && w.is_finite())) {
        return Err(usage("--weights must all be positive"));
    }
    Ok(weights)
}

fn run_fuse(a: &FuseArgs, cfg: &PipelineConfig) -> CliResult<()> {
    let weights = a
        .weights
        .as_deref()
        .map(|w| parse_weights(w, a.results.len()))
        .transpose()?;
    let params = fusion_params(&a.fusion, cfg, weights)?;
    let dataset = data_io::load_annotations(&a.annotations)?;
    let dims = dataset.dims();
    let sets: Vec<ResultSet> = a
        .results
        .iter()
        .enumerate()
        .map(|(i, path)| data_io::load_results(path, i as u32, &dims))
        .collect::<Result<_, _>>()?;
    let fused = fusion::wbf_result_sets(&sets, &params)?;
    data_io::save_results(&fused, &a.out, &dims)?;
    log::info!(
        "fused {} models into {} detections",
        sets.len(),
        fused.len()
    );
    Ok(())
}

fn run_select(a: &SelectArgs, cfg: &PipelineConfig) -> CliResult<()> {
    let k = a.k.unwrap_or(cfg.top_k);
    if k == 0 {
        return Err(usage("--k must be at least 1"));
    }
    let entries = fs::read_dir(&a.reports).map_err(|e| Error::Io {
        path: a.reports.clone(),
        source: e,
    })?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();

    let mut reports = Vec::with_capacity(paths.len());
    for path in &paths {
        let raw = fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.clone(),
            source: e,
        })?;
        let report: EvalReport = serde_json::from_str(&raw).map_err(|e| Error::Json {
            context: path.display().to_string(),
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        if reports.iter().any(|(id, _)| *id == report.model_id) {
            return Err(CliError::Data(Error::InvalidArgument(format!(
                "{}: duplicate model id {}",
                path.display(),
                report.model_id
            ))));
        }
        reports.push((report.model_id, report));
    }
    let chosen = fusion::rank_and_select(&reports, k)?;
    let text: String = chosen.iter().map(|id| format!("{id}\n")).collect();
    write_file(&a.out, &text)?;
    print!("{text}");
    log::info!("selected {} of {} models", chosen.len(), reports.len());
    Ok(())
}

fn run_eval(a: &EvalArgs) -> CliResult<()> {
    let dataset = data_io::load_annotations(&a.annotations)?;
    let results = data_io::load_results(&a.results, a.model_id, &dataset.dims())?;
    let report = eval::evaluate(
        &results,
        &dataset,
        &EvalParams {
            max_dets: a.max_dets,
        },
    )?;
    if let Some(out) = &a.out {
        let json = serde_json::to_string_pretty(&report).expect("report serializes");
        write_file(out, &json)?;
    }
    print!("{}", report.summary_table());
    Ok(())
}
