use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Context;
use clap::Args;
use ffpe::checkpoint::Checkpoint;
use ffpe::config::RunConfig;
use ffpe::io;
use ffpe_core::inference::{translate_patches, translate_slide, InferenceParams, StageTimes};
use ffpe_core::wsi::{
    extract_patches, segment_tissue, stitch as stitch_patches, Polygon, SegmentationParams, SlideRecord, SlideSource,
    TilingParams,
};
use serde::Serialize;

use super::{emit, parse_rgb, require_dir, require_file};

#[derive(Args, Debug)]
pub struct SlideArgs {
    /// Slide raster (PNG or TIFF).
    #[arg(long, value_name = "FILE")]
    pub slide: PathBuf,
    /// Objective power the slide was scanned at.
    #[arg(long, default_value_t = 20.0)]
    pub base_magnification: f64,
}

#[derive(Args, Debug, Default)]
pub struct SegFlags {
    /// Saturation above which a pixel counts as tissue.
    #[arg(long)]
    pub saturation_threshold: Option<u8>,
    /// Median filter size (odd).
    #[arg(long)]
    pub median_kernel: Option<usize>,
    /// Target downsample of the segmentation level.
    #[arg(long)]
    pub seg_downsample: Option<f64>,
    /// Smallest kept tissue region, in segmentation-level pixels.
    #[arg(long)]
    pub min_tissue_area: Option<f64>,
    /// Smallest kept hole, in segmentation-level pixels.
    #[arg(long)]
    pub min_hole_area: Option<f64>,
}

#[derive(Args, Debug, Default)]
pub struct TileFlags {
    /// Patch side in pixels at the extraction magnification.
    #[arg(long)]
    pub patch_size: Option<usize>,
    /// Extraction magnification.
    #[arg(long)]
    pub magnification: Option<f64>,
    /// Minimum tissue fraction of a kept patch.
    #[arg(long)]
    pub min_coverage: Option<f64>,
}

fn tiling(cfg: &RunConfig, f: &TileFlags) -> TilingParams {
    let mut t = cfg.tiling.clone();
    if let Some(v) = f.patch_size {
        t.patch_size = v;
    }
    if let Some(v) = f.magnification {
        t.magnification = v;
    }
    if let Some(v) = f.min_coverage {
        t.min_coverage = v;
    }
    t
}

fn segmentation(cfg: &RunConfig, tiling: &TilingParams, f: &SegFlags) -> SegmentationParams {
    let mut s = cfg.segmentation.clone().unwrap_or_else(|| SegmentationParams::for_patch_size(tiling.patch_size));
    if let Some(v) = f.saturation_threshold {
        s.saturation_threshold = v;
    }
    if let Some(v) = f.median_kernel {
        s.median_blur_kernel = v;
    }
    if let Some(v) = f.seg_downsample {
        s.segmentation_downsample = v;
    }
    if let Some(v) = f.min_tissue_area {
        s.min_tissue_area = v;
    }
    if let Some(v) = f.min_hole_area {
        s.min_hole_area = v;
    }
    s
}

#[derive(Args, Debug)]
pub struct SegmentArgs {
    #[command(flatten)]
    pub slide: SlideArgs,
    #[command(flatten)]
    pub seg: SegFlags,
    /// Patch size the default area thresholds are scaled to.
    #[arg(long)]
    pub patch_size: Option<usize>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Serialize)]
struct SegmentationReport<'a> {
    slide: &'a SlideRecord,
    params: &'a SegmentationParams,
    level: usize,
    downsample: f64,
    tissue_pixels: usize,
    contours: &'a [Polygon],
    holes: &'a [Vec<Polygon>],
}

pub fn segment(cfg: &RunConfig, a: SegmentArgs) -> anyhow::Result<()> {
    require_file(&a.slide.slide)?;
    let slide = io::open_slide(&a.slide.slide, a.slide.base_magnification)?;
    let tiles = tiling(cfg, &TileFlags { patch_size: a.patch_size, ..Default::default() });
    let params = segmentation(cfg, &tiles, &a.seg);
    let id = &slide.record().slide_id;
    let mask = segment_tissue(&slide, &params).with_context(|| format!("segmenting {id}"))?;
    io::ensure_dir(&a.out)?;
    io::write_mask_png(&a.out.join(format!("{id}.mask.png")), &mask.mask)?;
    let report = SegmentationReport {
        slide: slide.record(),
        params: &params,
        level: mask.level,
        downsample: mask.downsample,
        tissue_pixels: mask.mask.count(),
        contours: &mask.contours,
        holes: &mask.holes,
    };
    io::write_json(&a.out.join(format!("{id}.segmentation.json")), &report)?;
    println!(
        "{id}: {} tissue regions, {} tissue pixels at level {}",
        mask.contours.len(),
        mask.mask.count(),
        mask.level
    );
    Ok(())
}

#[derive(Args, Debug)]
pub struct PatchifyArgs {
    #[command(flatten)]
    pub slide: SlideArgs,
    #[command(flatten)]
    pub seg: SegFlags,
    #[command(flatten)]
    pub tile: TileFlags,
    /// Output patch directory.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

pub fn patchify(cfg: &RunConfig, a: PatchifyArgs) -> anyhow::Result<()> {
    require_file(&a.slide.slide)?;
    let slide = io::open_slide(&a.slide.slide, a.slide.base_magnification)?;
    let tiles = tiling(cfg, &a.tile);
    let mask = segment_tissue(&slide, &segmentation(cfg, &tiles, &a.seg))?;
    let (manifest, patches) = extract_patches(&slide, &mask, &tiles)?;
    io::write_patch_dir(&a.out, &manifest, &patches)?;
    println!("{}: {} patches of {}px", manifest.slide_id, patches.len(), manifest.patch_size);
    Ok(())
}

#[derive(Args, Debug)]
pub struct TranslateArgs {
    /// Trained checkpoint.
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,
    /// Whole slide to segment, tile, translate and stitch.
    #[arg(long, value_name = "FILE", conflicts_with = "patches", required_unless_present = "patches")]
    pub slide: Option<PathBuf>,
    /// Patch directory with a manifest.
    #[arg(long, value_name = "DIR")]
    pub patches: Option<PathBuf>,
    #[arg(long, default_value_t = 20.0)]
    pub base_magnification: f64,
    #[command(flatten)]
    pub seg: SegFlags,
    #[command(flatten)]
    pub tile: TileFlags,
    /// Patches per forward pass.
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Canvas colour outside translated patches, as R,G,B.
    #[arg(long, value_parser = parse_rgb)]
    pub background: Option<[u8; 3]>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Serialize)]
struct TranslateReport {
    slide_id: String,
    checkpoint: String,
    checkpoint_iteration: u64,
    patches: usize,
    batch_size: usize,
    seconds: StageTimes,
    outputs: Vec<String>,
}

fn load_checkpoint(path: &Path) -> anyhow::Result<Checkpoint> {
    require_file(path)?;
    Ok(Checkpoint::load(path)?)
}

pub fn translate(cfg: &RunConfig, a: TranslateArgs) -> anyhow::Result<()> {
    if let Some(slide) = &a.slide {
        require_file(slide)?;
    }
    if let Some(dir) = &a.patches {
        require_dir(dir)?;
    }
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let generator = ckpt.generator()?;
    let tiles = tiling(cfg, &a.tile);
    let params = InferenceParams {
        segmentation: segmentation(cfg, &tiles, &a.seg),
        tiling: tiles,
        batch_size: a.batch_size.unwrap_or(cfg.inference.batch_size),
        background: a.background.unwrap_or(cfg.inference.background),
    };
    io::ensure_dir(&a.out)?;
    let report = if let Some(path) = &a.slide {
        let slide = io::open_slide(path, a.base_magnification)?;
        let start = Instant::now();
        let out = translate_slide(&slide, &generator, &params, || start.elapsed().as_secs_f64())?;
        let id = out.manifest.slide_id.clone();
        let raster = format!("{id}.ffpe.png");
        let manifest = format!("{id}.manifest.json");
        io::write_png(&a.out.join(&raster), &out.raster)?;
        io::write_json(&a.out.join(&manifest), &out.manifest)?;
        TranslateReport {
            slide_id: id,
            checkpoint: a.checkpoint.display().to_string(),
            checkpoint_iteration: ckpt.snapshot.iteration,
            patches: out.translated,
            batch_size: params.batch_size,
            seconds: out.times,
            outputs: vec![raster, manifest],
        }
    } else {
        let dir = a.patches.as_deref().expect("clap requires --slide or --patches");
        let (manifest, patches) = io::read_patch_dir(dir)?;
        let start = Instant::now();
        let translated = translate_patches(&generator, &patches, params.batch_size)?;
        let secs = start.elapsed().as_secs_f64();
        io::write_patch_dir(&a.out, &manifest, &translated)?;
        TranslateReport {
            slide_id: manifest.slide_id.clone(),
            checkpoint: a.checkpoint.display().to_string(),
            checkpoint_iteration: ckpt.snapshot.iteration,
            patches: translated.len(),
            batch_size: params.batch_size,
            seconds: StageTimes { translate: secs, total: secs, ..Default::default() },
            outputs: vec![io::MANIFEST_FILE.to_string()],
        }
    };
    io::write_json(&a.out.join("translate.json"), &report)?;
    emit(&report, None)
}

#[derive(Args, Debug)]
pub struct StitchArgs {
    /// Patch directory with a manifest.
    #[arg(long, value_name = "DIR")]
    pub patches: PathBuf,
    /// Canvas colour outside patches, as R,G,B.
    #[arg(long, value_parser = parse_rgb)]
    pub background: Option<[u8; 3]>,
    /// Output PNG.
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
}

pub fn stitch(cfg: &RunConfig, a: StitchArgs) -> anyhow::Result<()> {
    require_dir(&a.patches)?;
    let (manifest, patches) = io::read_patch_dir(&a.patches)?;
    let n = patches.len();
    let img = stitch_patches(&manifest, patches, a.background.unwrap_or(cfg.inference.background))?;
    io::write_png(&a.out, &img)?;
    println!("{}: stitched {n} patches into {}x{}", manifest.slide_id, img.width, img.height);
    Ok(())
}
