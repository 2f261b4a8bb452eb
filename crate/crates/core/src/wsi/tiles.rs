use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{ImagePatch, RgbImage, ValueSpace};
use crate::wsi::segment::TissueMask;
use crate::wsi::{round_half_away, SlideSource};

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub patch_id: String,
    /// Level-0 coordinates of the top-left corner.
    pub x: usize,
    pub y: usize,
    pub level: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchManifest {
    pub slide_id: String,
    pub patch_size: usize,
    pub magnification: f64,
    /// Slide extent at the extraction level.
    pub width: usize,
    pub height: usize,
    /// Downsample of the extraction level.
    pub downsample: f64,
    pub entries: Vec<ManifestEntry>,
}

impl PatchManifest {
    /// Top-left corner of an entry in extraction-level pixels.
    pub fn level_origin(&self, e: &ManifestEntry) -> (usize, usize) {
        (round_half_away(e.x as f64 / self.downsample) as usize, round_half_away(e.y as f64 / self.downsample) as usize)
    }

    /// Whether any two entries overlap.
    pub fn has_overlap(&self) -> bool {
        let rects: Vec<(usize, usize)> = self.entries.iter().map(|e| self.level_origin(e)).collect();
        let p = self.patch_size;
        for (i, a) in rects.iter().enumerate() {
            for b in &rects[i + 1..] {
                if a.0 < b.0 + p && b.0 < a.0 + p && a.1 < b.1 + p && b.1 < a.1 + p {
                    return true;
                }
            }
        }
        false
    }
}

pub fn patch_id(slide_id: &str, x: usize, y: usize) -> String {
    format!("{slide_id}__{x}_{y}")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TilingParams {
    pub patch_size: usize,
    /// Nominal objective power to extract at.
    pub magnification: f64,
    /// Minimum fraction of a tile's area on tissue.
    pub min_coverage: f64,
}

impl Default for TilingParams {
    fn default() -> Self {
        Self { patch_size: 512, magnification: 20.0, min_coverage: 0.5 }
    }
}

fn extraction_level<S: SlideSource + ?Sized>(slide: &S, magnification: f64) -> Result<usize> {
    let rec = slide.record();
    for l in &rec.levels {
        let m = rec.base_magnification / l.downsample;
        if (m - magnification).abs() <= 1e-6 * magnification.max(1.0) {
            return Ok(l.index);
        }
    }
    let available = rec
        .levels
        .iter()
        .map(|l| format!("level {} = {}x", l.index, rec.base_magnification / l.downsample))
        .collect::<Vec<_>>()
        .join(", ");
    Err(Error::Magnification { requested: magnification, available })
}

/// Fraction of segmentation pixels (by centre) inside the level-0 rectangle that are tissue.
fn coverage(mask: &TissueMask, x0: f64, y0: f64, size0: f64) -> f64 {
    let ds = mask.downsample;
    let first = |a: f64| num_traits::Float::max(num_traits::Float::ceil(a / ds - 0.5), 0.0) as usize;
    let (sx0, sy0) = (first(x0), first(y0));
    let (sx1, sy1) = (first(x0 + size0).min(mask.mask.width), first(y0 + size0).min(mask.mask.height));
    let (mut inside, mut total) = (0usize, 0usize);
    for y in sy0..sy1 {
        for x in sx0..sx1 {
            total += 1;
            inside += mask.mask.get(x, y) as usize;
        }
    }
    if total == 0 {
        // Tile smaller than one segmentation pixel: use the pixel under its centre.
        return if mask.contains(x0 + size0 / 2.0, y0 + size0 / 2.0) { 1.0 } else { 0.0 };
    }
    inside as f64 / total as f64
}

/// Non-overlapping tile grid anchored at the slide origin. A tile is kept
/// when it lies fully inside the slide, its centre is on tissue and its
/// tissue coverage reaches `min_coverage`.
pub fn plan_patches<S: SlideSource + ?Sized>(
    slide: &S,
    mask: &TissueMask,
    params: &TilingParams,
) -> Result<PatchManifest> {
    if params.patch_size == 0 {
        return Err(Error::Config("patch_size must be positive".into()));
    }
    if !(0.0..=1.0).contains(&params.min_coverage) {
        return Err(Error::Config(format!("min_coverage must lie in [0, 1], got {}", params.min_coverage)));
    }
    let rec = slide.record();
    let level = extraction_level(slide, params.magnification)?;
    let ds = rec.level(level)?.downsample;
    let (w, h) = rec.level_dimensions(level)?;
    let p = params.patch_size;
    let size0 = p as f64 * ds;
    let mut entries = Vec::new();
    if !mask.empty {
        for ty in 0..h / p {
            for tx in 0..w / p {
                let (lx, ly) = (tx * p, ty * p);
                let (x0, y0) = (lx as f64 * ds, ly as f64 * ds);
                if !mask.contains(x0 + size0 / 2.0, y0 + size0 / 2.0) {
                    continue;
                }
                if coverage(mask, x0, y0, size0) + 1e-12 < params.min_coverage {
                    continue;
                }
                let (x, y) = (round_half_away(x0) as usize, round_half_away(y0) as usize);
                entries.push(ManifestEntry { patch_id: patch_id(&rec.slide_id, x, y), x, y, level });
            }
        }
    }
    Ok(PatchManifest {
        slide_id: rec.slide_id.clone(),
        patch_size: p,
        magnification: params.magnification,
        width: w,
        height: h,
        downsample: ds,
        entries,
    })
}

pub fn read_patch<S: SlideSource + ?Sized>(
    slide: &S,
    manifest: &PatchManifest,
    entry: &ManifestEntry,
) -> Result<ImagePatch> {
    let p = manifest.patch_size;
    let img = slide.read_region(entry.level, entry.x, entry.y, p, p)?;
    Ok(ImagePatch::from_image(entry.patch_id.clone(), img))
}

/// Plan the grid and read every tile.
pub fn extract_patches<S: SlideSource + ?Sized>(
    slide: &S,
    mask: &TissueMask,
    params: &TilingParams,
) -> Result<(PatchManifest, Vec<ImagePatch>)> {
    let manifest = plan_patches(slide, mask, params)?;
    let patches = manifest.entries.iter().map(|e| read_patch(slide, &manifest, e)).collect::<Result<Vec<_>>>()?;
    Ok((manifest, patches))
}

/// Place every patch at its manifest rectangle on a `background` canvas of
/// the slide's extraction-level size.
pub fn stitch<I>(manifest: &PatchManifest, patches: I, background: [u8; 3]) -> Result<RgbImage>
where
    I: IntoIterator<Item = ImagePatch>,
{
    let by_id: BTreeMap<&str, &ManifestEntry> = manifest.entries.iter().map(|e| (e.patch_id.as_str(), e)).collect();
    let mut canvas = RgbImage::filled(manifest.width, manifest.height, background);
    let mut seen = BTreeSet::new();
    let p = manifest.patch_size;
    for patch in patches {
        let entry = by_id.get(patch.patch_id.as_str()).ok_or_else(|| Error::UnknownPatch(patch.patch_id.clone()))?;
        if !seen.insert(patch.patch_id.clone()) {
            return Err(Error::DuplicatePatch(patch.patch_id));
        }
        if patch.value_space() != ValueSpace::Uint8 {
            return Err(Error::ValueSpace { expected: "uint8", found: "normalized" });
        }
        if (patch.width, patch.height) != (p, p) {
            return Err(Error::Invalid(format!(
                "patch {} is {}x{}, manifest expects {p}x{p}",
                patch.patch_id, patch.width, patch.height
            )));
        }
        let (x, y) = manifest.level_origin(entry);
        canvas.paste(&patch.to_image()?, x, y);
    }
    let missing: Vec<String> =
        manifest.entries.iter().filter(|e| !seen.contains(&e.patch_id)).map(|e| e.patch_id.clone()).collect();
    if !missing.is_empty() {
        return Err(Error::MissingPatches(missing));
    }
    Ok(canvas)
}
