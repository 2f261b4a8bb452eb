//! Whole-slide handling: slide records and pixel sources, tissue
//! segmentation, non-overlapping tiling and stitching.

mod segment;
mod tiles;

pub use segment::{
    median_blur, saturation, segment_tissue, trace_region, BitMask, Polygon, SegmentationParams, TissueMask,
};
pub use tiles::{
    extract_patches, patch_id, plan_patches, read_patch, stitch, ManifestEntry, PatchManifest, TilingParams,
};

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::RgbImage;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum SlideLabel {
    #[serde(rename = "GBM")]
    Gbm,
    #[serde(rename = "LGG")]
    Lgg,
    #[serde(rename = "LUAD")]
    Luad,
    #[serde(rename = "LUSC")]
    Lusc,
    #[default]
    #[serde(rename = "other")]
    Other,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Level {
    pub index: usize,
    pub downsample: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlideRecord {
    pub slide_id: String,
    pub source_path: String,
    /// Level-0 `(width, height)` in pixels.
    pub base_dimensions: (usize, usize),
    pub levels: Vec<Level>,
    pub label: SlideLabel,
    /// Objective power of level 0.
    pub base_magnification: f64,
}

impl SlideRecord {
    pub fn validate(&self) -> Result<()> {
        let (w, h) = self.base_dimensions;
        if w == 0 || h == 0 {
            return Err(Error::Invalid(format!("slide {} has empty dimensions", self.slide_id)));
        }
        match self.levels.first() {
            Some(l) if l.index == 0 && l.downsample == 1.0 => {}
            _ => {
                return Err(Error::Invalid(format!("slide {} must start with level 0 at downsample 1", self.slide_id)))
            }
        }
        for (i, pair) in self.levels.windows(2).enumerate() {
            if pair[1].index != i + 1 || !(pair[1].downsample > pair[0].downsample) {
                return Err(Error::Invalid(format!(
                    "slide {}: level downsamples must strictly increase with index",
                    self.slide_id
                )));
            }
        }
        if !(self.base_magnification > 0.0) {
            return Err(Error::Invalid(format!("slide {} has no base magnification", self.slide_id)));
        }
        Ok(())
    }

    pub fn level(&self, index: usize) -> Result<Level> {
        self.levels
            .get(index)
            .copied()
            .ok_or_else(|| Error::Invalid(format!("slide {} has no level {index}", self.slide_id)))
    }

    /// Pixel dimensions of a level (rounded up).
    pub fn level_dimensions(&self, index: usize) -> Result<(usize, usize)> {
        let ds = self.level(index)?.downsample;
        let (w, h) = self.base_dimensions;
        Ok((scaled_dim(w, ds), scaled_dim(h, ds)))
    }

    /// Level with the smallest downsample `>= target`, else the coarsest.
    pub fn best_level_for_downsample(&self, target: f64) -> usize {
        self.levels.iter().find(|l| l.downsample >= target).unwrap_or(self.levels.last().expect("validated")).index
    }

    pub fn magnification(&self, index: usize) -> Result<f64> {
        Ok(self.base_magnification / self.level(index)?.downsample)
    }
}

pub(crate) fn scaled_dim(n: usize, ds: f64) -> usize {
    let v = n as f64 / ds;
    let r = round_half_away(v);
    if (v - r).abs() < 1e-9 {
        r as usize
    } else {
        num_traits::Float::ceil(v) as usize
    }
}

pub(crate) fn round_half_away(v: f64) -> f64 {
    num_traits::Float::round(v)
}

/// Random access to slide pixels.
pub trait SlideSource {
    fn record(&self) -> &SlideRecord;

    /// Read a `width x height` region of `level` whose top-left corner is
    /// `(x, y)` in level-0 coordinates. Pixels beyond the slide read white.
    fn read_region(&self, level: usize, x: usize, y: usize, width: usize, height: usize) -> Result<RgbImage>;

    /// Whole level as one raster.
    fn read_level(&self, level: usize) -> Result<RgbImage> {
        let (w, h) = self.record().level_dimensions(level)?;
        self.read_region(level, 0, 0, w, h)
    }
}

/// In-memory pyramid built from a plain raster by integer box downsampling.
#[derive(Clone, Debug, PartialEq)]
pub struct RasterSlide {
    record: SlideRecord,
    levels: Vec<RgbImage>,
}

impl RasterSlide {
    /// Single-level slide.
    pub fn new(slide_id: impl Into<String>, image: RgbImage, magnification: f64) -> Self {
        Self::with_pyramid(slide_id, image, magnification, &[]).expect("no extra levels")
    }

    /// Add levels downsampled by each factor in `factors` (strictly increasing integers > 1).
    pub fn with_pyramid(
        slide_id: impl Into<String>,
        image: RgbImage,
        magnification: f64,
        factors: &[usize],
    ) -> Result<Self> {
        let mut levels = Vec::with_capacity(factors.len() + 1);
        let mut meta = alloc::vec![Level { index: 0, downsample: 1.0 }];
        for (i, &f) in factors.iter().enumerate() {
            if f < 2 {
                return Err(Error::Invalid(format!("pyramid factor {f} must exceed 1")));
            }
            meta.push(Level { index: i + 1, downsample: f as f64 });
            levels.push(image.downsample(f));
        }
        levels.insert(0, image);
        let record = SlideRecord {
            slide_id: slide_id.into(),
            source_path: String::new(),
            base_dimensions: (levels[0].width, levels[0].height),
            levels: meta,
            label: SlideLabel::Other,
            base_magnification: magnification,
        };
        record.validate()?;
        Ok(Self { record, levels })
    }

    pub fn with_source_path(mut self, path: impl Into<String>) -> Self {
        self.record.source_path = path.into();
        self
    }

    pub fn with_label(mut self, label: SlideLabel) -> Self {
        self.record.label = label;
        self
    }

    pub fn level_image(&self, level: usize) -> Option<&RgbImage> {
        self.levels.get(level)
    }
}

impl SlideSource for RasterSlide {
    fn record(&self) -> &SlideRecord {
        &self.record
    }

    fn read_region(&self, level: usize, x: usize, y: usize, width: usize, height: usize) -> Result<RgbImage> {
        let img = self
            .levels
            .get(level)
            .ok_or_else(|| Error::Invalid(format!("slide {} has no level {level}", self.record.slide_id)))?;
        let ds = self.record.levels[level].downsample;
        let lx = round_half_away(x as f64 / ds) as usize;
        let ly = round_half_away(y as f64 / ds) as usize;
        Ok(img.crop(lx, ly, width, height, [255, 255, 255]))
    }
}
