//! Patch and whole-slide translation with a trained generator.

use alloc::boxed::Box;
use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{ImagePatch, RgbImage, ValueSpace};
use crate::model::Generator;
use crate::scalar::Real;
use crate::tensor::Tensor;
use crate::wsi::{
    extract_patches, segment_tissue, stitch, PatchManifest, SegmentationParams, SlideSource, TilingParams,
};

pub const DEFAULT_BATCH_SIZE: usize = 8;

/// Anything that maps a normalized `[N, 3, H, W]` batch to a same-shape
/// batch in `[-1, 1]`, treating each sample independently.
pub trait Translator {
    fn translate_batch(&self, x: &Tensor<f32>) -> Result<Tensor<f32>>;
}

impl<T: Real> Translator for Generator<T> {
    fn translate_batch(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        Ok(self.translate(&x.cast::<T>())?.cast())
    }
}

/// Pass-through network, used to check pipeline geometry.
#[derive(Clone, Copy, Debug, Default)]
pub struct Identity;

impl Translator for Identity {
    fn translate_batch(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        Ok(x.clone())
    }
}

fn normalized(patch: &ImagePatch) -> Result<ImagePatch> {
    match patch.value_space() {
        ValueSpace::Uint8 => patch.normalized(),
        ValueSpace::Normalized => Ok(patch.clone()),
    }
}

/// Translate a list of equally sized patches, `batch_size` at a time.
/// Outputs are `uint8`, keep their ids and follow input order.
pub fn translate_patches<M: Translator + ?Sized>(
    model: &M,
    patches: &[ImagePatch],
    batch_size: usize,
) -> Result<Vec<ImagePatch>> {
    if batch_size == 0 {
        return Err(Error::Config("inference batch size must be positive".into()));
    }
    let mut out = Vec::with_capacity(patches.len());
    for chunk in patches.chunks(batch_size) {
        let norm = chunk.iter().map(normalized).collect::<Result<Vec<_>>>()?;
        let refs: Vec<&ImagePatch> = norm.iter().collect();
        let x = ImagePatch::batch::<f32>(&refs)?;
        let y = model.translate_batch(&x)?;
        if y.shape() != x.shape() {
            return Err(Error::Shape {
                op: "translate",
                detail: format!("network mapped {:?} to {:?}", x.shape(), y.shape()),
            });
        }
        for (i, p) in chunk.iter().enumerate() {
            out.push(ImagePatch::from_tensor(p.patch_id.clone(), &y, i)?.quantized()?);
        }
    }
    Ok(out)
}

pub fn translate_patch<M: Translator + ?Sized>(model: &M, patch: &ImagePatch) -> Result<ImagePatch> {
    let mut v = translate_patches(model, core::slice::from_ref(patch), 1)?;
    Ok(v.pop().expect("one patch in, one patch out"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferenceParams {
    pub segmentation: SegmentationParams,
    pub tiling: TilingParams,
    pub batch_size: usize,
    pub background: [u8; 3],
}

impl Default for InferenceParams {
    fn default() -> Self {
        let tiling = TilingParams::default();
        Self {
            segmentation: SegmentationParams::for_patch_size(tiling.patch_size),
            tiling,
            batch_size: DEFAULT_BATCH_SIZE,
            background: [255, 255, 255],
        }
    }
}

/// Seconds spent in each stage of [`translate_slide`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimes {
    pub segment: f64,
    pub extract: f64,
    pub translate: f64,
    pub stitch: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SlideTranslation {
    pub manifest: PatchManifest,
    pub raster: RgbImage,
    pub translated: usize,
    pub times: StageTimes,
}

/// Segment, extract, translate every tile and stitch the result onto a
/// background canvas at the extraction level. `clock` returns seconds
/// from any fixed origin.
pub fn translate_slide<S, M, C>(
    slide: &S,
    model: &M,
    params: &InferenceParams,
    mut clock: C,
) -> Result<SlideTranslation>
where
    S: SlideSource + ?Sized,
    M: Translator + ?Sized,
    C: FnMut() -> f64,
{
    let ctx = |e: Error| Error::Slide { slide_id: slide.record().slide_id.clone(), source: Box::new(e) };
    let t0 = clock();
    let mask = segment_tissue(slide, &params.segmentation).map_err(ctx)?;
    let t1 = clock();
    let (manifest, patches) = extract_patches(slide, &mask, &params.tiling).map_err(ctx)?;
    let t2 = clock();
    let translated = translate_patches(model, &patches, params.batch_size).map_err(ctx)?;
    let t3 = clock();
    let raster = stitch(&manifest, translated, params.background).map_err(ctx)?;
    let t4 = clock();
    Ok(SlideTranslation {
        translated: manifest.entries.len(),
        manifest,
        raster,
        times: StageTimes { segment: t1 - t0, extract: t2 - t1, translate: t3 - t2, stitch: t4 - t3, total: t4 - t0 },
    })
}
