//! Images, slides, JSON documents and patch directories on disk.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ffpe_core::image::{ImagePatch, RgbImage};
use ffpe_core::wsi::{BitMask, PatchManifest, RasterSlide};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

/// File name of the manifest inside a patch directory.
pub const MANIFEST_FILE: &str = "manifest.json";

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "tif", "tiff"];

pub fn read_image(path: &Path) -> Result<RgbImage> {
    if !path.exists() {
        return Err(Error::Io { path: path.into(), source: std::io::ErrorKind::NotFound.into() });
    }
    let img = image::open(path).map_err(|source| Error::Image { path: path.into(), source })?.into_rgb8();
    let (w, h) = img.dimensions();
    Ok(RgbImage::new(w as usize, h as usize, img.into_raw())?)
}

pub fn write_png(path: &Path, img: &RgbImage) -> Result<()> {
    ensure_parent(path)?;
    image::save_buffer_with_format(
        path,
        &img.data,
        img.width as u32,
        img.height as u32,
        image::ExtendedColorType::Rgb8,
        image::ImageFormat::Png,
    )
    .map_err(|source| Error::Image { path: path.into(), source })
}

/// Tissue as white on black.
pub fn write_mask_png(path: &Path, mask: &BitMask) -> Result<()> {
    ensure_parent(path)?;
    let data: Vec<u8> = (0..mask.height)
        .flat_map(|y| (0..mask.width).map(move |x| (x, y)))
        .map(|(x, y)| if mask.get(x, y) { 255 } else { 0 })
        .collect();
    image::save_buffer_with_format(
        path,
        &data,
        mask.width as u32,
        mask.height as u32,
        image::ExtendedColorType::L8,
        image::ImageFormat::Png,
    )
    .map_err(|source| Error::Image { path: path.into(), source })
}

/// Slide id derived from a file name: the stem without extension.
pub fn slide_id(path: &Path) -> Result<String> {
    path.file_stem()
        .and_then(|s| s.to_str())
        .map(str::to_owned)
        .ok_or_else(|| Error::format(path, "cannot derive a slide id from this file name"))
}

/// Downsample factors `4, 16, 64, ...` that still leave at least one pixel.
pub fn pyramid_factors(width: usize, height: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut f = 4;
    while f <= width.min(height) && f <= 256 {
        out.push(f);
        f *= 4;
    }
    out
}

/// Load a raster slide scanned at `magnification` and build its pyramid in memory.
pub fn open_slide(path: &Path, magnification: f64) -> Result<RasterSlide> {
    let img = read_image(path)?;
    let factors = pyramid_factors(img.width, img.height);
    let slide = RasterSlide::with_pyramid(slide_id(path)?, img, magnification, &factors)?;
    Ok(slide.with_source_path(path.to_string_lossy()))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(Error::io(path))?;
    serde_json::from_str(&text).map_err(|source| Error::Json { path: path.into(), source })
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    ensure_parent(path)?;
    let mut text = serde_json::to_string_pretty(value).map_err(|source| Error::Json { path: path.into(), source })?;
    text.push('\n');
    fs::write(path, text).map_err(Error::io(path))
}

pub fn append_line(file: &mut fs::File, path: &Path, line: &str) -> Result<()> {
    writeln!(file, "{line}").and_then(|_| file.sync_data()).map_err(Error::io(path))
}

pub fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(Error::io(dir))
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => ensure_dir(p),
        _ => Ok(()),
    }
}

/// Image files directly inside `dir`, sorted by name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(Error::io(dir))? {
        let path = entry.map_err(Error::io(dir))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if path.is_file() && ext.is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.as_str())) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// Image files in `dir` loaded as `uint8` patches named after their stems.
pub fn read_image_dir(dir: &Path) -> Result<Vec<ImagePatch>> {
    list_images(dir)?.into_iter().map(|p| Ok(ImagePatch::from_image(slide_id(&p)?, read_image(&p)?))).collect()
}

pub fn patch_path(dir: &Path, patch_id: &str) -> PathBuf {
    dir.join(format!("{patch_id}.png"))
}

/// Write `manifest.json` plus one PNG per patch.
pub fn write_patch_dir(dir: &Path, manifest: &PatchManifest, patches: &[ImagePatch]) -> Result<()> {
    ensure_dir(dir)?;
    for p in patches {
        write_png(&patch_path(dir, &p.patch_id), &p.to_image()?)?;
    }
    write_json(&dir.join(MANIFEST_FILE), manifest)
}

/// Read a patch directory: its manifest and the patch for every entry.
pub fn read_patch_dir(dir: &Path) -> Result<(PatchManifest, Vec<ImagePatch>)> {
    let manifest: PatchManifest = read_json(&dir.join(MANIFEST_FILE))?;
    let patches = manifest
        .entries
        .iter()
        .map(|e| {
            let path = patch_path(dir, &e.patch_id);
            if !path.exists() {
                return Err(Error::from(ffpe_core::Error::MissingPatches(vec![e.patch_id.clone()])));
            }
            Ok(ImagePatch::from_image(e.patch_id.clone(), read_image(&path)?))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, patches))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_roundtrip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let data: Vec<u8> = (0..5 * 3 * 3).map(|i| (i * 37 % 256) as u8).collect();
        let img = RgbImage::new(5, 3, data).unwrap();
        let path = dir.path().join("a/b.png");
        write_png(&path, &img).unwrap();
        assert_eq!(read_image(&path).unwrap(), img);
        let missing = dir.path().join("missing.tif");
        let err = read_image(&missing).unwrap_err().to_string();
        assert!(err.contains("missing.tif"), "{err}");
    }

    #[test]
    fn pyramid_stops_before_vanishing() {
        assert_eq!(pyramid_factors(1000, 70), vec![4, 16, 64]);
        assert_eq!(pyramid_factors(10, 10), vec![4]);
        assert!(pyramid_factors(3, 3).is_empty());
    }
}
