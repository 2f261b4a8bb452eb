//! Slide tiling round trip and the command-line fixture chain.

use std::fs;
use std::path::Path;

use ffpe_core::wsi::{
    extract_patches, segment_tissue, stitch, PatchManifest, SegmentationParams, SlideSource, TilingParams,
};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::common::{run, tissue_slide, write_slide, TINY_TOML};
use crate::{ensure, Outcome};

const BACKGROUND: [u8; 3] = [255, 255, 255];

fn seg_params() -> SegmentationParams {
    SegmentationParams {
        segmentation_downsample: 4.0,
        min_tissue_area: 16.0,
        min_hole_area: 4.0,
        ..SegmentationParams::for_patch_size(32)
    }
}

/// Segment, tile and stitch one slide file; returns the manifest JSON and
/// the number of stitched tiles after checking every pixel.
fn roundtrip_once(path: &Path, base_mag: f64, out: &Path) -> Result<(Vec<u8>, usize), String> {
    let slide = ffpe::io::open_slide(path, base_mag).map_err(|e| e.to_string())?;
    let mask = segment_tissue(&slide, &seg_params()).map_err(|e| e.to_string())?;
    let tiling = TilingParams { patch_size: 32, magnification: 20.0, min_coverage: 0.5 };
    let (manifest, mut patches) = extract_patches(&slide, &mask, &tiling).map_err(|e| e.to_string())?;
    ensure!(!manifest.entries.is_empty(), "{}: no tiles", path.display());
    patches.shuffle(&mut ChaCha8Rng::seed_from_u64(manifest.entries.len() as u64));
    let stitched = stitch(&manifest, patches, BACKGROUND).map_err(|e| e.to_string())?;

    let level = manifest.entries[0].level;
    let (w, h) = slide.record().level_dimensions(level).map_err(|e| e.to_string())?;
    let source = slide.read_region(level, 0, 0, w, h).map_err(|e| e.to_string())?;
    ensure!((stitched.width, stitched.height) == (w, h), "stitched size differs from the extraction level");
    let mut covered = vec![false; w * h];
    for e in &manifest.entries {
        let (x0, y0) = manifest.level_origin(e);
        for y in y0..y0 + manifest.patch_size {
            for x in x0..x0 + manifest.patch_size {
                covered[y * w + x] = true;
            }
        }
    }
    for y in 0..h {
        for x in 0..w {
            let want = if covered[y * w + x] { source.pixel(x, y) } else { BACKGROUND };
            ensure!(stitched.pixel(x, y) == want, "{}: pixel ({x}, {y}) differs", path.display());
        }
    }
    let json = out.join("manifest.json");
    ffpe::io::write_json(&json, &manifest).map_err(|e| e.to_string())?;
    let bytes = fs::read(&json).map_err(|e| e.to_string())?;
    let back: PatchManifest = serde_json::from_slice(&bytes).map_err(|e| e.to_string())?;
    ensure!(back == manifest, "manifest does not survive serialization");
    Ok((bytes, manifest.entries.len()))
}

pub fn roundtrip() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d = dir.path();
    let mut tiles = 0;
    // Slides scanned at 20x are tiled at level 0; the 80x ones at the 4x level.
    let slides = [(320, 256, 20.0), (256, 192, 20.0), (512, 384, 80.0), (300, 200, 20.0), (640, 512, 80.0)];
    for (i, &(w, h, mag)) in slides.iter().enumerate() {
        let path = write_slide(d, &format!("slide{i}.png"), &tissue_slide(w, h, 40 + i as u64, 30 * i as u8));
        let (a, n) = roundtrip_once(&path, mag, &d.join(format!("a{i}")))?;
        let (b, _) = roundtrip_once(&path, mag, &d.join(format!("b{i}")))?;
        ensure!(a == b, "slide{i}: manifests differ between runs");
        tiles += n;
    }
    Ok(format!("5 slides, {tiles} tiles, stitched rasters bit-exact, manifests byte-identical"))
}

fn ffpe(args: &[&str], cwd: &Path) -> Result<String, String> {
    let mut all: Vec<&str> = args.to_vec();
    all.extend(["--config", "run.toml"]);
    let out = run(&all, cwd);
    ensure!(
        out.status.success(),
        "ffpe {} exited with {:?}: {}",
        args[0],
        out.status.code(),
        String::from_utf8_lossy(&out.stderr).trim()
    );
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

pub fn cli_chain() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d = dir.path();
    fs::write(d.join("run.toml"), TINY_TOML).map_err(|e| e.to_string())?;
    write_slide(d, "frozen.png", &tissue_slide(256, 192, 1, 0));
    write_slide(d, "ffpe.png", &tissue_slide(256, 192, 2, 60));

    ffpe(&["segment", "--slide", "frozen.png", "--out", "seg"], d)?;
    ffpe(&["patchify", "--slide", "frozen.png", "--out", "frozen_patches"], d)?;
    ffpe(&["patchify", "--slide", "ffpe.png", "--out", "ffpe_patches"], d)?;
    ffpe(
        &["train", "--source", "frozen_patches", "--target", "ffpe_patches", "--out", "run", "--max-iterations", "5"],
        d,
    )?;
    ffpe(&["translate", "--checkpoint", "run/ckpt_5.bin", "--patches", "frozen_patches", "--out", "translated"], d)?;
    ffpe(&["translate", "--checkpoint", "run/ckpt_5.bin", "--slide", "frozen.png", "--out", "slide_out"], d)?;
    ffpe(&["stitch", "--patches", "translated", "--out", "stitched.png"], d)?;
    let fid: serde_json::Value =
        serde_json::from_str(&ffpe(&["fid", "--a", "translated", "--b", "ffpe_patches", "--report", "fid.json"], d)?)
            .map_err(|e| e.to_string())?;
    ensure!(fid["fid"].as_f64().is_some_and(|v| v.is_finite() && v >= 0.0), "fid output {fid}");

    let manifest: PatchManifest =
        ffpe::io::read_json(&d.join("frozen_patches/manifest.json")).map_err(|e| e.to_string())?;
    let mut artifacts: Vec<String> = [
        "seg/frozen.mask.png",
        "seg/frozen.segmentation.json",
        "frozen_patches/manifest.json",
        "ffpe_patches/manifest.json",
        "run/config.json",
        "run/train_log.jsonl",
        "run/ckpt_5.bin",
        "translated/manifest.json",
        "translated/translate.json",
        "slide_out/frozen.ffpe.png",
        "slide_out/frozen.manifest.json",
        "slide_out/translate.json",
        "stitched.png",
        "fid.json",
    ]
    .map(String::from)
    .to_vec();
    for e in &manifest.entries {
        artifacts.push(format!("frozen_patches/{}.png", e.patch_id));
        artifacts.push(format!("translated/{}.png", e.patch_id));
    }
    let missing: Vec<&String> = artifacts.iter().filter(|a| !d.join(a).is_file()).collect();
    ensure!(missing.is_empty(), "missing artifacts: {missing:?}");
    let log = fs::read_to_string(d.join("run/train_log.jsonl")).map_err(|e| e.to_string())?;
    ensure!(log.lines().count() == 5, "training log has {} lines", log.lines().count());
    Ok(format!("8 commands exited 0, {} artifacts present", artifacts.len()))
}
