#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ffpe_core::image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_ffpe"));
    c.env_remove("FFPE_CONFIG");
    c
}

pub fn run(args: &[&str], cwd: &Path) -> Output {
    bin().args(args).current_dir(cwd).output().expect("spawn ffpe")
}

pub fn ok(args: &[&str], cwd: &Path) -> String {
    let out = run(args, cwd);
    assert!(
        out.status.success(),
        "ffpe {args:?} failed with {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).expect("utf-8 stdout")
}

/// White canvas with a few stained blobs; `tone` shifts the stain colour.
pub fn tissue_slide(w: usize, h: usize, seed: u64, tone: u8) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = RgbImage::filled(w, h, [246, 246, 246]);
    for _ in 0..5 {
        let cx = rng.random_range(0.2..0.8) * w as f64;
        let cy = rng.random_range(0.2..0.8) * h as f64;
        let r = rng.random_range(0.12..0.25) * w.min(h) as f64;
        for y in 0..h {
            for x in 0..w {
                let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                if dx * dx + dy * dy < r * r {
                    let n: u8 = rng.random_range(0..40);
                    img.set_pixel(x, y, [200 - n, 80 + tone / 2 + n, 170 + tone / 4]);
                }
            }
        }
    }
    img
}

pub fn write_slide(dir: &Path, name: &str, img: &RgbImage) -> PathBuf {
    let p = dir.join(name);
    ffpe::io::write_png(&p, img).unwrap();
    p
}

/// Run configuration for a model small enough to train in seconds.
pub const TINY_TOML: &str = r#"
[train]
seed = 3
num_patches = 16
embed_dim = 16
[train.generator]
n_res_blocks = 1
base_channels = 4
[train.discriminator]
base_channels = 4
n_layers = 1

[tiling]
patch_size = 32

[segmentation]
segmentation_downsample = 4.0
min_tissue_area = 16.0
min_hole_area = 4.0

[inference]
batch_size = 4
"#;
