//! Synthetic unpaired domains: clean stained-looking shapes (target) and the
//! same kind of content damaged by freezing-like artefacts (source).

use alloc::vec::Vec;

#[cfg(not(feature = "std"))]
use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::image::RgbImage;

const BACKGROUND: [f64; 3] = [238.0, 214.0, 228.0];
const PALETTE: [[f64; 3]; 4] = [[92.0, 52.0, 150.0], [126.0, 70.0, 170.0], [214.0, 120.0, 168.0], [190.0, 86.0, 140.0]];

/// Parameters of the artefact model.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FreezeParams {
    pub max_holes: usize,
    pub hole_radius: (f64, f64),
    pub blur_sigma: f64,
    /// Contrast kept around the per-channel mean, in `(0, 1]`.
    pub contrast: f64,
}

impl Default for FreezeParams {
    fn default() -> Self {
        Self { max_holes: 3, hole_radius: (3.0, 10.0), blur_sigma: 1.2, contrast: 0.6 }
    }
}

/// Pale background with a handful of filled ellipses and rectangles.
pub fn clean_image<R: Rng + ?Sized>(side: usize, rng: &mut R) -> RgbImage {
    let mut px: Vec<[f64; 3]> = (0..side * side)
        .map(|_| {
            let n = rng.random_range(-6.0..6.0);
            [BACKGROUND[0] + n, BACKGROUND[1] + n, BACKGROUND[2] + n]
        })
        .collect();
    let shapes = rng.random_range(3..7);
    let s = side as f64;
    for _ in 0..shapes {
        let color = PALETTE[rng.random_range(0..PALETTE.len())];
        let (cx, cy) = (rng.random_range(0.0..s), rng.random_range(0.0..s));
        let (rx, ry) = (rng.random_range(0.06 * s..0.22 * s), rng.random_range(0.06 * s..0.22 * s));
        let ellipse = rng.random_bool(0.6);
        for y in 0..side {
            for x in 0..side {
                let (dx, dy) = ((x as f64 + 0.5 - cx) / rx, (y as f64 + 0.5 - cy) / ry);
                let inside = if ellipse { dx * dx + dy * dy <= 1.0 } else { dx.abs() <= 1.0 && dy.abs() <= 1.0 };
                if inside {
                    let n = rng.random_range(-10.0..10.0);
                    px[y * side + x] = [color[0] + n, color[1] + n, color[2] + n];
                }
            }
        }
    }
    to_image(side, side, &px)
}

fn to_image(w: usize, h: usize, px: &[[f64; 3]]) -> RgbImage {
    let data = px.iter().flat_map(|p| p.map(|v| v.round().clamp(0.0, 255.0) as u8)).collect();
    RgbImage { width: w, height: h, data }
}

fn gaussian_blur(w: usize, h: usize, px: &[[f64; 3]], sigma: f64) -> Vec<[f64; 3]> {
    if sigma <= 0.0 {
        return px.to_vec();
    }
    let r = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-r..=r).map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = kernel.iter().sum();
    let pass = |src: &[[f64; 3]], horizontal: bool| -> Vec<[f64; 3]> {
        let mut out = alloc::vec![[0.0; 3]; w * h];
        for y in 0..h {
            for x in 0..w {
                let mut acc = [0.0; 3];
                for (k, wt) in kernel.iter().enumerate() {
                    let o = k as isize - r;
                    let (sx, sy) = if horizontal {
                        ((x as isize + o).clamp(0, w as isize - 1) as usize, y)
                    } else {
                        (x, (y as isize + o).clamp(0, h as isize - 1) as usize)
                    };
                    let p = src[sy * w + sx];
                    for c in 0..3 {
                        acc[c] += wt * p[c];
                    }
                }
                out[y * w + x] = acc.map(|v| v / norm);
            }
        }
        out
    };
    pass(&pass(px, true), false)
}

/// Blank elliptical holes, Gaussian blur and contrast compression.
pub fn freeze<R: Rng + ?Sized>(img: &RgbImage, params: &FreezeParams, rng: &mut R) -> RgbImage {
    let (w, h) = (img.width, img.height);
    let mut px: Vec<[f64; 3]> = img.data.chunks_exact(3).map(|c| [c[0] as f64, c[1] as f64, c[2] as f64]).collect();
    let holes = rng.random_range(1..=params.max_holes.max(1));
    for _ in 0..holes {
        let (cx, cy) = (rng.random_range(0.0..w as f64), rng.random_range(0.0..h as f64));
        let rx = rng.random_range(params.hole_radius.0..params.hole_radius.1);
        let ry = rng.random_range(params.hole_radius.0..params.hole_radius.1);
        for y in 0..h {
            for x in 0..w {
                let (dx, dy) = ((x as f64 + 0.5 - cx) / rx, (y as f64 + 0.5 - cy) / ry);
                if dx * dx + dy * dy <= 1.0 {
                    px[y * w + x] = [250.0, 250.0, 250.0];
                }
            }
        }
    }
    let mut px = gaussian_blur(w, h, &px, params.blur_sigma);
    let mut mean = [0.0; 3];
    for p in &px {
        for c in 0..3 {
            mean[c] += p[c] / (w * h) as f64;
        }
    }
    for p in &mut px {
        for c in 0..3 {
            p[c] = mean[c] + params.contrast * (p[c] - mean[c]);
        }
    }
    to_image(w, h, &px)
}

/// Unpaired toy sets: `(source, target)`, `n` images each of side `side`.
/// The two domains are drawn from independent streams.
pub fn toy_domains(n: usize, side: usize, seed: u64) -> (Vec<RgbImage>, Vec<RgbImage>) {
    let params = FreezeParams::default();
    let mut src_rng = ChaCha8Rng::seed_from_u64(seed);
    src_rng.set_stream(1);
    let mut tgt_rng = ChaCha8Rng::seed_from_u64(seed);
    tgt_rng.set_stream(2);
    let source = (0..n)
        .map(|_| {
            let clean = clean_image(side, &mut src_rng);
            freeze(&clean, &params, &mut src_rng)
        })
        .collect();
    let target = (0..n).map(|_| clean_image(side, &mut tgt_rng)).collect();
    (source, target)
}
