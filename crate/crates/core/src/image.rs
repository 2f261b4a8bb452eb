//! Image containers: interleaved RGB rasters and value-space-tagged patches.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Row-major interleaved 8-bit RGB raster.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::Invalid(format!(
                "{width}x{height} RGB image needs {} bytes, got {}",
                width * height * 3,
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let data = rgb.iter().copied().cycle().take(width * height * 3).collect();
        Self { width, height, data }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Copy the `w x h` rectangle at `(x, y)`; pixels outside the image read
    /// as `fill`.
    pub fn crop(&self, x: usize, y: usize, w: usize, h: usize, fill: [u8; 3]) -> RgbImage {
        let mut out = RgbImage::filled(w, h, fill);
        let x_end = (x + w).min(self.width);
        for yy in y..(y + h).min(self.height) {
            if x >= x_end {
                break;
            }
            let src = (yy * self.width + x) * 3..(yy * self.width + x_end) * 3;
            let dst = ((yy - y) * w) * 3;
            out.data[dst..dst + src.len()].copy_from_slice(&self.data[src]);
        }
        out
    }

    /// Paste `src` with its top-left corner at `(x, y)`, clipping at the border.
    pub fn paste(&mut self, src: &RgbImage, x: usize, y: usize) {
        let x_end = (x + src.width).min(self.width);
        if x >= x_end {
            return;
        }
        let run = (x_end - x) * 3;
        for sy in 0..src.height {
            let yy = y + sy;
            if yy >= self.height {
                break;
            }
            let d = (yy * self.width + x) * 3;
            let s = sy * src.width * 3;
            self.data[d..d + run].copy_from_slice(&src.data[s..s + run]);
        }
    }

    /// Box-filter downsampling by an integer factor (partial edge blocks are averaged over their pixels).
    pub fn downsample(&self, factor: usize) -> RgbImage {
        if factor <= 1 {
            return self.clone();
        }
        let w = self.width.div_ceil(factor);
        let h = self.height.div_ceil(factor);
        let mut data = Vec::with_capacity(w * h * 3);
        for by in 0..h {
            for bx in 0..w {
                let mut acc = [0u64; 3];
                let mut n = 0u64;
                for y in by * factor..((by + 1) * factor).min(self.height) {
                    for x in bx * factor..((bx + 1) * factor).min(self.width) {
                        let p = self.pixel(x, y);
                        for c in 0..3 {
                            acc[c] += p[c] as u64;
                        }
                        n += 1;
                    }
                }
                for a in acc {
                    data.push(((a + n / 2) / n) as u8);
                }
            }
        }
        RgbImage { width: w, height: h, data }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueSpace {
    /// Integers in `[0, 255]`.
    Uint8,
    /// Reals in `[-1, 1]`.
    Normalized,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Pixels {
    Uint8(Vec<u8>),
    Normalized(Vec<f32>),
}

/// Square-or-rectangular RGB patch, `H x W x 3` interleaved.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePatch {
    pub patch_id: String,
    pub height: usize,
    pub width: usize,
    pixels: Pixels,
}

/// `x / 127.5 - 1`.
pub fn normalize_u8(v: u8) -> f32 {
    v as f32 / 127.5 - 1.0
}

/// `round((x + 1) * 127.5)`, clamped to the byte range.
pub fn quantize(v: f32) -> u8 {
    let q = num_traits::Float::round((v as f64 + 1.0) * 127.5);
    q.clamp(0.0, 255.0) as u8
}

impl ImagePatch {
    pub fn from_u8(patch_id: impl Into<String>, width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::Invalid(format!("patch {width}x{height} needs {} bytes", width * height * 3)));
        }
        Ok(Self { patch_id: patch_id.into(), height, width, pixels: Pixels::Uint8(data) })
    }

    pub fn from_image(patch_id: impl Into<String>, img: RgbImage) -> Self {
        Self { patch_id: patch_id.into(), height: img.height, width: img.width, pixels: Pixels::Uint8(img.data) }
    }

    pub fn from_normalized(patch_id: impl Into<String>, width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::Invalid(format!("patch {width}x{height} needs {} values", width * height * 3)));
        }
        if let Some(v) = data.iter().find(|v| !(-1.0..=1.0).contains(*v)) {
            return Err(Error::Invalid(format!("normalized pixel {v} outside [-1, 1]")));
        }
        Ok(Self { patch_id: patch_id.into(), height, width, pixels: Pixels::Normalized(data) })
    }

    pub fn value_space(&self) -> ValueSpace {
        match self.pixels {
            Pixels::Uint8(_) => ValueSpace::Uint8,
            Pixels::Normalized(_) => ValueSpace::Normalized,
        }
    }

    pub fn pixels(&self) -> &Pixels {
        &self.pixels
    }

    /// Map a `uint8` patch into `[-1, 1]`.
    pub fn normalized(&self) -> Result<ImagePatch> {
        match &self.pixels {
            Pixels::Uint8(d) => Ok(Self {
                patch_id: self.patch_id.clone(),
                height: self.height,
                width: self.width,
                pixels: Pixels::Normalized(d.iter().map(|&v| normalize_u8(v)).collect()),
            }),
            Pixels::Normalized(_) => Err(Error::ValueSpace { expected: "uint8", found: "normalized" }),
        }
    }

    /// Map a normalized patch back to bytes.
    pub fn quantized(&self) -> Result<ImagePatch> {
        match &self.pixels {
            Pixels::Normalized(d) => Ok(Self {
                patch_id: self.patch_id.clone(),
                height: self.height,
                width: self.width,
                pixels: Pixels::Uint8(d.iter().map(|&v| quantize(v)).collect()),
            }),
            Pixels::Uint8(_) => Err(Error::ValueSpace { expected: "normalized", found: "uint8" }),
        }
    }

    pub fn to_image(&self) -> Result<RgbImage> {
        match &self.pixels {
            Pixels::Uint8(d) => RgbImage::new(self.width, self.height, d.clone()),
            Pixels::Normalized(_) => Err(Error::ValueSpace { expected: "uint8", found: "normalized" }),
        }
    }

    /// `[1, 3, H, W]` tensor; the patch must be normalized.
    pub fn to_tensor<T: Real>(&self) -> Result<Tensor<T>> {
        let d = match &self.pixels {
            Pixels::Normalized(d) => d,
            Pixels::Uint8(_) => return Err(Error::ValueSpace { expected: "normalized", found: "uint8" }),
        };
        let plane = self.height * self.width;
        let mut out = alloc::vec![T::zero(); 3 * plane];
        for (i, px) in d.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * plane + i] = T::of(px[c] as f64);
            }
        }
        Tensor::from_vec(&[1, 3, self.height, self.width], out)
    }

    /// Build a normalized patch from sample `n` of an `[N, 3, H, W]` tensor.
    pub fn from_tensor<T: Real>(patch_id: impl Into<String>, t: &Tensor<T>, n: usize) -> Result<Self> {
        let (batch, c, h, w) = t.dims4()?;
        if c != 3 || n >= batch {
            return Err(Error::Invalid(format!("cannot take RGB sample {n} from {:?}", t.shape())));
        }
        let plane = h * w;
        let base = n * 3 * plane;
        let mut out = Vec::with_capacity(3 * plane);
        for i in 0..plane {
            for ch in 0..3 {
                out.push(t.data()[base + ch * plane + i].as_f64().clamp(-1.0, 1.0) as f32);
            }
        }
        Self::from_normalized(patch_id, w, h, out)
    }

    /// Stack normalized patches of equal size into `[N, 3, H, W]`.
    pub fn batch<T: Real>(patches: &[&ImagePatch]) -> Result<Tensor<T>> {
        let first = patches.first().ok_or(Error::Empty("patch batch"))?;
        let (h, w) = (first.height, first.width);
        let mut data = Vec::with_capacity(patches.len() * 3 * h * w);
        for p in patches {
            if (p.height, p.width) != (h, w) {
                return Err(Error::Invalid(format!(
                    "patch {} is {}x{}, batch is {w}x{h}",
                    p.patch_id, p.width, p.height
                )));
            }
            data.extend(p.to_tensor::<T>()?.into_data());
        }
        Tensor::from_vec(&[patches.len(), 3, h, w], data)
    }
}
