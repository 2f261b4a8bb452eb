use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::RgbImage;
use crate::wsi::{SlideRecord, SlideSource};

/// Binary raster, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BitMask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl BitMask {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![false; width * height] }
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    /// Out-of-range coordinates read as `false`.
    pub fn get_signed(&self, x: i64, y: i64) -> bool {
        x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height && self.get(x as usize, y as usize)
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }
}

/// Closed polygon in level-0 coordinates with its area at segmentation scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Polygon {
    pub points: Vec<[f64; 2]>,
    /// Enclosed area in squared segmentation-level pixels.
    pub area: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegmentationParams {
    pub saturation_threshold: u8,
    pub median_blur_kernel: usize,
    /// Minimum tissue area in squared segmentation-level pixels.
    pub min_tissue_area: f64,
    /// Minimum hole area in squared segmentation-level pixels; smaller holes are filled.
    pub min_hole_area: f64,
    pub segmentation_downsample: f64,
}

impl SegmentationParams {
    /// Defaults scaled to a tile size.
    pub fn for_patch_size(patch_size: usize) -> Self {
        let ds = 64.0;
        let unit = (patch_size as f64 / ds) * (patch_size as f64 / ds);
        Self {
            saturation_threshold: 8,
            median_blur_kernel: 7,
            min_tissue_area: 100.0 * unit,
            min_hole_area: 16.0 * unit,
            segmentation_downsample: ds,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.median_blur_kernel == 0 || self.median_blur_kernel.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "median_blur_kernel must be odd and >= 1, got {}",
                self.median_blur_kernel
            )));
        }
        if !(self.min_tissue_area >= 0.0 && self.min_hole_area >= 0.0) {
            return Err(Error::Config("area thresholds must be >= 0".into()));
        }
        if !(self.segmentation_downsample >= 1.0) {
            return Err(Error::Config("segmentation_downsample must be >= 1".into()));
        }
        Ok(())
    }
}

impl Default for SegmentationParams {
    fn default() -> Self {
        Self::for_patch_size(512)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TissueMask {
    pub level: usize,
    pub downsample: f64,
    /// Tissue pixels at the segmentation level.
    pub mask: BitMask,
    pub contours: Vec<Polygon>,
    /// Kept holes of each contour, index-aligned with `contours`.
    pub holes: Vec<Vec<Polygon>>,
    pub params: SegmentationParams,
    pub empty: bool,
}

impl TissueMask {
    /// Whether the level-0 point `(x, y)` falls on a tissue pixel.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let sx = num_traits::Float::floor(x / self.downsample) as i64;
        let sy = num_traits::Float::floor(y / self.downsample) as i64;
        self.mask.get_signed(sx, sy)
    }
}

/// HSV saturation scaled to `0..=255`.
pub fn saturation(img: &RgbImage) -> Vec<u8> {
    img.data
        .chunks_exact(3)
        .map(|p| {
            let mx = p[0].max(p[1]).max(p[2]) as u32;
            let mn = p[0].min(p[1]).min(p[2]) as u32;
            (255 * (mx - mn) + mx / 2).checked_div(mx).unwrap_or(0) as u8
        })
        .collect()
}

/// Median filter with a square `k x k` window and replicated borders.
pub fn median_blur(src: &[u8], width: usize, height: usize, k: usize) -> Vec<u8> {
    if k <= 1 || width == 0 || height == 0 {
        return src.to_vec();
    }
    let r = (k / 2) as isize;
    let at = |x: isize, y: isize| -> u8 {
        let xc = x.clamp(0, width as isize - 1) as usize;
        let yc = y.clamp(0, height as isize - 1) as usize;
        src[yc * width + xc]
    };
    let half = (k * k / 2 + 1) as u32;
    let mut out = vec![0u8; width * height];
    for y in 0..height as isize {
        let mut hist = [0u32; 256];
        for dy in -r..=r {
            for dx in -r..=r {
                hist[at(dx, y + dy) as usize] += 1;
            }
        }
        for x in 0..width as isize {
            if x > 0 {
                for dy in -r..=r {
                    hist[at(x - r - 1, y + dy) as usize] -= 1;
                    hist[at(x + r, y + dy) as usize] += 1;
                }
            }
            let mut acc = 0;
            let mut m = 0;
            for (v, &c) in hist.iter().enumerate() {
                acc += c;
                if acc >= half {
                    m = v;
                    break;
                }
            }
            out[y as usize * width + x as usize] = m as u8;
        }
    }
    out
}

const EAST: (i64, i64) = (1, 0);

fn turn_right(d: (i64, i64)) -> (i64, i64) {
    (-d.1, d.0)
}

fn turn_left(d: (i64, i64)) -> (i64, i64) {
    (d.1, -d.0)
}

/// Pixels ahead of vertex `v` when moving along `d`, as (ahead-left, ahead-right).
fn ahead(v: (i64, i64), d: (i64, i64)) -> ((i64, i64), (i64, i64)) {
    match d {
        (1, 0) => ((v.0, v.1 - 1), (v.0, v.1)),
        (0, 1) => ((v.0, v.1), (v.0 - 1, v.1)),
        (-1, 0) => ((v.0 - 1, v.1), (v.0 - 1, v.1 - 1)),
        _ => ((v.0 - 1, v.1 - 1), (v.0, v.1 - 1)),
    }
}

/// Trace the outer boundary of the region containing `start` along pixel
/// edges. `start` must be the region's first pixel in row-major order.
/// `diagonal` joins pixels touching only at a corner. Returns the polygon's
/// corner vertices in pixel-corner coordinates, clockwise on screen.
pub fn trace_region(inside: impl Fn(i64, i64) -> bool, start: (i64, i64), diagonal: bool) -> Vec<(i64, i64)> {
    let origin = start;
    let mut v = origin;
    let mut d = EAST;
    let mut pts = vec![origin];
    loop {
        let (l, r) = ahead(v, d);
        let (li, ri) = (inside(l.0, l.1), inside(r.0, r.1));
        let next = match (li, ri) {
            (false, true) => d,
            (true, true) => turn_left(d),
            (false, false) => turn_right(d),
            (true, false) => {
                if diagonal {
                    turn_left(d)
                } else {
                    turn_right(d)
                }
            }
        };
        if next != d && v != origin {
            pts.push(v);
        }
        d = next;
        v = (v.0 + d.0, v.1 + d.1);
        if v == origin {
            break;
        }
    }
    pts
}

fn shoelace(pts: &[(i64, i64)]) -> f64 {
    let n = pts.len();
    let mut s: i64 = 0;
    for i in 0..n {
        let (a, b) = (pts[i], pts[(i + 1) % n]);
        s += a.0 * b.1 - b.0 * a.1;
    }
    (s as f64 / 2.0).abs()
}

/// Connected-component labels (`0` is unlabeled) and per-label
/// (pixel count, first pixel in row-major order).
type Components = Vec<(usize, (usize, usize))>;

fn label(mask: &BitMask, want: bool, diagonal: bool) -> (Vec<u32>, Components) {
    let (w, h) = (mask.width, mask.height);
    let mut labels = vec![0u32; w * h];
    let mut comps = Vec::new();
    let mut stack = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if mask.get(x, y) != want || labels[y * w + x] != 0 {
                continue;
            }
            let id = comps.len() as u32 + 1;
            let mut count = 0;
            labels[y * w + x] = id;
            stack.push((x, y));
            while let Some((cx, cy)) = stack.pop() {
                count += 1;
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        if (dx == 0 && dy == 0) || (!diagonal && dx != 0 && dy != 0) {
                            continue;
                        }
                        let (nx, ny) = (cx as i64 + dx, cy as i64 + dy);
                        if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                            continue;
                        }
                        let i = ny as usize * w + nx as usize;
                        if mask.data[i] == want && labels[i] == 0 {
                            labels[i] = id;
                            stack.push((nx as usize, ny as usize));
                        }
                    }
                }
            }
            comps.push((count, (x, y)));
        }
    }
    (labels, comps)
}

fn to_polygon(pts: &[(i64, i64)], ds: f64) -> Polygon {
    Polygon { points: pts.iter().map(|&(x, y)| [x as f64 * ds, y as f64 * ds]).collect(), area: shoelace(pts) }
}

/// Tissue components of a binary mask with hole bookkeeping and area
/// filters applied; returns the filtered mask and its polygons.
pub(crate) fn filter_components(
    raw: &BitMask,
    min_tissue_area: f64,
    min_hole_area: f64,
    ds: f64,
) -> (BitMask, Vec<Polygon>, Vec<Vec<Polygon>>) {
    let (w, h) = (raw.width, raw.height);
    let (fg, fg_comps) = label(raw, true, true);
    let (bg, bg_comps) = label(raw, false, false);
    let mut border = vec![false; bg_comps.len() + 1];
    for x in 0..w {
        border[bg[x] as usize] = true;
        border[bg[(h - 1) * w + x] as usize] = true;
    }
    for y in 0..h {
        border[bg[y * w] as usize] = true;
        border[bg[y * w + w - 1] as usize] = true;
    }
    // Every enclosed background component has a unique enclosing tissue
    // component: the one directly above its first pixel.
    let mut holes_of: Vec<Vec<usize>> = vec![Vec::new(); fg_comps.len() + 1];
    for (i, &(_, (x, y))) in bg_comps.iter().enumerate() {
        if !border[i + 1] {
            holes_of[fg[(y - 1) * w + x] as usize].push(i + 1);
        }
    }
    let mut mask = BitMask::new(w, h);
    let mut keep_fg = vec![false; fg_comps.len() + 1];
    let mut kept_hole = vec![false; bg_comps.len() + 1];
    let mut contours = Vec::new();
    let mut holes = Vec::new();
    for (i, &(count, start)) in fg_comps.iter().enumerate() {
        let id = i as u32 + 1;
        if (count as f64) < min_tissue_area || count == 0 {
            continue;
        }
        keep_fg[id as usize] = true;
        let inside =
            |x: i64, y: i64| x >= 0 && y >= 0 && x < w as i64 && y < h as i64 && fg[y as usize * w + x as usize] == id;
        let outer = trace_region(inside, (start.0 as i64, start.1 as i64), true);
        contours.push(to_polygon(&outer, ds));
        let mut kept = Vec::new();
        for &hid in &holes_of[id as usize] {
            let (hcount, hstart) = bg_comps[hid - 1];
            if (hcount as f64) < min_hole_area {
                continue;
            }
            kept_hole[hid] = true;
            let hid32 = hid as u32;
            let inside = |x: i64, y: i64| {
                x >= 0 && y >= 0 && x < w as i64 && y < h as i64 && bg[y as usize * w + x as usize] == hid32
            };
            kept.push(to_polygon(&trace_region(inside, (hstart.0 as i64, hstart.1 as i64), false), ds));
        }
        holes.push(kept);
    }
    // A pixel is tissue if it belongs to a kept component or to a filled
    // (small) hole of one.
    let mut hole_parent = vec![0u32; bg_comps.len() + 1];
    for (fid, hs) in holes_of.iter().enumerate() {
        for &hid in hs {
            hole_parent[hid] = fid as u32;
        }
    }
    for i in 0..w * h {
        mask.data[i] = if raw.data[i] {
            keep_fg[fg[i] as usize]
        } else {
            let b = bg[i] as usize;
            !border[b] && !kept_hole[b] && keep_fg[hole_parent[b] as usize]
        };
    }
    (mask, contours, holes)
}

/// Threshold the saturation channel of a coarse level after median
/// filtering, then keep sufficiently large tissue regions and holes.
pub fn segment_tissue<S: SlideSource + ?Sized>(slide: &S, params: &SegmentationParams) -> Result<TissueMask> {
    params.validate()?;
    let record: &SlideRecord = slide.record();
    record.validate()?;
    let level = record.best_level_for_downsample(params.segmentation_downsample);
    let ds = record.level(level)?.downsample;
    let img = slide.read_level(level)?;
    let (w, h) = (img.width, img.height);
    let sat = median_blur(&saturation(&img), w, h, params.median_blur_kernel);
    let raw = BitMask { width: w, height: h, data: sat.iter().map(|&s| s > params.saturation_threshold).collect() };
    let (mask, contours, holes) = filter_components(&raw, params.min_tissue_area, params.min_hole_area, ds);
    let empty = contours.is_empty();
    Ok(TissueMask { level, downsample: ds, mask, contours, holes, params: params.clone(), empty })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wsi::RasterSlide;
    use proptest::prelude::*;

    fn mask_from(rows: &[&str]) -> BitMask {
        let h = rows.len();
        let w = rows[0].len();
        BitMask { width: w, height: h, data: rows.iter().flat_map(|r| r.bytes().map(|b| b == b'#')).collect() }
    }

    #[test]
    fn saturation_and_median() {
        let img = RgbImage::new(3, 1, vec![255, 255, 255, 255, 0, 0, 0, 0, 0]).unwrap();
        assert_eq!(saturation(&img), vec![0, 255, 0]);
        let src = vec![0, 0, 0, 0, 255, 0, 0, 0, 0];
        assert_eq!(median_blur(&src, 3, 3, 3), vec![0; 9]);
        let src: Vec<u8> = (0..25).collect();
        let out = median_blur(&src, 5, 5, 3);
        assert_eq!(out[12], 12);
        assert_eq!(out[0], 1);
    }

    #[test]
    fn traced_polygons_enclose_pixel_counts() {
        let m = mask_from(&[
            "........", //
            ".####...", //
            ".#..#.#.", //
            ".####..#", //
            "........", //
        ]);
        let (mask, contours, holes) = filter_components(&m, 0.0, 0.0, 1.0);
        assert_eq!(contours.len(), 2);
        assert_eq!(contours[0].area, 12.0);
        assert_eq!(holes[0].len(), 1);
        assert_eq!(holes[0][0].area, 2.0);
        // The diagonal pair is one component under 8-connectivity.
        assert_eq!(contours[1].area, 2.0);
        assert_eq!(mask.count(), 12);
        let (filled, _, holes) = filter_components(&m, 0.0, 3.0, 1.0);
        assert!(holes[0].is_empty());
        assert_eq!(filled.count(), 14);
        let (small, c, _) = filter_components(&m, 3.0, 0.0, 1.0);
        assert_eq!(c.len(), 1);
        assert_eq!(small.count(), 10);
    }

    fn disk_slide(side: usize, r: f64) -> RasterSlide {
        let mut img = RgbImage::filled(side, side, [255, 255, 255]);
        let c = side as f64 / 2.0;
        for y in 0..side {
            for x in 0..side {
                let (dx, dy) = (x as f64 + 0.5 - c, y as f64 + 0.5 - c);
                if dx * dx + dy * dy <= r * r {
                    img.set_pixel(x, y, [230, 120, 170]);
                }
            }
        }
        RasterSlide::with_pyramid("disk", img, 20.0, &[4]).unwrap()
    }

    #[test]
    fn disk_segmentation() {
        let slide = disk_slide(800, 300.0);
        let params = SegmentationParams {
            segmentation_downsample: 4.0,
            min_tissue_area: 100.0,
            min_hole_area: 16.0,
            ..Default::default()
        };
        let m = segment_tissue(&slide, &params).unwrap();
        assert!(!m.empty);
        assert_eq!(m.contours.len(), 1);
        let area0 = m.contours[0].area * m.downsample * m.downsample;
        let expect = core::f64::consts::PI * 300.0 * 300.0;
        assert!((area0 - expect).abs() / expect < 0.02, "{area0} vs {expect}");
        let too_big = SegmentationParams { min_tissue_area: 1e6, ..params.clone() };
        assert!(segment_tissue(&slide, &too_big).unwrap().contours.is_empty());
        let white = RasterSlide::new("w", RgbImage::filled(64, 64, [255, 255, 255]), 20.0);
        let m = segment_tissue(&white, &params).unwrap();
        assert!(m.empty && m.contours.is_empty() && m.mask.count() == 0);
    }

    proptest! {
        #[test]
        fn polygon_area_matches_filled_region(bits in proptest::collection::vec(any::<bool>(), 64)) {
            let m = BitMask { width: 8, height: 8, data: bits };
            let (mask, contours, holes) = filter_components(&m, 0.0, 0.0, 1.0);
            let outer: f64 = contours.iter().map(|c| c.area).sum();
            let hole: f64 = holes.iter().flatten().map(|c| c.area).sum();
            prop_assert_eq!(outer - hole, mask.count() as f64);
            prop_assert_eq!(mask, m);
        }

        #[test]
        fn larger_area_threshold_never_adds_contours(
            bits in proptest::collection::vec(any::<bool>(), 100),
            a in 0.0f64..20.0,
            extra in 0.0f64..20.0,
        ) {
            let m = BitMask { width: 10, height: 10, data: bits };
            let lo = filter_components(&m, a, 0.0, 1.0).1.len();
            let hi = filter_components(&m, a + extra, 0.0, 1.0).1.len();
            prop_assert!(hi <= lo);
        }
    }
}
