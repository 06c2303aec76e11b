//! Raster types, sRGB to CIELAB conversion, binary masks, connected
//! components and bounding-box geometry.

use std::collections::VecDeque;
use std::path::Path;

use image::ImageEncoder;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImagingError {
    #[error("image dimensions must be at least 1x1, got {width}x{height}")]
    EmptyImage { width: u32, height: u32 },
    #[error("pixel buffer has {actual} entries, expected {expected}")]
    BufferSize { expected: usize, actual: usize },
    #[error("mask is {actual:?}, expected {expected:?}")]
    DimensionMismatch {
        expected: (u32, u32),
        actual: (u32, u32),
    },
    #[error("failed to read or write image {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: image::ImageError,
    },
}

/// 8-bit sRGB frame, row-major, three bytes per pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    width: u32,
    height: u32,
    pixels: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: u32, height: u32, pixels: Vec<u8>) -> Result<Self, ImagingError> {
        if width == 0 || height == 0 {
            return Err(ImagingError::EmptyImage { width, height });
        }
        let expected = width as usize * height as usize * 3;
        if pixels.len() != expected {
            return Err(ImagingError::BufferSize {
                expected,
                actual: pixels.len(),
            });
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    /// Builds an image by evaluating `f(x, y)` for every pixel.
    ///
    /// Panics if either dimension is zero.
    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> [u8; 3]) -> Self {
        assert!(width > 0 && height > 0, "image dimensions must be positive");
        let mut pixels = Vec::with_capacity(width as usize * height as usize * 3);
        for y in 0..height {
            for x in 0..width {
                pixels.extend_from_slice(&f(x, y));
            }
        }
        Self {
            width,
            height,
            pixels,
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn get(&self, x: u32, y: u32) -> [u8; 3] {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn put(&mut self, x: u32, y: u32, rgb: [u8; 3]) {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self, ImagingError> {
        let path = path.as_ref();
        let img = image::open(path)
            .map_err(|source| ImagingError::Io {
                path: path.display().to_string(),
                source,
            })?
            .to_rgb8();
        let (width, height) = img.dimensions();
        Self::new(width, height, img.into_raw())
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<(), ImagingError> {
        let path = path.as_ref();
        image::save_buffer_with_format(
            path,
            &self.pixels,
            self.width,
            self.height,
            image::ExtendedColorType::Rgb8,
            image::ImageFormat::Png,
        )
        .map_err(|source| ImagingError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    /// PNG encoding of the frame held in memory.
    pub fn to_png_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        image::codecs::png::PngEncoder::new(&mut out)
            .write_image(
                &self.pixels,
                self.width,
                self.height,
                image::ExtendedColorType::Rgb8,
            )
            .expect("encoding an in-memory RGB buffer cannot fail");
        out
    }
}

/// CIELAB frame (D65), row-major `[L, a, b]` triples.
#[derive(Debug, Clone, PartialEq)]
pub struct LabImage {
    width: u32,
    height: u32,
    pixels: Vec<[f64; 3]>,
}

impl LabImage {
    pub fn new(width: u32, height: u32, pixels: Vec<[f64; 3]>) -> Result<Self, ImagingError> {
        if width == 0 || height == 0 {
            return Err(ImagingError::EmptyImage { width, height });
        }
        let expected = width as usize * height as usize;
        if pixels.len() != expected {
            return Err(ImagingError::BufferSize {
                expected,
                actual: pixels.len(),
            });
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn pixels(&self) -> &[[f64; 3]] {
        &self.pixels
    }

    pub fn get(&self, x: u32, y: u32) -> [f64; 3] {
        self.pixels[y as usize * self.width as usize + x as usize]
    }
}

// D65 reference white, 2° observer.
const WHITE_X: f64 = 0.950_47;
const WHITE_Y: f64 = 1.0;
const WHITE_Z: f64 = 1.088_83;

fn srgb_to_linear(c: u8) -> f64 {
    let c = f64::from(c) / 255.0;
    if c <= 0.040_45 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

fn lab_f(t: f64) -> f64 {
    const DELTA: f64 = 6.0 / 29.0;
    if t > DELTA * DELTA * DELTA {
        t.cbrt()
    } else {
        t / (3.0 * DELTA * DELTA) + 4.0 / 29.0
    }
}

fn linear_rgb_to_lab(r: f64, g: f64, b: f64) -> [f64; 3] {
    let x = 0.412_456_4 * r + 0.357_576_1 * g + 0.180_437_5 * b;
    let y = 0.212_672_9 * r + 0.715_152_2 * g + 0.072_175_0 * b;
    let z = 0.019_333_9 * r + 0.119_192_0 * g + 0.950_304_1 * b;
    let fx = lab_f(x / WHITE_X);
    let fy = lab_f(y / WHITE_Y);
    let fz = lab_f(z / WHITE_Z);
    [
        (116.0 * fy - 16.0).clamp(0.0, 100.0),
        500.0 * (fx - fy),
        200.0 * (fy - fz),
    ]
}

/// Converts one sRGB triple to CIELAB under D65.
pub fn srgb_to_lab(rgb: [u8; 3]) -> [f64; 3] {
    linear_rgb_to_lab(
        srgb_to_linear(rgb[0]),
        srgb_to_linear(rgb[1]),
        srgb_to_linear(rgb[2]),
    )
}

pub fn rgb_to_lab(img: &RgbImage) -> LabImage {
    let linear: Vec<f64> = (0..=255u8).map(srgb_to_linear).collect();
    let pixels = img
        .pixels
        .chunks_exact(3)
        .map(|p| {
            linear_rgb_to_lab(
                linear[p[0] as usize],
                linear[p[1] as usize],
                linear[p[2] as usize],
            )
        })
        .collect();
    LabImage {
        width: img.width,
        height: img.height,
        pixels,
    }
}

/// One boolean per pixel. Serialized as a run-length encoding.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "crate::rle::Rle", try_from = "crate::rle::Rle")]
pub struct BinaryMask {
    width: u32,
    height: u32,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            bits: vec![false; width as usize * height as usize],
        }
    }

    pub fn from_bits(width: u32, height: u32, bits: Vec<bool>) -> Result<Self, ImagingError> {
        let expected = width as usize * height as usize;
        if bits.len() != expected {
            return Err(ImagingError::BufferSize {
                expected,
                actual: bits.len(),
            });
        }
        Ok(Self {
            width,
            height,
            bits,
        })
    }

    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> bool) -> Self {
        let mut bits = Vec::with_capacity(width as usize * height as usize);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            bits,
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, x: u32, y: u32) -> bool {
        self.bits[y as usize * self.width as usize + x as usize]
    }

    pub fn set(&mut self, x: u32, y: u32, value: bool) {
        self.bits[y as usize * self.width as usize + x as usize] = value;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    /// Foreground pixel coordinates in raster order.
    pub fn foreground(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        let w = self.width;
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(move |(i, _)| (i as u32 % w, i as u32 / w))
    }

    /// Copies the region under `bbox` (clamped to the mask) into a new mask.
    pub fn crop(&self, bbox: &BoundingBox) -> BinaryMask {
        let b = bbox.clamp_to(self.width, self.height).unwrap_or(BoundingBox {
            x: 0,
            y: 0,
            w: 1,
            h: 1,
        });
        BinaryMask::from_fn(b.w, b.h, |x, y| {
            let (gx, gy) = (b.x + x, b.y + y);
            gx < self.width && gy < self.height && self.get(gx, gy)
        })
    }

    pub fn union_with(&mut self, other: &BinaryMask) -> Result<(), ImagingError> {
        if (self.width, self.height) != (other.width, other.height) {
            return Err(ImagingError::DimensionMismatch {
                expected: (self.width, self.height),
                actual: (other.width, other.height),
            });
        }
        for (a, &b) in self.bits.iter_mut().zip(&other.bits) {
            *a |= b;
        }
        Ok(())
    }

    /// Tight bounding box of the foreground, if any.
    pub fn bounding_box(&self) -> Option<BoundingBox> {
        let mut it = self.foreground();
        let (x0, y0) = it.next()?;
        let (mut min_x, mut max_x, mut max_y) = (x0, x0, y0);
        for (x, y) in it {
            min_x = min_x.min(x);
            max_x = max_x.max(x);
            max_y = max_y.max(y);
        }
        Some(BoundingBox::new(min_x, y0, max_x - min_x + 1, max_y - y0 + 1))
    }

    /// Reads a single-channel PNG; any nonzero value is foreground.
    pub fn load_png(path: impl AsRef<Path>) -> Result<Self, ImagingError> {
        let path = path.as_ref();
        let img = image::open(path)
            .map_err(|source| ImagingError::Io {
                path: path.display().to_string(),
                source,
            })?
            .to_luma8();
        let (width, height) = img.dimensions();
        let bits = img.into_raw().into_iter().map(|v| v != 0).collect();
        Self::from_bits(width, height, bits)
    }

    /// Writes an 8-bit grayscale PNG with values 0 and 255.
    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<(), ImagingError> {
        let path = path.as_ref();
        let raw: Vec<u8> = self.bits.iter().map(|&b| if b { 255 } else { 0 }).collect();
        image::save_buffer_with_format(
            path,
            &raw,
            self.width,
            self.height,
            image::ExtendedColorType::L8,
            image::ImageFormat::Png,
        )
        .map_err(|source| ImagingError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}

/// Axis-aligned pixel rectangle; `(x, y)` is the top-left corner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl BoundingBox {
    pub const fn new(x: u32, y: u32, w: u32, h: u32) -> Self {
        Self { x, y, w, h }
    }

    pub fn area(&self) -> u64 {
        u64::from(self.w) * u64::from(self.h)
    }

    /// Exclusive right edge.
    pub fn right(&self) -> u64 {
        u64::from(self.x) + u64::from(self.w)
    }

    /// Exclusive bottom edge.
    pub fn bottom(&self) -> u64 {
        u64::from(self.y) + u64::from(self.h)
    }

    pub fn contains(&self, x: u32, y: u32) -> bool {
        x >= self.x && y >= self.y && u64::from(x) < self.right() && u64::from(y) < self.bottom()
    }

    pub fn fits_within(&self, width: u32, height: u32) -> bool {
        self.w >= 1 && self.h >= 1 && self.right() <= u64::from(width) && self.bottom() <= u64::from(height)
    }

    pub fn intersection_area(&self, other: &BoundingBox) -> u64 {
        let x0 = self.x.max(other.x) as u64;
        let y0 = self.y.max(other.y) as u64;
        let x1 = self.right().min(other.right());
        let y1 = self.bottom().min(other.bottom());
        if x1 <= x0 || y1 <= y0 {
            0
        } else {
            (x1 - x0) * (y1 - y0)
        }
    }

    /// Clamps the box to a `width`×`height` frame. Returns `None` when nothing
    /// of the box remains inside.
    pub fn clamp_to(&self, width: u32, height: u32) -> Option<BoundingBox> {
        if self.x >= width || self.y >= height || self.w == 0 || self.h == 0 {
            return None;
        }
        let right = self.right().min(u64::from(width)) as u32;
        let bottom = self.bottom().min(u64::from(height)) as u32;
        Some(BoundingBox::new(self.x, self.y, right - self.x, bottom - self.y))
    }
}

/// Intersection over union of two boxes; 0 when they are disjoint.
pub fn bbox_iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter == 0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    inter as f64 / union as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Connectivity {
    #[default]
    Four,
    Eight,
}

impl Connectivity {
    fn offsets(self) -> &'static [(i64, i64)] {
        match self {
            Connectivity::Four => &[(-1, 0), (1, 0), (0, -1), (0, 1)],
            Connectivity::Eight => &[
                (-1, -1),
                (0, -1),
                (1, -1),
                (-1, 0),
                (1, 0),
                (-1, 1),
                (0, 1),
                (1, 1),
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub id: u32,
    pub pixel_count: usize,
    pub bbox: BoundingBox,
    pub centroid: (f64, f64),
}

/// Per-pixel component labels (0 = background) plus per-component summaries.
/// `components[i].id == i + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct ComponentSet {
    pub width: u32,
    pub height: u32,
    pub labels: Vec<u32>,
    pub components: Vec<Component>,
}

impl ComponentSet {
    /// Mask of one component.
    pub fn component_mask(&self, id: u32) -> BinaryMask {
        BinaryMask {
            width: self.width,
            height: self.height,
            bits: self.labels.iter().map(|&l| l == id).collect(),
        }
    }
}

/// Labels maximal connected foreground regions. Ids start at 1 and follow the
/// raster-scan order of each component's first pixel.
pub fn connected_components(mask: &BinaryMask, connectivity: Connectivity) -> ComponentSet {
    let (w, h) = (mask.width as usize, mask.height as usize);
    let mut labels = vec![0u32; w * h];
    let mut components = Vec::new();
    let mut queue = VecDeque::new();
    let offsets = connectivity.offsets();

    for start in 0..w * h {
        if !mask.bits[start] || labels[start] != 0 {
            continue;
        }
        let id = components.len() as u32 + 1;
        labels[start] = id;
        queue.push_back(start);
        let (mut count, mut sx, mut sy) = (0usize, 0f64, 0f64);
        let (mut min_x, mut min_y, mut max_x, mut max_y) = (usize::MAX, usize::MAX, 0, 0);
        while let Some(i) = queue.pop_front() {
            let (x, y) = (i % w, i / w);
            count += 1;
            sx += x as f64;
            sy += y as f64;
            min_x = min_x.min(x);
            min_y = min_y.min(y);
            max_x = max_x.max(x);
            max_y = max_y.max(y);
            for &(dx, dy) in offsets {
                let nx = x as i64 + dx;
                let ny = y as i64 + dy;
                if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                    continue;
                }
                let j = ny as usize * w + nx as usize;
                if mask.bits[j] && labels[j] == 0 {
                    labels[j] = id;
                    queue.push_back(j);
                }
            }
        }
        components.push(Component {
            id,
            pixel_count: count,
            bbox: BoundingBox::new(
                min_x as u32,
                min_y as u32,
                (max_x - min_x + 1) as u32,
                (max_y - min_y + 1) as u32,
            ),
            centroid: (sx / count as f64, sy / count as f64),
        });
    }

    ComponentSet {
        width: mask.width,
        height: mask.height,
        labels,
        components,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn lab_of(rgb: [u8; 3]) -> [f64; 3] {
        rgb_to_lab(&RgbImage::new(1, 1, rgb.to_vec()).unwrap()).get(0, 0)
    }

    #[test]
    fn black_is_zero_lightness() {
        assert_eq!(lab_of([0, 0, 0]), [0.0, 0.0, 0.0]);
    }

    #[test]
    fn white_point() {
        let [l, a, b] = lab_of([255, 255, 255]);
        assert!((l - 100.0).abs() < 1e-3, "L = {l}");
        assert!(a.abs() < 0.01 && b.abs() < 0.01, "a = {a}, b = {b}");
    }

    #[test]
    fn reference_colors() {
        // Values from an independent sRGB -> CIELAB implementation.
        let cases = [
            ([255, 0, 0], [53.2406, 80.0923, 67.2028]),
            ([0, 255, 0], [87.7351, -86.1830, 83.1797]),
            ([0, 0, 255], [32.2957, 79.1856, -107.8573]),
            ([128, 64, 32], [34.7248, 24.9996, 31.3728]),
        ];
        for (rgb, expected) in cases {
            let lab = lab_of(rgb);
            for c in 0..3 {
                assert!(
                    (lab[c] - expected[c]).abs() < 0.05,
                    "{rgb:?}: {lab:?} vs {expected:?}"
                );
            }
        }
        let [l, a, b] = lab_of([255, 0, 0]);
        assert!((l - 53.2).abs() < 0.5 && (a - 80.1).abs() < 0.5 && (b - 67.2).abs() < 0.5);
    }

    #[test]
    fn image_and_pixel_paths_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let rgb = [rng.random(), rng.random(), rng.random()];
            assert_eq!(lab_of(rgb), srgb_to_lab(rgb));
        }
    }

    #[test]
    fn lab_channel_ranges_hold_on_random_colors() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let pixels: Vec<u8> = (0..100_000 * 3).map(|_| rng.random()).collect();
        let img = RgbImage::new(100_000, 1, pixels).unwrap();
        for &[l, a, b] in rgb_to_lab(&img).pixels() {
            assert!((0.0..=100.0).contains(&l));
            assert!((-128.0..=127.0).contains(&a));
            assert!((-128.0..=127.0).contains(&b));
        }
    }

    #[test]
    fn rejects_bad_buffers() {
        assert!(matches!(
            RgbImage::new(0, 4, vec![]),
            Err(ImagingError::EmptyImage { .. })
        ));
        assert!(matches!(
            RgbImage::new(2, 2, vec![0; 11]),
            Err(ImagingError::BufferSize { expected: 12, .. })
        ));
    }

    #[test]
    fn empty_mask_has_no_components() {
        let set = connected_components(&BinaryMask::new(16, 9), Connectivity::Eight);
        assert!(set.components.is_empty());
        assert!(set.labels.iter().all(|&l| l == 0));
    }

    #[test]
    fn two_squares() {
        let mask = BinaryMask::from_fn(12, 6, |x, y| y >= 1 && y < 4 && (x < 3 || (6..9).contains(&x)));
        let set = connected_components(&mask, Connectivity::Four);
        assert_eq!(set.components.len(), 2);
        assert!(set.components.iter().all(|c| c.pixel_count == 9));
        assert_eq!(set.components[0].bbox, BoundingBox::new(0, 1, 3, 3));
        assert_eq!(set.components[1].bbox, BoundingBox::new(6, 1, 3, 3));
        assert_eq!(set.components[0].centroid, (1.0, 2.0));
    }

    #[test]
    fn diagonal_pixels_join_only_under_eight_connectivity() {
        let mask = BinaryMask::from_fn(3, 3, |x, y| x == y);
        assert_eq!(connected_components(&mask, Connectivity::Four).components.len(), 3);
        assert_eq!(connected_components(&mask, Connectivity::Eight).components.len(), 1);
    }

    /// Recursive-free flood fill over an explicit stack, visiting seeds in
    /// raster order.
    fn flood_fill_oracle(mask: &BinaryMask, eight: bool) -> Vec<u32> {
        let (w, h) = (mask.width() as i64, mask.height() as i64);
        let mut out = vec![0u32; (w * h) as usize];
        let mut next = 0;
        for sy in 0..h {
            for sx in 0..w {
                let s = (sy * w + sx) as usize;
                if !mask.bits()[s] || out[s] != 0 {
                    continue;
                }
                next += 1;
                let mut stack = vec![(sx, sy)];
                out[s] = next;
                while let Some((x, y)) = stack.pop() {
                    for dy in -1..=1i64 {
                        for dx in -1..=1i64 {
                            if (dx == 0 && dy == 0) || (!eight && dx != 0 && dy != 0) {
                                continue;
                            }
                            let (nx, ny) = (x + dx, y + dy);
                            if nx < 0 || ny < 0 || nx >= w || ny >= h {
                                continue;
                            }
                            let j = (ny * w + nx) as usize;
                            if mask.bits()[j] && out[j] == 0 {
                                out[j] = next;
                                stack.push((nx, ny));
                            }
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn matches_flood_fill_oracle_on_random_masks() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for trial in 0..50 {
            let density = 0.3 + 0.01 * trial as f64;
            let mask = BinaryMask::from_fn(32, 32, |_, _| rng.random_bool(density));
            for (conn, eight) in [(Connectivity::Four, false), (Connectivity::Eight, true)] {
                let set = connected_components(&mask, conn);
                assert_eq!(set.labels, flood_fill_oracle(&mask, eight));
                let total: usize = set.components.iter().map(|c| c.pixel_count).sum();
                assert_eq!(total, mask.count());
            }
        }
    }

    #[test]
    fn iou_examples() {
        let a = BoundingBox::new(0, 0, 10, 10);
        assert_eq!(bbox_iou(&a, &a), 1.0);
        assert_eq!(bbox_iou(&a, &BoundingBox::new(20, 20, 5, 5)), 0.0);
        assert_eq!(bbox_iou(&a, &BoundingBox::new(10, 0, 5, 5)), 0.0);
        let b = BoundingBox::new(5, 0, 10, 10);
        assert!((bbox_iou(&a, &b) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn crop_and_bounding_box() {
        let mask = BinaryMask::from_fn(10, 10, |x, y| (3..6).contains(&x) && (2..8).contains(&y));
        let bbox = mask.bounding_box().unwrap();
        assert_eq!(bbox, BoundingBox::new(3, 2, 3, 6));
        let crop = mask.crop(&bbox);
        assert_eq!((crop.width(), crop.height()), (3, 6));
        assert_eq!(crop.count(), 18);
        assert_eq!(BinaryMask::new(4, 4).bounding_box(), None);
    }

    #[test]
    fn png_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let img = RgbImage::from_fn(7, 5, |x, y| [x as u8 * 30, y as u8 * 40, 7]);
        img.save_png(dir.path().join("f.png")).unwrap();
        assert_eq!(RgbImage::load_png(dir.path().join("f.png")).unwrap(), img);
        let mask = BinaryMask::from_fn(7, 5, |x, y| (x + y) % 3 == 0);
        mask.save_png(dir.path().join("m.png")).unwrap();
        assert_eq!(BinaryMask::load_png(dir.path().join("m.png")).unwrap(), mask);
    }

    fn arb_box() -> impl Strategy<Value = BoundingBox> {
        (0u32..50, 0u32..50, 1u32..30, 1u32..30).prop_map(|(x, y, w, h)| BoundingBox::new(x, y, w, h))
    }

    proptest! {
        #[test]
        fn iou_is_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
            let ab = bbox_iou(&a, &b);
            prop_assert_eq!(ab, bbox_iou(&b, &a));
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert_eq!(bbox_iou(&a, &a), 1.0);
        }

        #[test]
        fn iou_shrinks_as_boxes_separate(a in arb_box(), step in 1u32..5) {
            let mut prev = 1.0;
            for k in 0..40 {
                let moved = BoundingBox { x: a.x + k * step, ..a };
                let iou = bbox_iou(&a, &moved);
                prop_assert!(iou <= prev);
                prev = iou;
            }
        }

        #[test]
        fn components_are_translation_invariant(
            bits in proptest::collection::vec(any::<bool>(), 16 * 16),
            dx in 0u32..8, dy in 0u32..8,
        ) {
            let mask = BinaryMask::from_bits(16, 16, bits).unwrap();
            let shifted = BinaryMask::from_fn(24, 24, |x, y| {
                x >= dx && y >= dy && x - dx < 16 && y - dy < 16 && mask.get(x - dx, y - dy)
            });
            let a = connected_components(&mask, Connectivity::Eight);
            let b = connected_components(&shifted, Connectivity::Eight);
            prop_assert_eq!(a.components.len(), b.components.len());
            // Translation preserves raster order of first pixels, so ids line up.
            for (ca, cb) in a.components.iter().zip(&b.components) {
                prop_assert_eq!(ca.pixel_count, cb.pixel_count);
                prop_assert_eq!(ca.bbox.x + dx, cb.bbox.x);
                prop_assert_eq!(ca.bbox.y + dy, cb.bbox.y);
                prop_assert_eq!((ca.bbox.w, ca.bbox.h), (cb.bbox.w, cb.bbox.h));
            }
        }
    }
}
