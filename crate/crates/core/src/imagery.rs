//! Satellite raster preprocessing, image resizing and augmentation.
//!
//! Pixels are stored row-major, interleaved RGB. Rasters are georeferenced by
//! the projected coordinates of their top-left corner; columns run east and
//! rows run south.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::ImageType;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoTransform {
    pub origin_x: f64,
    pub origin_y: f64,
    /// Meters per (square) pixel.
    pub pixel_size: f64,
}

impl GeoTransform {
    /// Row and column of the pixel containing `(x, y)`, possibly outside the raster.
    pub fn pixel_of(&self, x: f64, y: f64) -> (i64, i64) {
        let col = ((x - self.origin_x) / self.pixel_size).floor() as i64;
        let row = ((self.origin_y - y) / self.pixel_size).floor() as i64;
        (row, col)
    }

    /// Projected coordinates of a pixel's center.
    pub fn center_of(&self, row: i64, col: i64) -> (f64, f64) {
        (
            self.origin_x + (col as f64 + 0.5) * self.pixel_size,
            self.origin_y - (row as f64 + 0.5) * self.pixel_size,
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
    pub geo: GeoTransform,
}

impl Raster {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>, geo: GeoTransform) -> Result<Self> {
        if width == 0 || height == 0 || pixels.len() != width * height * 3 {
            return Err(Error::Shape(format!(
                "raster {width}x{height} with {} bytes",
                pixels.len()
            )));
        }
        if !(geo.pixel_size > 0.0) {
            return Err(Error::validation("raster pixel size must be positive"));
        }
        Ok(Raster { width, height, pixels, geo })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub household_id: String,
    pub image_type: ImageType,
}

/// 8-bit RGB image.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
    pub provenance: Option<Provenance>,
}

impl Image {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || pixels.len() != width * height * 3 {
            return Err(Error::Shape(format!(
                "image {width}x{height} with {} bytes",
                pixels.len()
            )));
        }
        Ok(Image { width, height, pixels, provenance: None })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let pixels = rgb.iter().copied().cycle().take(width * height * 3).collect();
        Image { width, height, pixels, provenance: None }
    }

    pub fn with_provenance(mut self, household_id: &str, image_type: ImageType) -> Self {
        self.provenance = Some(Provenance { household_id: household_id.to_string(), image_type });
        self
    }

    /// Scale to `[0, 1]`.
    pub fn normalized(&self) -> NormImage {
        NormImage {
            width: self.width,
            height: self.height,
            data: self.pixels.iter().map(|&p| f64::from(p) / 255.0).collect(),
        }
    }

    pub fn mean_brightness(&self) -> f64 {
        self.pixels.iter().map(|&p| f64::from(p)).sum::<f64>() / self.pixels.len() as f64
    }
}

/// RGB image with channel values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl NormImage {
    pub fn to_u8(&self) -> Image {
        Image {
            width: self.width,
            height: self.height,
            pixels: self.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect(),
            provenance: None,
        }
    }

    #[inline]
    fn at(&self, row: usize, col: usize, ch: usize) -> f64 {
        self.data[(row * self.width + col) * 3 + ch]
    }

    /// Bilinear sample at fractional pixel coordinates with edge replication.
    fn sample(&self, y: f64, x: f64, ch: usize) -> f64 {
        let y = y.clamp(0.0, (self.height - 1) as f64);
        let x = x.clamp(0.0, (self.width - 1) as f64);
        let (y0, x0) = (y.floor() as usize, x.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(self.height - 1), (x0 + 1).min(self.width - 1));
        let (fy, fx) = (y - y0 as f64, x - x0 as f64);
        let top = self.at(y0, x0, ch) * (1.0 - fx) + self.at(y0, x1, ch) * fx;
        let bottom = self.at(y1, x0, ch) * (1.0 - fx) + self.at(y1, x1, ch) * fx;
        top * (1.0 - fy) + bottom * fy
    }
}

/// Value at rank `round(p / 100 * (n - 1))` of the sorted channel.
///
/// Nearest-rank selection keeps the clip idempotent: the clipped channel has
/// the same value at that rank.
fn channel_percentile(values: &mut [u8], p: f64) -> u8 {
    let k = ((p / 100.0) * (values.len() - 1) as f64).round() as usize;
    *values.select_nth_unstable(k).1
}

/// Clip each channel to its `[p_low, p_high]` percentiles and, when `rescale`
/// is set, stretch the clipped range linearly to `[0, 255]`. Constant
/// channels are left untouched.
pub fn percentile_clip(raster: &Raster, p_low: f64, p_high: f64, rescale: bool) -> Result<Raster> {
    if !(0.0 <= p_low && p_low < p_high && p_high <= 100.0) {
        return Err(Error::validation(format!(
            "percentile_clip: need 0 <= p_low < p_high <= 100, got ({p_low}, {p_high})"
        )));
    }
    let mut out = raster.clone();
    for ch in 0..3 {
        let mut values: Vec<u8> = raster.pixels.iter().skip(ch).step_by(3).copied().collect();
        let lo = channel_percentile(&mut values, p_low);
        let hi = channel_percentile(&mut values, p_high);
        let (min, max) = values.iter().fold((u8::MAX, u8::MIN), |(a, b), &v| (a.min(v), b.max(v)));
        if min == max {
            continue;
        }
        for px in out.pixels.iter_mut().skip(ch).step_by(3) {
            let v = (*px).clamp(lo, hi);
            *px = if rescale && hi > lo {
                ((f64::from(v - lo) / f64::from(hi - lo)) * 255.0).round() as u8
            } else {
                v
            };
        }
    }
    Ok(out)
}

/// Side length in pixels of the square window covering a buffer.
pub fn buffer_window_size(buffer_m: f64, pixel_size: f64) -> usize {
    ((2.0 * buffer_m / pixel_size) - 1e-9).ceil().max(1.0) as usize
}

/// Cut the square window of side `2 * buffer_m` centered on the pixel
/// containing `point`. Fails when the window leaves the raster.
pub fn crop_buffer(raster: &Raster, point: (f64, f64), buffer_m: f64) -> Result<Image> {
    if !(buffer_m > 0.0) {
        return Err(Error::validation("crop_buffer: buffer must be positive"));
    }
    let size = buffer_window_size(buffer_m, raster.geo.pixel_size) as i64;
    let (row, col) = raster.geo.pixel_of(point.0, point.1);
    let (r0, c0) = (row - size / 2, col - size / 2);
    let (h, w) = (raster.height as i64, raster.width as i64);
    if r0 < 0 || c0 < 0 || r0 + size > h || c0 + size > w {
        let overlap_rows = (r0 + size).min(h) - r0.max(0);
        let overlap_cols = (c0 + size).min(w) - c0.max(0);
        let overlap = (overlap_rows.max(0) * overlap_cols.max(0)) as f64 / (size * size) as f64;
        return Err(Error::validation(format!(
            "crop_buffer: {size}px window at ({:.2}, {:.2}) leaves the raster (overlap {:.1}%)",
            point.0,
            point.1,
            overlap * 100.0
        )));
    }
    let size = size as usize;
    let mut pixels = Vec::with_capacity(size * size * 3);
    for r in 0..size {
        let start = ((r0 as usize + r) * raster.width + c0 as usize) * 3;
        pixels.extend_from_slice(&raster.pixels[start..start + size * 3]);
    }
    Image::new(size, size, pixels)
}

/// Bilinear resize on normalized values with corner-aligned sampling.
pub fn resize_norm(image: &NormImage, out_h: usize, out_w: usize) -> NormImage {
    assert!(out_h > 0 && out_w > 0, "resize: target dimensions must be positive");
    if out_h == image.height && out_w == image.width {
        return image.clone();
    }
    let scale = |out: usize, inp: usize| {
        if out > 1 {
            (inp - 1) as f64 / (out - 1) as f64
        } else {
            0.0
        }
    };
    let (sy, sx) = (scale(out_h, image.height), scale(out_w, image.width));
    let mut data = Vec::with_capacity(out_h * out_w * 3);
    for r in 0..out_h {
        for c in 0..out_w {
            for ch in 0..3 {
                data.push(image.sample(r as f64 * sy, c as f64 * sx, ch));
            }
        }
    }
    NormImage { width: out_w, height: out_h, data }
}

/// Bilinear resize of an 8-bit image, rounding to the nearest level.
pub fn resize(image: &Image, out_h: usize, out_w: usize) -> Image {
    if out_h == image.height && out_w == image.width {
        return image.clone();
    }
    let mut out = resize_norm(&image.normalized(), out_h, out_w).to_u8();
    out.provenance = image.provenance.clone();
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentPolicy {
    pub flip_probability: f64,
    /// Rotation drawn uniformly from `[-max, max]` degrees.
    pub max_rotation_deg: f64,
    /// Translation drawn uniformly from `[-max, max]` times the image size.
    pub max_translation: f64,
    /// Also rotate by a random multiple of 90 degrees (satellite views).
    pub right_angle_rotations: bool,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        AugmentPolicy {
            flip_probability: 0.5,
            max_rotation_deg: 10.0,
            max_translation: 0.05,
            right_angle_rotations: false,
        }
    }
}

impl AugmentPolicy {
    pub fn none() -> Self {
        AugmentPolicy {
            flip_probability: 0.0,
            max_rotation_deg: 0.0,
            max_translation: 0.0,
            right_angle_rotations: false,
        }
    }
}

/// Random horizontal flip, then rotation, then translation. Pixels pulled in
/// from outside the frame replicate the nearest edge.
///
/// The same number of draws is taken from `rng` whatever the policy, so a
/// stream stays aligned across policies.
pub fn augment<R: Rng + ?Sized>(image: &NormImage, rng: &mut R, policy: &AugmentPolicy) -> NormImage {
    let flip_draw: f64 = rng.random();
    let angle_draw: f64 = rng.random();
    let tx_draw: f64 = rng.random();
    let ty_draw: f64 = rng.random();
    let quarter_turns: u32 = rng.random_range(0..4);

    let (h, w) = (image.height, image.width);
    let mut out = image.clone();
    if flip_draw < policy.flip_probability {
        for r in 0..h {
            for c in 0..w / 2 {
                for ch in 0..3 {
                    out.data.swap((r * w + c) * 3 + ch, (r * w + (w - 1 - c)) * 3 + ch);
                }
            }
        }
    }

    let mut angle = (2.0 * angle_draw - 1.0) * policy.max_rotation_deg.to_radians();
    if policy.right_angle_rotations {
        angle += f64::from(quarter_turns) * std::f64::consts::FRAC_PI_2;
    }
    let tx = (2.0 * tx_draw - 1.0) * policy.max_translation * w as f64;
    let ty = (2.0 * ty_draw - 1.0) * policy.max_translation * h as f64;
    if angle == 0.0 && tx == 0.0 && ty == 0.0 {
        return out;
    }

    // Inverse map: undo the translation, then the rotation about the center.
    let src = out.clone();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (sin, cos) = angle.sin_cos();
    for r in 0..h {
        for c in 0..w {
            let dy = r as f64 - ty - cy;
            let dx = c as f64 - tx - cx;
            let sy = cy + cos * dy - sin * dx;
            let sx = cx + sin * dy + cos * dx;
            for ch in 0..3 {
                out.data[(r * w + c) * 3 + ch] = src.sample(sy, sx, ch);
            }
        }
    }
    out
}

pub fn read_png(path: &Path) -> Result<Image> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    Image::new(w as usize, h as usize, img.into_raw())
}

pub fn write_png(path: &Path, image: &Image) -> Result<()> {
    image::save_buffer(
        path,
        &image.pixels,
        image.width as u32,
        image.height as u32,
        image::ColorType::Rgb8,
    )?;
    Ok(())
}

/// Raster pixels as PNG plus a JSON sidecar with the georeference.
pub fn write_raster(png_path: &Path, raster: &Raster) -> Result<()> {
    image::save_buffer(
        png_path,
        &raster.pixels,
        raster.width as u32,
        raster.height as u32,
        image::ColorType::Rgb8,
    )?;
    let sidecar = png_path.with_extension("json");
    std::fs::write(&sidecar, serde_json::to_string_pretty(&raster.geo)?)
        .map_err(|e| Error::io(sidecar, e))
}

pub fn read_raster(png_path: &Path) -> Result<Raster> {
    let img = read_png(png_path)?;
    let sidecar = png_path.with_extension("json");
    let text = std::fs::read_to_string(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
    let geo: GeoTransform = serde_json::from_str(&text)?;
    Raster::new(img.width, img.height, img.pixels, geo)
}
