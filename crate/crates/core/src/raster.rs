//! Owned 8-bit rasters and the pixel operations the validators share.
//!
//! A [`Raster`] is either single-channel grayscale or packed RGB. On the wire
//! and in trace files it travels as a base64-encoded PNG so that transport is
//! lossless.

use std::io::Cursor;
use std::path::Path;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use font8x8::{UnicodeFonts, BASIC_FONTS, BLOCK_FONTS, BOX_FONTS, GREEK_FONTS, LATIN_FONTS, MISC_FONTS};
use image::{DynamicImage, GrayImage, ImageFormat, RgbImage};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

use crate::error::{RavError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channels {
    Gray,
    Rgb,
}

impl Channels {
    pub fn count(self) -> usize {
        match self {
            Channels::Gray => 1,
            Channels::Rgb => 3,
        }
    }
}

#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Raster {
    width: u32,
    height: u32,
    channels: Channels,
    data: Vec<u8>,
}

impl std::fmt::Debug for Raster {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Raster")
            .field("width", &self.width)
            .field("height", &self.height)
            .field("channels", &self.channels)
            .finish_non_exhaustive()
    }
}

impl Raster {
    pub fn new(width: u32, height: u32, channels: Channels, data: Vec<u8>) -> Result<Self> {
        let expected = width as usize * height as usize * channels.count();
        if data.len() != expected {
            return Err(RavError::Raster(format!(
                "buffer length {} does not match {width}x{height}x{}",
                data.len(),
                channels.count()
            )));
        }
        Ok(Raster {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn filled_gray(width: u32, height: u32, value: u8) -> Self {
        Raster {
            width,
            height,
            channels: Channels::Gray,
            data: vec![value; width as usize * height as usize],
        }
    }

    pub fn from_gray_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> u8) -> Self {
        let mut data = Vec::with_capacity(width as usize * height as usize);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Raster {
            width,
            height,
            channels: Channels::Gray,
            data,
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn channels(&self) -> Channels {
        self.channels
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn is_empty(&self) -> bool {
        self.width == 0 || self.height == 0
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }

    /// Grayscale byte at (x, y). RGB is reduced with Rec.601 luma.
    pub fn gray_at(&self, x: u32, y: u32) -> u8 {
        let i = y as usize * self.width as usize + x as usize;
        match self.channels {
            Channels::Gray => self.data[i],
            Channels::Rgb => {
                let p = &self.data[i * 3..i * 3 + 3];
                luma(p[0], p[1], p[2]).round().clamp(0.0, 255.0) as u8
            }
        }
    }

    /// Luma plane as floating point, row-major.
    pub fn luma_f64(&self) -> Vec<f64> {
        match self.channels {
            Channels::Gray => self.data.iter().map(|&v| v as f64).collect(),
            Channels::Rgb => self
                .data
                .chunks_exact(3)
                .map(|p| luma(p[0], p[1], p[2]))
                .collect(),
        }
    }

    pub fn to_gray(&self) -> Raster {
        match self.channels {
            Channels::Gray => self.clone(),
            Channels::Rgb => Raster {
                width: self.width,
                height: self.height,
                channels: Channels::Gray,
                data: self
                    .data
                    .chunks_exact(3)
                    .map(|p| luma(p[0], p[1], p[2]).round().clamp(0.0, 255.0) as u8)
                    .collect(),
            },
        }
    }

    /// Copies the half-open pixel rectangle `[x0, x1) x [y0, y1)`.
    pub fn crop(&self, x0: u32, y0: u32, x1: u32, y1: u32) -> Result<Raster> {
        if x0 >= x1 || y0 >= y1 || x1 > self.width || y1 > self.height {
            return Err(RavError::Raster(format!(
                "crop rectangle ({x0},{y0})-({x1},{y1}) outside {}x{}",
                self.width, self.height
            )));
        }
        let c = self.channels.count();
        let row_bytes = (x1 - x0) as usize * c;
        let mut data = Vec::with_capacity(row_bytes * (y1 - y0) as usize);
        for y in y0..y1 {
            let start = (y as usize * self.width as usize + x0 as usize) * c;
            data.extend_from_slice(&self.data[start..start + row_bytes]);
        }
        Ok(Raster {
            width: x1 - x0,
            height: y1 - y0,
            channels: self.channels,
            data,
        })
    }

    pub fn map_gray(&self, mut f: impl FnMut(u8) -> u8) -> Raster {
        let g = self.to_gray();
        Raster {
            data: g.data.iter().map(|&v| f(v)).collect(),
            ..g
        }
    }

    pub fn inverted(&self) -> Raster {
        Raster {
            data: self.data.iter().map(|&v| 255 - v).collect(),
            ..self.clone()
        }
    }

    /// Hex SHA-256 over dimensions, channel layout and pixel bytes.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.width.to_le_bytes());
        h.update(self.height.to_le_bytes());
        h.update([self.channels.count() as u8]);
        h.update(&self.data);
        h.finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn to_dynamic(&self) -> DynamicImage {
        match self.channels {
            Channels::Gray => DynamicImage::ImageLuma8(
                GrayImage::from_raw(self.width, self.height, self.data.clone())
                    .expect("raster buffer length is checked at construction"),
            ),
            Channels::Rgb => DynamicImage::ImageRgb8(
                RgbImage::from_raw(self.width, self.height, self.data.clone())
                    .expect("raster buffer length is checked at construction"),
            ),
        }
    }

    pub fn from_dynamic(img: DynamicImage) -> Raster {
        match img {
            DynamicImage::ImageLuma8(g) => Raster {
                width: g.width(),
                height: g.height(),
                channels: Channels::Gray,
                data: g.into_raw(),
            },
            other => {
                let rgb = other.into_rgb8();
                Raster {
                    width: rgb.width(),
                    height: rgb.height(),
                    channels: Channels::Rgb,
                    data: rgb.into_raw(),
                }
            }
        }
    }

    pub fn encode_png(&self) -> Vec<u8> {
        let mut out = Cursor::new(Vec::new());
        self.to_dynamic()
            .write_to(&mut out, ImageFormat::Png)
            .expect("png encoding into memory cannot fail");
        out.into_inner()
    }

    pub fn decode_png(bytes: &[u8]) -> Result<Raster> {
        let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)
            .map_err(|e| RavError::Raster(format!("png decode: {e}")))?;
        Ok(Raster::from_dynamic(img))
    }

    pub fn to_base64_png(&self) -> String {
        BASE64.encode(self.encode_png())
    }

    pub fn from_base64_png(text: &str) -> Result<Raster> {
        let bytes = BASE64
            .decode(text.trim())
            .map_err(|e| RavError::Raster(format!("base64 decode: {e}")))?;
        Raster::decode_png(&bytes)
    }

    pub fn load_png(path: &Path) -> Result<Raster> {
        let bytes = std::fs::read(path).map_err(|e| RavError::io(path, e))?;
        Raster::decode_png(&bytes)
    }

    /// Round-trips through a JPEG encoder at the given quality.
    pub fn jpeg_roundtrip(&self, quality: u8) -> Result<Raster> {
        let mut out = Cursor::new(Vec::new());
        let encoder = image::codecs::jpeg::JpegEncoder::new_with_quality(&mut out, quality);
        self.to_dynamic()
            .write_with_encoder(encoder)
            .map_err(|e| RavError::Raster(format!("jpeg encode: {e}")))?;
        let img = image::load_from_memory_with_format(out.get_ref(), ImageFormat::Jpeg)
            .map_err(|e| RavError::Raster(format!("jpeg decode: {e}")))?;
        let decoded = Raster::from_dynamic(img);
        Ok(match self.channels {
            Channels::Gray => decoded.to_gray(),
            Channels::Rgb => decoded,
        })
    }
}

impl Serialize for Raster {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_base64_png())
    }
}

impl<'de> Deserialize<'de> for Raster {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let text = String::deserialize(deserializer)?;
        Raster::from_base64_png(&text).map_err(serde::de::Error::custom)
    }
}

fn luma(r: u8, g: u8, b: u8) -> f64 {
    0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64
}

/// Floating-point grayscale plane used by the metric kernels.
#[derive(Debug, Clone, PartialEq)]
pub struct Plane {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Plane {
    pub fn from_raster(r: &Raster) -> Plane {
        Plane {
            width: r.width() as usize,
            height: r.height() as usize,
            data: r.luma_f64(),
        }
    }

    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn to_raster(&self) -> Raster {
        Raster {
            width: self.width as u32,
            height: self.height as u32,
            channels: Channels::Gray,
            data: self
                .data
                .iter()
                .map(|v| v.round().clamp(0.0, 255.0) as u8)
                .collect(),
        }
    }
}

/// Bilinear resample of the luma plane with pixel-center alignment.
pub fn resize_bilinear(src: &Raster, width: u32, height: u32) -> Raster {
    if src.width() == width && src.height() == height {
        return src.to_gray();
    }
    let plane = Plane::from_raster(src);
    let (sw, sh) = (plane.width as f64, plane.height as f64);
    let (dw, dh) = (width as f64, height as f64);
    Raster::from_gray_fn(width, height, |x, y| {
        let fx = ((x as f64 + 0.5) * sw / dw - 0.5).clamp(0.0, sw - 1.0);
        let fy = ((y as f64 + 0.5) * sh / dh - 0.5).clamp(0.0, sh - 1.0);
        sample_bilinear(&plane, fx, fy).round().clamp(0.0, 255.0) as u8
    })
}

pub(crate) fn sample_bilinear(plane: &Plane, fx: f64, fy: f64) -> f64 {
    let x0 = fx.floor() as usize;
    let y0 = fy.floor() as usize;
    let x1 = (x0 + 1).min(plane.width - 1);
    let y1 = (y0 + 1).min(plane.height - 1);
    let ax = fx - x0 as f64;
    let ay = fy - y0 as f64;
    let top = plane.at(x0, y0) * (1.0 - ax) + plane.at(x1, y0) * ax;
    let bottom = plane.at(x0, y1) * (1.0 - ax) + plane.at(x1, y1) * ax;
    top * (1.0 - ay) + bottom * ay
}

/// Nearest-neighbour resample. Channel layout is preserved.
pub fn resize_nearest(src: &Raster, width: u32, height: u32) -> Raster {
    if src.width() == width && src.height() == height {
        return src.clone();
    }
    let c = src.channels().count();
    let mut data = Vec::with_capacity(width as usize * height as usize * c);
    for y in 0..height {
        let sy = ((y as u64 * src.height() as u64) / height as u64) as usize;
        for x in 0..width {
            let sx = ((x as u64 * src.width() as u64) / width as u64) as usize;
            let i = (sy * src.width() as usize + sx) * c;
            data.extend_from_slice(&src.data()[i..i + c]);
        }
    }
    Raster {
        width,
        height,
        channels: src.channels(),
        data,
    }
}

/// Area-average (box filter) resample with fractional pixel coverage.
pub fn resize_area(src: &Plane, width: usize, height: usize) -> Plane {
    let horizontal = area_weights(src.width, width);
    let vertical = area_weights(src.height, height);
    let mut rows = vec![0.0; width * src.height];
    for y in 0..src.height {
        for (ox, taps) in horizontal.iter().enumerate() {
            rows[y * width + ox] = taps.iter().map(|&(sx, w)| w * src.at(sx, y)).sum();
        }
    }
    let mut data = vec![0.0; width * height];
    for (oy, taps) in vertical.iter().enumerate() {
        for x in 0..width {
            data[oy * width + x] = taps.iter().map(|&(sy, w)| w * rows[sy * width + x]).sum();
        }
    }
    Plane {
        width,
        height,
        data,
    }
}

fn area_weights(src_len: usize, dst_len: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = src_len as f64 / dst_len as f64;
    (0..dst_len)
        .map(|o| {
            let start = o as f64 * scale;
            let end = start + scale;
            let mut taps = Vec::new();
            let mut s = start.floor() as usize;
            while (s as f64) < end && s < src_len {
                let cover = (end.min(s as f64 + 1.0) - start.max(s as f64)).max(0.0);
                if cover > 0.0 {
                    taps.push((s, cover / scale));
                }
                s += 1;
            }
            taps
        })
        .collect()
}

/// Otsu's global threshold over the 8-bit grayscale histogram.
///
/// Pixels strictly above the returned value are foreground-white.
pub fn otsu_threshold(gray: &Raster) -> u8 {
    let mut hist = [0u64; 256];
    for y in 0..gray.height() {
        for x in 0..gray.width() {
            hist[gray.gray_at(x, y) as usize] += 1;
        }
    }
    let total: u64 = hist.iter().sum();
    if total == 0 {
        return 0;
    }
    let sum_all: f64 = hist.iter().enumerate().map(|(i, &c)| i as f64 * c as f64).sum();
    let mut weight_bg = 0u64;
    let mut sum_bg = 0.0;
    let mut best = 0.0;
    let mut threshold = 0u8;
    for (t, &count) in hist.iter().enumerate() {
        weight_bg += count;
        if weight_bg == 0 {
            continue;
        }
        let weight_fg = total - weight_bg;
        if weight_fg == 0 {
            break;
        }
        sum_bg += t as f64 * count as f64;
        let mean_bg = sum_bg / weight_bg as f64;
        let mean_fg = (sum_all - sum_bg) / weight_fg as f64;
        let between = weight_bg as f64 * weight_fg as f64 * (mean_bg - mean_fg).powi(2);
        if between > best {
            best = between;
            threshold = t as u8;
        }
    }
    threshold
}

/// Otsu binarization to {0, 255}.
pub fn binarize_otsu(src: &Raster) -> Raster {
    let gray = src.to_gray();
    let t = otsu_threshold(&gray);
    gray.map_gray(|v| if v > t { 255 } else { 0 })
}

/// Rotates content counter-clockwise (as displayed) by `degrees` about the
/// image centre, bilinear resampling, white fill outside the source.
pub fn rotate(src: &Raster, degrees: f64) -> Raster {
    if degrees == 0.0 {
        return src.clone();
    }
    let plane = Plane::from_raster(src);
    let (w, h) = (plane.width as f64, plane.height as f64);
    let (cx, cy) = (w / 2.0, h / 2.0);
    let (sin, cos) = degrees.to_radians().sin_cos();
    Raster::from_gray_fn(src.width(), src.height(), |x, y| {
        let dx = x as f64 + 0.5 - cx;
        let dy_up = cy - (y as f64 + 0.5);
        let sx_math = dx * cos + dy_up * sin;
        let sy_math = -dx * sin + dy_up * cos;
        let fx = cx + sx_math - 0.5;
        let fy = cy - sy_math - 0.5;
        if fx < -0.5 || fy < -0.5 || fx > w - 0.5 || fy > h - 0.5 {
            return 255;
        }
        sample_bilinear(&plane, fx.clamp(0.0, w - 1.0), fy.clamp(0.0, h - 1.0))
            .round()
            .clamp(0.0, 255.0) as u8
    })
}

pub const GLYPH: usize = 8;

/// 8x8 bitmap for `c`; characters the font lacks draw as a hollow box.
pub fn glyph(c: char) -> [u8; 8] {
    BASIC_FONTS
        .get(c)
        .or_else(|| LATIN_FONTS.get(c))
        .or_else(|| GREEK_FONTS.get(c))
        .or_else(|| BOX_FONTS.get(c))
        .or_else(|| BLOCK_FONTS.get(c))
        .or_else(|| MISC_FONTS.get(c))
        .unwrap_or([0x00, 0x7e, 0x42, 0x42, 0x42, 0x42, 0x7e, 0x00])
}

/// Grayscale drawing surface with the fixed 8x8 bitmap font.
pub struct Canvas {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl Canvas {
    pub fn white(width: usize, height: usize) -> Self {
        Canvas {
            width,
            height,
            data: vec![255; width * height],
        }
    }

    pub fn set(&mut self, x: usize, y: usize, v: u8) {
        if x < self.width && y < self.height {
            self.data[y * self.width + x] = v;
        }
    }

    pub fn hline(&mut self, x0: usize, x1: usize, y: usize) {
        for x in x0..x1 {
            self.set(x, y, 0);
        }
    }

    pub fn vline(&mut self, x: usize, y0: usize, y1: usize) {
        for y in y0..y1 {
            self.set(x, y, 0);
        }
    }

    /// Draws `text` with the fixed 8x8 font, top-left at (x, y), `scale`
    /// pixels per font pixel.
    pub fn text(&mut self, x: usize, y: usize, text: &str, scale: usize) {
        for (i, c) in text.chars().enumerate() {
            let rows = glyph(c);
            for (gy, bits) in rows.iter().enumerate() {
                for gx in 0..GLYPH {
                    if bits & (1 << gx) != 0 {
                        for sy in 0..scale {
                            for sx in 0..scale {
                                self.set(
                                    x + (i * GLYPH + gx) * scale + sx,
                                    y + gy * scale + sy,
                                    0,
                                );
                            }
                        }
                    }
                }
            }
        }
    }

    /// Filled rectangle over the half-open span `[x0, x1) x [y0, y1)`.
    pub fn fill_rect(&mut self, x0: usize, y0: usize, x1: usize, y1: usize, v: u8) {
        for y in y0..y1.min(self.height) {
            for x in x0..x1.min(self.width) {
                self.data[y * self.width + x] = v;
            }
        }
    }

    /// Straight line between two points, `thickness` pixels wide.
    pub fn line(&mut self, from: (f64, f64), to: (f64, f64), thickness: usize, v: u8) {
        let steps = ((to.0 - from.0).abs().max((to.1 - from.1).abs()).ceil() as usize).max(1);
        let half = thickness as isize / 2;
        for i in 0..=steps {
            let t = i as f64 / steps as f64;
            let x = (from.0 + (to.0 - from.0) * t).round() as isize;
            let y = (from.1 + (to.1 - from.1) * t).round() as isize;
            for dy in -half..=half {
                for dx in -half..=half {
                    let (px, py) = (x + dx, y + dy);
                    if px >= 0 && py >= 0 {
                        self.set(px as usize, py as usize, v);
                    }
                }
            }
        }
    }

    /// Copies a raster's luma with its top-left corner at (x, y).
    pub fn blit(&mut self, src: &Raster, x: usize, y: usize) {
        for sy in 0..src.height() {
            for sx in 0..src.width() {
                self.set(x + sx as usize, y + sy as usize, src.gray_at(sx, sy));
            }
        }
    }

    pub fn into_raster(self) -> Raster {
        Raster::new(self.width as u32, self.height as u32, Channels::Gray, self.data)
            .expect("canvas buffer matches its size")
    }
}
