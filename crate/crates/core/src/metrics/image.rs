//! Image kernels: binarized SSIM, 64-bit DCT perceptual hash and
//! Laplacian-variance sharpness.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::raster::{binarize_otsu, resize_area, resize_bilinear, Plane, Raster};

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;
const SSIM_RANGE: f64 = 255.0;

/// SSIM between the Otsu-binarized grayscale forms of two rasters.
///
/// `img_a` is first resampled (bilinear) to the size of `img_b`. The mean SSIM
/// map value is clamped to `[0, 1]`.
pub fn ssim_binarized(img_a: &Raster, img_b: &Raster) -> f64 {
    let a = if img_a.width() != img_b.width() || img_a.height() != img_b.height() {
        resize_bilinear(img_a, img_b.width(), img_b.height())
    } else {
        img_a.clone()
    };
    let a = Plane::from_raster(&binarize_otsu(&a));
    let b = Plane::from_raster(&binarize_otsu(img_b));
    mean_ssim(&a, &b).clamp(0.0, 1.0)
}

/// Mean of the SSIM map with a Gaussian window over the valid region.
pub fn mean_ssim(a: &Plane, b: &Plane) -> f64 {
    assert_eq!((a.width, a.height), (b.width, b.height), "ssim needs equal sizes");
    let mut size = SSIM_WINDOW.min(a.width).min(a.height);
    if size.is_multiple_of(2) {
        size -= 1;
    }
    let kernel = gaussian_kernel(size, SSIM_SIGMA);
    let c1 = (SSIM_K1 * SSIM_RANGE).powi(2);
    let c2 = (SSIM_K2 * SSIM_RANGE).powi(2);

    let xx: Vec<f64> = a.data.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = b.data.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect();

    let (w, h) = (a.width, a.height);
    let mu_x = filter_valid(&a.data, w, h, &kernel);
    let mu_y = filter_valid(&b.data, w, h, &kernel);
    let e_xx = filter_valid(&xx, w, h, &kernel);
    let e_yy = filter_valid(&yy, w, h, &kernel);
    let e_xy = filter_valid(&xy, w, h, &kernel);

    let n = mu_x.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (mx, my) = (mu_x[i], mu_y[i]);
            let sx = e_xx[i] - mx * mx;
            let sy = e_yy[i] - my * my;
            let sxy = e_xy[i] - mx * my;
            ((2.0 * mx * my + c1) * (2.0 * sxy + c2)) / ((mx * mx + my * my + c1) * (sx + sy + c2))
        })
        .sum();
    total / n as f64
}

fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let half = (size / 2) as f64;
    let raw: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - half;
            (-(d * d) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let sum: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / sum).collect()
}

/// Separable 'valid' correlation; output is `(w-k+1) x (h-k+1)`.
fn filter_valid(data: &[f64], w: usize, h: usize, kernel: &[f64]) -> Vec<f64> {
    let k = kernel.len();
    let ow = w - k + 1;
    let oh = h - k + 1;
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        let line = &data[y * w..(y + 1) * w];
        for x in 0..ow {
            rows[y * ow + x] = kernel.iter().zip(&line[x..x + k]).map(|(c, v)| c * v).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = kernel
                .iter()
                .enumerate()
                .map(|(i, c)| c * rows[(y + i) * ow + x])
                .sum();
        }
    }
    out
}

/// 64-bit perceptual hash; prints as 16 lowercase hex digits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Hash64(pub u64);

impl Hash64 {
    pub fn hamming(self, other: Hash64) -> u32 {
        (self.0 ^ other.0).count_ones()
    }
}

impl fmt::Display for Hash64 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:016x}", self.0)
    }
}

impl FromStr for Hash64 {
    type Err = std::num::ParseIntError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        u64::from_str_radix(s, 16).map(Hash64)
    }
}

impl Serialize for Hash64 {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Hash64 {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

const PHASH_SIZE: usize = 32;

/// Ordered DCT coefficient positions `(row, col)` that feed the 64 hash bits:
/// the 8x8 low-frequency block in row-major order without the DC term, then
/// `(0, 8)`. The first position maps to the most significant bit.
pub fn phash_positions() -> [(usize, usize); 64] {
    let mut out = [(0, 0); 64];
    let mut i = 0;
    for u in 0..8 {
        for v in 0..8 {
            if u == 0 && v == 0 {
                continue;
            }
            out[i] = (u, v);
            i += 1;
        }
    }
    out[63] = (0, 8);
    out
}

/// DCT perceptual hash: grayscale, 32x32 area resample, orthonormal 2-D
/// DCT-II, one bit per selected coefficient above the median of the 64.
pub fn phash64(img: &Raster) -> Hash64 {
    let small = resize_area(&Plane::from_raster(img), PHASH_SIZE, PHASH_SIZE);
    let coeffs = dct_low_block(&small, 8, 9);
    let values: Vec<f64> = phash_positions().iter().map(|&(u, v)| coeffs[u][v]).collect();
    let mut sorted = values.clone();
    sorted.sort_by(f64::total_cmp);
    let median = (sorted[31] + sorted[32]) / 2.0;
    let bits = values
        .iter()
        .fold(0u64, |acc, &c| (acc << 1) | u64::from(c > median));
    Hash64(bits)
}

/// Orthonormal DCT-II coefficients for rows `0..rows` and columns `0..cols`.
pub(crate) fn dct_low_block(plane: &Plane, rows: usize, cols: usize) -> Vec<Vec<f64>> {
    let n = plane.width;
    debug_assert_eq!(plane.width, plane.height);
    let basis = |k: usize, x: usize| -> f64 {
        let alpha = if k == 0 {
            (1.0 / n as f64).sqrt()
        } else {
            (2.0 / n as f64).sqrt()
        };
        alpha * (std::f64::consts::PI * (2 * x + 1) as f64 * k as f64 / (2 * n) as f64).cos()
    };
    let row_pass: Vec<Vec<f64>> = (0..n)
        .map(|y| {
            (0..cols)
                .map(|v| (0..n).map(|x| plane.at(x, y) * basis(v, x)).sum())
                .collect()
        })
        .collect();
    (0..rows)
        .map(|u| {
            (0..cols)
                .map(|v| (0..n).map(|y| row_pass[y][v] * basis(u, y)).sum())
                .collect()
        })
        .collect()
}

/// `1 - hamming / 64`.
pub fn phash_similarity(h1: Hash64, h2: Hash64) -> f64 {
    1.0 - h1.hamming(h2) as f64 / 64.0
}

/// Population variance of the 4-neighbour Laplacian response, replicate border.
pub fn laplacian_variance(img: &Raster) -> f64 {
    let p = Plane::from_raster(img);
    laplacian_variance_plane(&p)
}

pub(crate) fn laplacian_variance_plane(p: &Plane) -> f64 {
    let (w, h) = (p.width, p.height);
    if w == 0 || h == 0 {
        return 0.0;
    }
    let at = |x: isize, y: isize| -> f64 {
        let cx = x.clamp(0, w as isize - 1) as usize;
        let cy = y.clamp(0, h as isize - 1) as usize;
        p.at(cx, cy)
    };
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for y in 0..h as isize {
        for x in 0..w as isize {
            let r = at(x - 1, y) + at(x + 1, y) + at(x, y - 1) + at(x, y + 1) - 4.0 * at(x, y);
            sum += r;
            sum_sq += r * r;
        }
    }
    let n = (w * h) as f64;
    let mean = sum / n;
    (sum_sq / n - mean * mean).max(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn checker(size: u32, cell: u32) -> Raster {
        Raster::from_gray_fn(size, size, |x, y| if (x / cell + y / cell).is_multiple_of(2) { 0 } else { 255 })
    }

    fn box_blur(r: &Raster) -> Raster {
        let p = Plane::from_raster(r);
        Raster::from_gray_fn(r.width(), r.height(), |x, y| {
            let mut s = 0.0;
            let mut n = 0.0;
            for dy in -2i64..=2 {
                for dx in -2i64..=2 {
                    let xx = (x as i64 + dx).clamp(0, r.width() as i64 - 1) as usize;
                    let yy = (y as i64 + dy).clamp(0, r.height() as i64 - 1) as usize;
                    s += p.at(xx, yy);
                    n += 1.0;
                }
            }
            (s / n).round() as u8
        })
    }

    #[test]
    fn ssim_identity() {
        let r = checker(40, 5);
        assert!((ssim_binarized(&r, &r) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn ssim_black_vs_white_is_near_zero() {
        let black = Raster::filled_gray(32, 32, 0);
        let white = Raster::filled_gray(32, 32, 255);
        let s = ssim_binarized(&black, &white);
        // C1 / (255^2 + C1) on every window
        let c1 = (0.01f64 * 255.0).powi(2);
        assert!((s - c1 / (255.0f64.powi(2) + c1)).abs() < 1e-12);
        assert!(s < 1e-3);
    }

    #[test]
    fn ssim_small_rasters_use_shrunk_window() {
        let a = Raster::from_gray_fn(4, 6, |x, _| if x < 2 { 0 } else { 255 });
        let s = ssim_binarized(&a, &a);
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ssim_resizes_first_argument() {
        let a = checker(20, 5);
        let b = checker(40, 10);
        assert!(ssim_binarized(&a, &b) > 0.9);
    }

    #[test]
    fn phash_similarity_examples() {
        assert_eq!(phash_similarity(Hash64(7), Hash64(7)), 1.0);
        assert_eq!(phash_similarity(Hash64(0), Hash64(u64::MAX)), 0.0);
        assert_eq!(phash_similarity(Hash64(0), Hash64(0xff)), 0.875);
    }

    #[test]
    fn phash_hex_roundtrip() {
        let h = Hash64(0x0123_4567_89ab_cdef);
        assert_eq!(h.to_string(), "0123456789abcdef");
        assert_eq!("0123456789abcdef".parse::<Hash64>().unwrap(), h);
    }

    #[test]
    fn phash_positions_are_distinct() {
        let mut p = phash_positions().to_vec();
        p.sort();
        p.dedup();
        assert_eq!(p.len(), 64);
        assert!(!p.contains(&(0, 0)));
    }

    #[test]
    #[allow(clippy::needless_range_loop)]
    fn dct_matches_direct_definition() {
        let r = Raster::from_gray_fn(32, 32, |x, y| ((x * 7 + y * 3) % 251) as u8);
        let p = Plane::from_raster(&r);
        let fast = dct_low_block(&p, 3, 3);
        let n: f64 = 32.0;
        for u in 0..3 {
            for v in 0..3 {
                let a = |k: usize| if k == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
                let mut s = 0.0;
                for y in 0..32 {
                    for x in 0..32 {
                        s += p.at(x, y)
                            * (std::f64::consts::PI * (2 * x + 1) as f64 * v as f64 / 64.0).cos()
                            * (std::f64::consts::PI * (2 * y + 1) as f64 * u as f64 / 64.0).cos();
                    }
                }
                assert!((fast[u][v] - a(u) * a(v) * s).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn laplacian_constant_is_zero() {
        assert_eq!(laplacian_variance(&Raster::filled_gray(10, 10, 77)), 0.0);
    }

    #[test]
    fn laplacian_sharp_beats_blurred() {
        let sharp = checker(48, 4);
        assert!(laplacian_variance(&sharp) > laplacian_variance(&box_blur(&sharp)));
    }

    #[test]
    fn laplacian_offset_invariant() {
        let r = Raster::from_gray_fn(20, 20, |x, y| ((x * 13 + y * 29) % 200) as u8);
        let shifted = r.map_gray(|v| v + 40);
        assert!((laplacian_variance(&r) - laplacian_variance(&shifted)).abs() < 1e-9);
    }
}
