//! Manifest ingestion, coordinate normalization, anchoring of immutable crops,
//! the text-in-figure containment filter and the skew-based quality heuristic.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{RavError, Result};
use crate::model::{AnchorCrop, BoundingBox, EntityType, QualityClass, QualityKind};
use crate::raster::{otsu_threshold, rotate, Raster};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    #[default]
    TopLeft,
    BottomLeft,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RasterSource {
    /// PNG file, relative paths resolve against the manifest directory.
    Path(PathBuf),
    /// Base64-encoded PNG.
    Inline(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddedSpan {
    pub bbox: BoundingBox,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PageDescriptor {
    pub page_id: String,
    pub raster: RasterSource,
    pub width: u32,
    pub height: u32,
    #[serde(default)]
    pub origin_convention: Origin,
    /// Native text layer, when the source had one.
    #[serde(default)]
    pub embedded_text: Option<Vec<EmbeddedSpan>>,
    /// Quality set by an external classifier; overrides the heuristic.
    #[serde(default)]
    pub quality: Option<QualityKind>,
}

impl PageDescriptor {
    pub fn has_embedded_text(&self) -> bool {
        self.embedded_text.as_ref().is_some_and(|s| !s.is_empty())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionSpec {
    pub region_id: String,
    pub page_id: String,
    pub bbox: BoundingBox,
    pub entity_type: EntityType,
    #[serde(default)]
    pub detector_payload: Option<serde_json::Map<String, serde_json::Value>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionManifest {
    pub document_id: String,
    pub pages: Vec<PageDescriptor>,
    pub regions: Vec<RegionSpec>,
}

impl RegionManifest {
    pub fn page(&self, page_id: &str) -> Option<&PageDescriptor> {
        self.pages.iter().find(|p| p.page_id == page_id)
    }
}

/// A normalized manifest plus what normalization had to discard.
#[derive(Debug, Clone)]
pub struct LoadedManifest {
    pub manifest: RegionManifest,
    pub base_dir: PathBuf,
    pub dropped_degenerate: usize,
}

/// Overflow tolerated on load; anchoring clips it.
const BOUNDS_SLACK_PX: f64 = 1.0;

pub fn load_manifest(path: &Path) -> Result<LoadedManifest> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| RavError::Manifest(format!("{}: {e}", path.display())))?;
    let base = path.parent().unwrap_or_else(|| Path::new(".")).to_path_buf();
    parse_manifest(&text, base)
}

/// Parses and normalizes: bottom-left pages are flipped to top-left, zero-area
/// regions are dropped, and references and bounds are checked.
pub fn parse_manifest(text: &str, base_dir: PathBuf) -> Result<LoadedManifest> {
    let mut manifest: RegionManifest = serde_json::from_str(text)
        .map_err(|e| RavError::Manifest(format!("parse failure: {e}")))?;

    let mut page_heights = BTreeMap::new();
    for page in &mut manifest.pages {
        if page.width == 0 || page.height == 0 {
            return Err(RavError::Manifest(format!("page {} has zero size", page.page_id)));
        }
        if page_heights
            .insert(page.page_id.clone(), (page.origin_convention, page.width, page.height))
            .is_some()
        {
            return Err(RavError::Manifest(format!("duplicate page id {}", page.page_id)));
        }
        if page.origin_convention == Origin::BottomLeft {
            let h = page.height as f64;
            for span in page.embedded_text.iter_mut().flatten() {
                span.bbox = flip_vertical(span.bbox, h);
            }
            page.origin_convention = Origin::TopLeft;
        }
    }

    let mut seen = BTreeSet::new();
    let mut kept = Vec::with_capacity(manifest.regions.len());
    let mut dropped = 0;
    for mut region in manifest.regions.drain(..) {
        let Some(&(origin, w, h)) = page_heights.get(&region.page_id) else {
            return Err(RavError::Manifest(format!(
                "region {} references unknown page {}",
                region.region_id, region.page_id
            )));
        };
        if !seen.insert(region.region_id.clone()) {
            return Err(RavError::Manifest(format!("duplicate region id {}", region.region_id)));
        }
        if origin == Origin::BottomLeft {
            region.bbox = flip_vertical(region.bbox, h as f64);
        }
        if region.bbox.is_degenerate() {
            warn!("dropping degenerate region {}", region.region_id);
            dropped += 1;
            continue;
        }
        let b = region.bbox;
        if b.x0 < -BOUNDS_SLACK_PX
            || b.y0 < -BOUNDS_SLACK_PX
            || b.x1 > w as f64 + BOUNDS_SLACK_PX
            || b.y1 > h as f64 + BOUNDS_SLACK_PX
        {
            return Err(RavError::Manifest(format!(
                "region {} bbox ({}, {}, {}, {}) outside page {}x{}",
                region.region_id, b.x0, b.y0, b.x1, b.y1, w, h
            )));
        }
        kept.push(region);
    }
    manifest.regions = kept;
    Ok(LoadedManifest {
        manifest,
        base_dir,
        dropped_degenerate: dropped,
    })
}

/// `y' = H - y` with the ends swapped so `y0 < y1` still holds.
pub fn flip_vertical(b: BoundingBox, page_height: f64) -> BoundingBox {
    BoundingBox::new(b.x0, page_height - b.y1, b.x1, page_height - b.y0)
}

/// Share of `inner`'s area that lies inside `outer`.
pub fn containment_ratio(inner: &BoundingBox, outer: &BoundingBox) -> f64 {
    let area = inner.area();
    if area <= 0.0 {
        return 0.0;
    }
    (inner.intersection_area(outer) / area).clamp(0.0, 1.0)
}

/// Removes text regions enclosed by an image or table on the same page.
/// Returns `(kept, removed)`, both in input order.
pub fn spatial_region_filter(
    regions: &[RegionSpec],
    threshold: f64,
) -> (Vec<RegionSpec>, Vec<RegionSpec>) {
    let containers: Vec<&RegionSpec> = regions
        .iter()
        .filter(|r| matches!(r.entity_type, EntityType::Image | EntityType::Table))
        .collect();
    regions.iter().cloned().partition(|r| {
        r.entity_type != EntityType::Text
            || !containers.iter().any(|c| {
                c.page_id == r.page_id
                    && c.region_id != r.region_id
                    && containment_ratio(&r.bbox, &c.bbox) >= threshold
            })
    })
}

pub fn load_page_raster(page: &PageDescriptor, base_dir: &Path) -> Result<Raster> {
    let raster = match &page.raster {
        RasterSource::Path(p) => {
            let full = if p.is_relative() { base_dir.join(p) } else { p.clone() };
            Raster::load_png(&full)?
        }
        RasterSource::Inline(b64) => Raster::from_base64_png(b64)?,
    };
    if raster.width() != page.width || raster.height() != page.height {
        return Err(RavError::Raster(format!(
            "page {} raster is {}x{}, manifest says {}x{}",
            page.page_id,
            raster.width(),
            raster.height(),
            page.width,
            page.height
        )));
    }
    Ok(raster)
}

pub fn load_page_rasters(loaded: &LoadedManifest) -> Result<BTreeMap<String, Raster>> {
    loaded
        .manifest
        .pages
        .iter()
        .map(|p| Ok((p.page_id.clone(), load_page_raster(p, &loaded.base_dir)?)))
        .collect()
}

#[derive(Debug, Clone)]
pub struct AnchorSet {
    pub crops: BTreeMap<String, AnchorCrop>,
    pub clipped: usize,
}

/// One immutable crop per region, cut from the unprocessed page rasters.
pub fn anchor_crops(regions: &[RegionSpec], pages: &BTreeMap<String, Raster>) -> Result<AnchorSet> {
    let mut crops = BTreeMap::new();
    let mut clipped = 0;
    for region in regions {
        let page = pages.get(&region.page_id).ok_or_else(|| {
            RavError::Raster(format!("no raster for page {}", region.page_id))
        })?;
        let ((x0, y0, x1, y1), was_clipped) = region.bbox.pixel_rect(page.width(), page.height());
        if was_clipped {
            warn!("region {} bbox clipped to page bounds", region.region_id);
            clipped += 1;
        }
        let pixels = page.crop(x0, y0, x1, y1)?;
        crops.insert(
            region.region_id.clone(),
            AnchorCrop::new(region.region_id.clone(), region.page_id.clone(), region.bbox, pixels),
        );
    }
    Ok(AnchorSet { crops, clipped })
}

const SKEW_LIMIT_DEG: f64 = 45.0;
const SKEW_STEP_DEG: f64 = 0.5;
const SKEW_MAX_POINTS: usize = 60_000;
const CLEAN_SKEW_DEG: f64 = 1.0;

/// Dominant text-line angle in degrees, counter-clockwise positive.
///
/// Foreground is the Otsu minority class. Each candidate angle in
/// [-45, 45] at 0.5 degree steps gets a Hough accumulator over line offsets;
/// the angle whose accumulator is most concentrated (largest sum of squared
/// bin counts) wins. Ties go to the smaller magnitude.
pub fn estimate_skew(raster: &Raster) -> f64 {
    let gray = raster.to_gray();
    let t = otsu_threshold(&gray);
    let (w, h) = (gray.width(), gray.height());
    let dark: Vec<(u32, u32)> = (0..h)
        .flat_map(|y| (0..w).map(move |x| (x, y)))
        .filter(|&(x, y)| gray.gray_at(x, y) <= t)
        .collect();
    let total = gray.pixel_count();
    let points: Vec<(u32, u32)> = if dark.len() * 2 <= total {
        dark
    } else {
        let dark_set = dark.len();
        if dark_set == total {
            return 0.0;
        }
        (0..h)
            .flat_map(|y| (0..w).map(move |x| (x, y)))
            .filter(|&(x, y)| gray.gray_at(x, y) > t)
            .collect()
    };
    if points.len() < 2 {
        return 0.0;
    }
    let stride = points.len().div_ceil(SKEW_MAX_POINTS);
    let sample: Vec<(f64, f64)> = points
        .iter()
        .step_by(stride)
        .map(|&(x, y)| (x as f64, y as f64))
        .collect();

    let offset = w as f64 + 1.0;
    let bins = (2.0 * w as f64 + h as f64 + 3.0) as usize;
    let steps = (SKEW_LIMIT_DEG / SKEW_STEP_DEG) as i32;
    let mut acc = vec![0u32; bins];
    let mut best = (f64::MIN, 0.0f64);
    for i in -steps..=steps {
        let theta = i as f64 * SKEW_STEP_DEG;
        let (sin, cos) = theta.to_radians().sin_cos();
        acc.iter_mut().for_each(|c| *c = 0);
        for &(x, y) in &sample {
            let rho = x * sin + y * cos + offset;
            acc[rho.round() as usize] += 1;
        }
        let score: f64 = acc.iter().map(|&c| (c as f64) * (c as f64)).sum();
        let better = score > best.0 || (score == best.0 && theta.abs() < best.1.abs());
        if better {
            best = (score, theta);
        }
    }
    best.1
}

/// Heuristic page class from skew and the presence of a text layer.
/// Never emits the photographed, handwritten or overlapping classes.
pub fn classify_page_quality(raster: &Raster, has_embedded_text: bool) -> QualityClass {
    let skew = estimate_skew(raster).clamp(-SKEW_LIMIT_DEG, SKEW_LIMIT_DEG);
    let kind = if skew.abs() <= CLEAN_SKEW_DEG {
        if has_embedded_text {
            QualityKind::Clean
        } else {
            QualityKind::ScannedClean
        }
    } else {
        QualityKind::ScannedDegraded
    };
    QualityClass {
        kind,
        skew_degrees: skew,
    }
}

/// Rotates by `-angle_degrees` about the centre with white fill.
pub fn deskew(raster: &Raster, angle_degrees: f64) -> Raster {
    rotate(raster, -angle_degrees.clamp(-SKEW_LIMIT_DEG, SKEW_LIMIT_DEG))
}
