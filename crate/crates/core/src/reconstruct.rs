//! Renders extractions back into forms comparable with the anchor crop, and
//! builds the anchor-side reference channel.
//!
//! Reference builders take the anchor and page, never the extraction.

use serde::{Deserialize, Serialize};

use crate::config::CaptionRule;
use crate::error::{RavError, Result};
use crate::ingest::PageDescriptor;
use crate::metrics::{laplacian_variance, normalize_text, phash64, Hash64};
use crate::model::{AnchorCrop, BoundingBox, ImageEntity, TableEntity};
use crate::raster::{resize_bilinear, resize_nearest, Canvas, Raster, GLYPH};

const CELL_PAD: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableShape {
    pub n_rows: usize,
    pub n_cols: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StructuralSignature {
    pub n_rows: usize,
    pub n_cols: usize,
    pub headers: Vec<String>,
    pub cells: Vec<String>,
}

impl StructuralSignature {
    pub fn shape(&self) -> TableShape {
        TableShape {
            n_rows: self.n_rows,
            n_cols: self.n_cols,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TableReconstruction {
    pub rendered: Raster,
    pub signature: StructuralSignature,
    pub serialized_cells: String,
}

/// The anchor-side reading of a crop returned by an OCR reference provider.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReferenceReading {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shape: Option<TableShape>,
}

/// Something that can read an anchor crop independently of the extraction.
pub trait ReferenceReader: Send + Sync {
    fn read(&self, anchor: &AnchorCrop) -> Result<ReferenceReading>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceSource {
    EmbeddedStream,
    ReOcr,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextReference {
    pub text: String,
    pub source: ReferenceSource,
}

/// Deterministic grid rendering of a table, resized to `target_w x target_h`.
///
/// White field, 1-px black rules around every cell, 8x8 bitmap glyphs with
/// 4-px padding, columns as wide as their longest text (at least one glyph).
/// A non-empty header list is drawn as an extra first row.
pub fn render_table_grid(entity: &TableEntity, target_w: u32, target_h: u32) -> Result<Raster> {
    if target_w == 0 || target_h == 0 {
        return Err(RavError::Raster("render target has zero size".into()));
    }
    Ok(resize_nearest(&render_table_natural(entity)?, target_w, target_h))
}

/// The grid at its own size, before any resize.
pub fn render_table_natural(entity: &TableEntity) -> Result<Raster> {
    if entity.n_rows == 0 || entity.n_cols == 0 || !entity.violations().is_empty() {
        return Err(RavError::DegenerateTable {
            n_rows: entity.n_rows,
            n_cols: entity.n_cols,
        });
    }
    let mut lines: Vec<&[String]> = Vec::with_capacity(entity.n_rows + 1);
    if !entity.headers.is_empty() {
        lines.push(&entity.headers);
    }
    lines.extend(entity.rows());

    let col_glyphs: Vec<usize> = (0..entity.n_cols)
        .map(|c| {
            lines
                .iter()
                .map(|row| row[c].chars().count())
                .max()
                .unwrap_or(0)
                .max(1)
        })
        .collect();
    let col_px: Vec<usize> = col_glyphs.iter().map(|g| g * GLYPH + 2 * CELL_PAD).collect();
    let row_px = GLYPH + 2 * CELL_PAD;
    let width = col_px.iter().sum::<usize>() + entity.n_cols + 1;
    let height = lines.len() * row_px + lines.len() + 1;

    let mut canvas = Canvas::white(width, height);
    let mut y = 0;
    for _ in 0..=lines.len() {
        canvas.hline(0, width, y);
        y += row_px + 1;
    }
    let mut x = 0;
    canvas.vline(0, 0, height);
    for w in &col_px {
        x += w + 1;
        canvas.vline(x, 0, height);
    }
    for (r, row) in lines.iter().enumerate() {
        let top = r * (row_px + 1) + 1 + CELL_PAD;
        let mut left = 1;
        for (c, text) in row.iter().enumerate() {
            canvas.text(left + CELL_PAD, top, text, 1);
            left += col_px[c] + 1;
        }
    }
    Ok(canvas.into_raster())
}

/// Headers then cells, row-major, space-joined and normalized.
pub fn structural_signature(entity: &TableEntity) -> (StructuralSignature, String) {
    let signature = StructuralSignature {
        n_rows: entity.n_rows,
        n_cols: entity.n_cols,
        headers: entity.headers.clone(),
        cells: entity.cells.clone(),
    };
    let joined = entity
        .headers
        .iter()
        .chain(&entity.cells)
        .map(String::as_str)
        .collect::<Vec<_>>()
        .join(" ");
    (signature, normalize_text(&joined))
}

pub fn reconstruct_table(entity: &TableEntity, anchor: &AnchorCrop) -> Result<TableReconstruction> {
    let rendered = render_table_grid(entity, anchor.width(), anchor.height())?;
    let (signature, serialized_cells) = structural_signature(entity);
    Ok(TableReconstruction {
        rendered,
        signature,
        serialized_cells,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageFeatureSet {
    pub phash_extracted: Hash64,
    pub phash_anchor: Hash64,
    pub sharp_extracted: f64,
    pub sharp_anchor: f64,
    pub caption_adjacent: bool,
}

/// Anchor half of the image features, computed once per region.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnchorImageFeatures {
    pub phash: Hash64,
    pub sharpness: f64,
    pub caption_adjacent: bool,
}

impl AnchorImageFeatures {
    pub fn from_anchor(
        anchor: &AnchorCrop,
        page_text_regions: &[BoundingBox],
        page_height: f64,
        rule: &CaptionRule,
    ) -> Self {
        AnchorImageFeatures {
            phash: phash64(anchor.pixels()),
            sharpness: laplacian_variance(anchor.pixels()),
            caption_adjacent: caption_match(&anchor.bbox(), page_text_regions, page_height, rule)
                .is_some(),
        }
    }

    /// Completes the feature set with the extracted crop. A crop at a
    /// different resolution is resampled to the anchor size before the
    /// sharpness measurement.
    pub fn with_extracted(&self, entity: &ImageEntity, anchor: &AnchorCrop) -> ImageFeatureSet {
        let crop = &entity.crop;
        let sharp_extracted = if crop.width() == anchor.width() && crop.height() == anchor.height() {
            laplacian_variance(crop)
        } else {
            laplacian_variance(&resize_bilinear(crop, anchor.width(), anchor.height()))
        };
        ImageFeatureSet {
            phash_extracted: phash64(crop),
            phash_anchor: self.phash,
            sharp_extracted,
            sharp_anchor: self.sharpness,
            caption_adjacent: self.caption_adjacent,
        }
    }
}

pub fn reconstruct_image_features(
    entity: &ImageEntity,
    anchor: &AnchorCrop,
    page_text_regions: &[BoundingBox],
    page_height: f64,
    rule: &CaptionRule,
) -> ImageFeatureSet {
    AnchorImageFeatures::from_anchor(anchor, page_text_regions, page_height, rule)
        .with_extracted(entity, anchor)
}

/// Index of the text box that qualifies as the caption of `image`: vertical
/// gap within `max_gap_fraction * page_height` and horizontal overlap (over
/// the narrower width) at least `min_horizontal_overlap`. Smallest gap wins,
/// then reading order.
pub fn caption_match(
    image: &BoundingBox,
    text_regions: &[BoundingBox],
    page_height: f64,
    rule: &CaptionRule,
) -> Option<usize> {
    let max_gap = rule.max_gap_fraction * page_height;
    text_regions
        .iter()
        .enumerate()
        .filter_map(|(i, t)| {
            let gap = (t.y0 - image.y1).max(image.y0 - t.y1).max(0.0);
            let overlap = (t.x1.min(image.x1) - t.x0.max(image.x0)).max(0.0);
            let narrower = t.width().min(image.width());
            let ratio = if narrower > 0.0 { overlap / narrower } else { 0.0 };
            (gap <= max_gap && ratio >= rule.min_horizontal_overlap).then_some((i, gap, t))
        })
        .min_by(|a, b| {
            a.1.total_cmp(&b.1)
                .then(a.2.y0.total_cmp(&b.2.y0))
                .then(a.2.x0.total_cmp(&b.2.x0))
        })
        .map(|(i, _, _)| i)
}

/// Embedded spans overlapping `bbox`, in (y0, x0) reading order.
pub fn embedded_text_within(page: &PageDescriptor, bbox: &BoundingBox) -> Option<String> {
    let spans = page.embedded_text.as_ref().filter(|s| !s.is_empty())?;
    let mut hits: Vec<_> = spans
        .iter()
        .filter(|s| s.bbox.intersection_area(bbox) > 0.0)
        .collect();
    hits.sort_by(|a, b| a.bbox.y0.total_cmp(&b.bbox.y0).then(a.bbox.x0.total_cmp(&b.bbox.x0)));
    Some(
        hits.iter()
            .map(|s| s.text.as_str())
            .collect::<Vec<_>>()
            .join(" "),
    )
}

/// Independent reading of the anchor: the page text layer when there is one,
/// otherwise the OCR reference provider on the crop.
pub fn reconstruct_text_reference(
    anchor: &AnchorCrop,
    page: &PageDescriptor,
    ocr: Option<&dyn ReferenceReader>,
) -> Result<TextReference> {
    if let Some(text) = embedded_text_within(page, &anchor.bbox()) {
        return Ok(TextReference {
            text,
            source: ReferenceSource::EmbeddedStream,
        });
    }
    let ocr = ocr.ok_or_else(|| {
        RavError::ReferenceUnavailable("no text layer and no OCR reference configured".into())
    })?;
    let reading = ocr.read(anchor)?;
    Ok(TextReference {
        text: reading.text,
        source: ReferenceSource::ReOcr,
    })
}

/// Reference reading for the table structural channel: the OCR reference
/// provider when configured, else the page text layer.
pub fn reconstruct_table_reference(
    anchor: &AnchorCrop,
    page: &PageDescriptor,
    ocr: Option<&dyn ReferenceReader>,
) -> Result<ReferenceReading> {
    if let Some(ocr) = ocr {
        return ocr.read(anchor);
    }
    embedded_text_within(page, &anchor.bbox())
        .map(|text| ReferenceReading { text, shape: None })
        .ok_or_else(|| {
            RavError::ReferenceUnavailable("no OCR reference and no text layer for table".into())
        })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{EmbeddedSpan, Origin, RasterSource};
    use crate::metrics::ssim_binarized;

    fn table(rows: Vec<Vec<&str>>, headers: Vec<&str>) -> TableEntity {
        TableEntity::from_rows(
            headers.into_iter().map(String::from).collect(),
            rows.into_iter()
                .map(|r| r.into_iter().map(String::from).collect())
                .collect(),
        )
        .unwrap()
    }

    fn anchor_at(bbox: BoundingBox, pixels: Raster) -> AnchorCrop {
        AnchorCrop::new("r".into(), "p".into(), bbox, pixels)
    }

    fn page(spans: Option<Vec<EmbeddedSpan>>) -> PageDescriptor {
        PageDescriptor {
            page_id: "p".into(),
            raster: RasterSource::Inline(String::new()),
            width: 200,
            height: 200,
            origin_convention: Origin::TopLeft,
            embedded_text: spans,
            quality: None,
        }
    }

    struct FixedOcr(&'static str);

    impl ReferenceReader for FixedOcr {
        fn read(&self, _anchor: &AnchorCrop) -> Result<ReferenceReading> {
            Ok(ReferenceReading {
                text: self.0.to_string(),
                shape: None,
            })
        }
    }

    #[test]
    fn empty_single_cell_is_a_bordered_white_field() {
        let t = table(vec![vec![""]], vec![]);
        let r = render_table_grid(&t, 18, 18).unwrap();
        // one glyph plus padding plus two rules in each direction
        assert_eq!((r.width(), r.height()), (18, 18));
        for i in 0..18 {
            assert_eq!(r.gray_at(i, 0), 0);
            assert_eq!(r.gray_at(i, 17), 0);
            assert_eq!(r.gray_at(0, i), 0);
            assert_eq!(r.gray_at(17, i), 0);
        }
        for y in 1..17 {
            for x in 1..17 {
                assert_eq!(r.gray_at(x, y), 255);
            }
        }
    }

    #[test]
    fn render_is_deterministic() {
        let t = table(vec![vec!["7B", "2k"], vec!["13B", "4k"]], vec!["Params", "Ctx"]);
        assert_eq!(
            render_table_grid(&t, 300, 90).unwrap(),
            render_table_grid(&t, 300, 90).unwrap()
        );
    }

    #[test]
    fn grid_mismatch_is_visible_to_ssim() {
        let two = table(vec![vec!["a", "b"], vec!["c", "d"]], vec![]);
        let three = table(
            vec![vec!["a", "b", "c"], vec!["d", "e", "f"], vec!["g", "h", "i"]],
            vec![],
        );
        let a = render_table_grid(&two, 120, 120).unwrap();
        let b = render_table_grid(&three, 120, 120).unwrap();
        assert!(ssim_binarized(&a, &b) < 0.9);
    }

    #[test]
    fn degenerate_table_rejected() {
        let t = TableEntity {
            n_rows: 0,
            n_cols: 3,
            headers: vec![],
            cells: vec![],
        };
        assert!(matches!(
            render_table_grid(&t, 10, 10),
            Err(RavError::DegenerateTable { .. })
        ));
    }

    #[test]
    fn signature_serialization() {
        let t = table(vec![vec!["a", "b"], vec!["c", "d"]], vec!["h1", "h2"]);
        let (sig, ser) = structural_signature(&t);
        assert_eq!(ser, "h1 h2 a b c d");
        assert_eq!((sig.n_rows, sig.n_cols), (2, 2));
        let sparse = table(vec![vec!["a", ""], vec!["", "d"]], vec![]);
        assert_eq!(structural_signature(&sparse).1, "a d");
        let padded = table(vec![vec!["a  ", "b\t"], vec!["c ", "d"]], vec!["h1 ", "h2"]);
        assert_eq!(structural_signature(&padded).1, ser);
    }

    #[test]
    fn caption_rules() {
        let rule = CaptionRule::default();
        let image = BoundingBox::new(100.0, 100.0, 300.0, 300.0);
        let beneath = BoundingBox::new(100.0, 300.0, 300.0, 320.0);
        let far = BoundingBox::new(100.0, 800.0, 300.0, 820.0);
        assert_eq!(caption_match(&image, &[beneath], 1000.0, &rule), Some(0));
        assert_eq!(caption_match(&image, &[far], 1000.0, &rule), None);
        let beside = BoundingBox::new(600.0, 300.0, 700.0, 320.0);
        assert_eq!(caption_match(&image, &[beside], 1000.0, &rule), None);
    }

    #[test]
    fn identical_crop_features_match() {
        let pixels = Raster::from_gray_fn(64, 48, |x, y| ((x * 5 + y * 3) % 256) as u8);
        let anchor = anchor_at(BoundingBox::new(0.0, 0.0, 64.0, 48.0), pixels.clone());
        let entity = ImageEntity {
            crop: pixels,
            scale_factor: 1.0,
            label: None,
            label_confidence: None,
            enrichment: None,
        };
        let f = reconstruct_image_features(&entity, &anchor, &[], 100.0, &CaptionRule::default());
        assert_eq!(f.phash_extracted, f.phash_anchor);
        assert_eq!(f.sharp_extracted, f.sharp_anchor);
        assert!(!f.caption_adjacent);
    }

    #[test]
    fn text_reference_prefers_embedded_stream() {
        let bbox = BoundingBox::new(10.0, 10.0, 100.0, 30.0);
        let anchor = anchor_at(bbox, Raster::filled_gray(90, 20, 255));
        let p = page(Some(vec![EmbeddedSpan {
            bbox,
            text: "Tokenizer.".into(),
        }]));
        let r = reconstruct_text_reference(&anchor, &p, Some(&FixedOcr("ignored"))).unwrap();
        assert_eq!(r.text, "Tokenizer.");
        assert_eq!(r.source, ReferenceSource::EmbeddedStream);
    }

    #[test]
    fn text_reference_falls_back_to_ocr() {
        let anchor = anchor_at(BoundingBox::new(0.0, 0.0, 10.0, 10.0), Raster::filled_gray(10, 10, 255));
        let r = reconstruct_text_reference(&anchor, &page(None), Some(&FixedOcr("scan"))).unwrap();
        assert_eq!(r.text, "scan");
        assert_eq!(r.source, ReferenceSource::ReOcr);
        assert!(matches!(
            reconstruct_text_reference(&anchor, &page(None), None),
            Err(RavError::ReferenceUnavailable(_))
        ));
    }

    #[test]
    fn stacked_spans_join_in_reading_order() {
        let bbox = BoundingBox::new(0.0, 0.0, 200.0, 100.0);
        let anchor = anchor_at(bbox, Raster::filled_gray(200, 100, 255));
        let p = page(Some(vec![
            EmbeddedSpan {
                bbox: BoundingBox::new(0.0, 50.0, 200.0, 60.0),
                text: "second".into(),
            },
            EmbeddedSpan {
                bbox: BoundingBox::new(0.0, 10.0, 200.0, 20.0),
                text: "first".into(),
            },
            EmbeddedSpan {
                bbox: BoundingBox::new(0.0, 150.0, 200.0, 160.0),
                text: "outside".into(),
            },
        ]));
        let r = reconstruct_text_reference(&anchor, &p, None).unwrap();
        assert_eq!(r.text, "first second");
    }
}
