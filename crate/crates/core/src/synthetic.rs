//! Seeded synthetic documents: rendered pages, manifests and the ground truth
//! the mock plugins read from. Used by tests, benches and the `sweep` command.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::RavConfig;
use crate::error::{RavError, Result};
use crate::evalkit::table_structure_eval;
use crate::ingest::{anchor_crops, EmbeddedSpan, Origin, PageDescriptor, RasterSource, RegionManifest, RegionSpec};
use crate::model::{
    BoundingBox, EntityType, Enrichment, ExtractedEntity, ImageType, QualityKind, TableEntity, TextEntity,
};
use crate::orchestrate::{score_entity, ReferenceChannel};
use crate::par::par_map;
use crate::plugins::{mock_extract_table, region_seed, CorruptionSpec, GroundTruth};
use crate::raster::{Canvas, Raster, GLYPH};
use crate::reconstruct::render_table_natural;

const WORDS: &[&str] = &[
    "anchor", "basalt", "cobalt", "delta", "ember", "fjord", "garnet", "harbor", "indigo", "juniper",
    "kestrel", "lantern", "meadow", "nickel", "orchid", "pebble", "quartz", "ripple", "saffron", "timber",
    "umber", "vessel", "willow", "xenon", "yarrow", "zephyr", "meridian", "cascade", "lattice", "summit",
];

const HEADER_WORDS: &[&str] = &["Site", "Batch", "Depth", "Yield", "Grade", "Cycle", "Phase", "Load"];

const PAGE_W: usize = 640;
const PAGE_H: usize = 900;
const MARGIN: usize = 32;
pub const LINE_PX: usize = 12;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn cell_text(rng: &mut ChaCha8Rng) -> String {
    if rng.gen_bool(0.4) {
        format!("{}.{}", rng.gen_range(0..100), rng.gen_range(0..10))
    } else {
        WORDS.choose(rng).expect("non-empty").to_string()
    }
}

/// A table of 2..=`max_rows` rows and 2..=`max_cols` columns with headers.
pub fn random_table(rng: &mut ChaCha8Rng, max_rows: usize, max_cols: usize) -> TableEntity {
    let n_rows = rng.gen_range(2..=max_rows.max(2));
    let n_cols = rng.gen_range(2..=max_cols.max(2));
    let mut headers: Vec<String> = HEADER_WORDS.iter().map(|s| s.to_string()).collect();
    headers.shuffle(rng);
    headers.truncate(n_cols);
    while headers.len() < n_cols {
        headers.push(format!("Col{}", headers.len()));
    }
    let rows = (0..n_rows).map(|_| (0..n_cols).map(|_| cell_text(rng)).collect()).collect();
    TableEntity::from_rows(headers, rows).expect("rectangular by construction")
}

pub fn paragraph(rng: &mut ChaCha8Rng, n_words: usize) -> String {
    (0..n_words)
        .map(|_| *WORDS.choose(rng).expect("non-empty"))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Greedy word wrap to at most `max_chars` per line.
pub fn wrap(text: &str, max_chars: usize) -> Vec<String> {
    let mut lines: Vec<String> = Vec::new();
    let mut current = String::new();
    for word in text.split_whitespace() {
        if !current.is_empty() && current.chars().count() + 1 + word.chars().count() > max_chars {
            lines.push(std::mem::take(&mut current));
        }
        if !current.is_empty() {
            current.push(' ');
        }
        current.push_str(word);
    }
    if !current.is_empty() {
        lines.push(current);
    }
    lines
}

/// Line chart with axes, ticks and three seeded series.
pub fn chart_raster(width: usize, height: usize, seed: u64) -> Raster {
    let mut rng = rng(seed);
    let mut c = Canvas::white(width, height);
    let (left, bottom) = (24usize, height.saturating_sub(20));
    c.line((left as f64, 8.0), (left as f64, bottom as f64), 2, 0);
    c.line((left as f64, bottom as f64), ((width - 8) as f64, bottom as f64), 2, 0);
    for i in 0..6 {
        let x = left + i * (width - left - 8) / 5;
        c.vline(x, bottom, bottom + 5);
    }
    let span_x = (width - left - 16) as f64;
    let span_y = (bottom - 16) as f64;
    for (k, shade) in [0u8, 80, 150].into_iter().enumerate() {
        let mut y = 0.2 + 0.2 * k as f64;
        let mut prev = (left as f64 + 4.0, 8.0 + span_y * y);
        for step in 1..=24 {
            y = (y + rng.gen_range(0.0..0.05)).min(0.95);
            let next = (left as f64 + 4.0 + span_x * step as f64 / 24.0, 8.0 + span_y * y);
            c.line(prev, next, 2, shade);
            prev = next;
        }
    }
    c.into_raster()
}

fn chart_enrichment() -> Enrichment {
    let data = json!({"x_axis": "step", "y_axis": "value", "series": ["a", "b", "c"], "trend": "falling"});
    Enrichment {
        image_type: ImageType::Chart,
        description: "Three falling series plotted against step.".into(),
        extracted_text: String::new(),
        structured_data: data.as_object().cloned(),
    }
}

/// Pages, regions, rasters and truth that together describe a runnable document.
#[derive(Debug, Clone)]
pub struct SyntheticDoc {
    pub manifest: RegionManifest,
    pub rasters: BTreeMap<String, Raster>,
    pub truth: GroundTruth,
}

impl SyntheticDoc {
    fn new(document_id: &str) -> Self {
        SyntheticDoc {
            manifest: RegionManifest {
                document_id: document_id.to_string(),
                pages: Vec::new(),
                regions: Vec::new(),
            },
            rasters: BTreeMap::new(),
            truth: GroundTruth::default(),
        }
    }

    fn add_page(&mut self, page_id: String, raster: Raster, spans: Option<Vec<EmbeddedSpan>>) {
        self.manifest.pages.push(PageDescriptor {
            page_id: page_id.clone(),
            raster: RasterSource::Path(PathBuf::from(format!("{page_id}.png"))),
            width: raster.width(),
            height: raster.height(),
            origin_convention: Origin::TopLeft,
            embedded_text: spans,
            quality: Some(QualityKind::Clean),
        });
        self.rasters.insert(page_id, raster);
    }

    fn add_region(&mut self, region_id: &str, page_id: &str, bbox: BoundingBox, entity_type: EntityType) {
        self.manifest.regions.push(RegionSpec {
            region_id: region_id.to_string(),
            page_id: page_id.to_string(),
            bbox,
            entity_type,
            detector_payload: None,
        });
    }

    /// Writes `<page>.png`, `manifest.json` and `truth.json` into `dir` and
    /// returns the manifest path.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| RavError::io(dir, e))?;
        for (page_id, raster) in &self.rasters {
            let path = dir.join(format!("{page_id}.png"));
            std::fs::write(&path, raster.encode_png()).map_err(|e| RavError::io(&path, e))?;
        }
        let truth = dir.join("truth.json");
        let text = serde_json::to_string_pretty(&self.truth).expect("truth serializes");
        std::fs::write(&truth, text).map_err(|e| RavError::io(&truth, e))?;
        let manifest = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        std::fs::write(&manifest, text).map_err(|e| RavError::io(&manifest, e))?;
        Ok(manifest)
    }
}

/// Draws wrapped text at (x, y) and returns its bbox plus one span per line.
pub fn draw_block(c: &mut Canvas, x: usize, y: usize, text: &str, max_chars: usize) -> (BoundingBox, Vec<EmbeddedSpan>) {
    let lines = wrap(text, max_chars);
    let mut spans = Vec::with_capacity(lines.len());
    let mut widest = 1;
    for (i, line) in lines.iter().enumerate() {
        let top = y + i * LINE_PX;
        c.text(x, top, line, 1);
        let w = line.chars().count() * GLYPH;
        widest = widest.max(w);
        spans.push(EmbeddedSpan {
            bbox: BoundingBox::new(x as f64, top as f64, (x + w.max(1)) as f64, (top + GLYPH) as f64),
            text: line.clone(),
        });
    }
    let h = lines.len().max(1) * LINE_PX;
    let bbox = BoundingBox::new(x as f64 - 2.0, y as f64 - 2.0, (x + widest) as f64 + 2.0, (y + h) as f64);
    (bbox, spans)
}

/// `pages` native-looking pages, each with a heading, two paragraphs, a
/// table, a chart and the chart's caption directly beneath it.
pub fn mixed_document(pages: usize, seed: u64) -> SyntheticDoc {
    let mut doc = SyntheticDoc::new(&format!("synthetic-mixed-{seed}"));
    let mut rng = rng(seed);
    let max_chars = (PAGE_W - 2 * MARGIN) / GLYPH;
    for p in 0..pages {
        let page_id = format!("p{p:03}");
        let mut c = Canvas::white(PAGE_W, PAGE_H);
        let mut spans = Vec::new();
        let mut k = 0;
        let mut next_id = || {
            k += 1;
            format!("{page_id}_{:02}", k - 1)
        };

        let text_region = |doc: &mut SyntheticDoc, c: &mut Canvas, spans: &mut Vec<EmbeddedSpan>, id: String, y: usize, text: String| {
            let (bbox, s) = draw_block(c, MARGIN, y, &text, max_chars);
            doc.add_region(&id, &page_id, bbox, EntityType::Text);
            doc.truth.entities.insert(id, ExtractedEntity::text(EntityType::Text, TextEntity::plain(text)));
            spans.extend(s);
            bbox.y1 as usize
        };

        let heading = format!("Section {} {}", p + 1, paragraph(&mut rng, 2));
        let mut y = text_region(&mut doc, &mut c, &mut spans, next_id(), 24, heading) + 12;
        let n = rng.gen_range(18..40);
        y = text_region(&mut doc, &mut c, &mut spans, next_id(), y, paragraph(&mut rng, n)) + 20;

        let table = random_table(&mut rng, 6, 5);
        let grid = render_table_natural(&table).expect("random tables are valid");
        c.blit(&grid, MARGIN, y);
        let tid = next_id();
        let tb = BoundingBox::new(
            MARGIN as f64,
            y as f64,
            (MARGIN + grid.width() as usize) as f64,
            (y + grid.height() as usize) as f64,
        );
        doc.add_region(&tid, &page_id, tb, EntityType::Table);
        doc.truth.entities.insert(tid, ExtractedEntity::table(table));
        y += grid.height() as usize + 24;

        let (cw, ch) = (320usize, 200usize);
        let chart = chart_raster(cw, ch, rng.gen());
        c.blit(&chart, MARGIN, y);
        let iid = next_id();
        let ib = BoundingBox::new(MARGIN as f64, y as f64, (MARGIN + cw) as f64, (y + ch) as f64);
        doc.add_region(&iid, &page_id, ib, EntityType::Image);
        doc.truth.enrichments.insert(iid, chart_enrichment());
        y += ch + 6;

        let caption = format!("Figure {}: {}", p + 1, paragraph(&mut rng, 5));
        y = text_region(&mut doc, &mut c, &mut spans, next_id(), y, caption) + 16;
        let n = rng.gen_range(18..40);
        text_region(&mut doc, &mut c, &mut spans, next_id(), y, paragraph(&mut rng, n));

        doc.add_page(page_id.clone(), c.into_raster(), Some(spans));
    }
    doc
}

/// One page per table, each page exactly the rendered grid plus a margin,
/// with a single table region covering the grid.
pub fn table_document(tables: &[TableEntity]) -> SyntheticDoc {
    let mut doc = SyntheticDoc::new("synthetic-tables");
    let pad = 6usize;
    for (i, table) in tables.iter().enumerate() {
        let page_id = format!("t{i:04}");
        let region_id = format!("t{i:04}_table");
        let grid = render_table_natural(table).expect("valid table");
        let (w, h) = (grid.width() as usize, grid.height() as usize);
        let mut c = Canvas::white(w + 2 * pad, h + 2 * pad);
        c.blit(&grid, pad, pad);
        let bbox = BoundingBox::new(pad as f64, pad as f64, (pad + w) as f64, (pad + h) as f64);
        doc.add_region(&region_id, &page_id, bbox, EntityType::Table);
        doc.truth.entities.insert(region_id, ExtractedEntity::table(table.clone()));
        doc.add_page(page_id, c.into_raster(), None);
    }
    doc
}

/// `n` random tables from one seed.
pub fn random_tables(n: usize, seed: u64) -> Vec<TableEntity> {
    let mut r = rng(seed);
    (0..n).map(|_| random_table(&mut r, 6, 5)).collect()
}

/// One table of a corruption sweep: the noise level applied, the fidelity the
/// engine assigned, and the cell error against ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSample {
    pub id: String,
    pub epsilon: f64,
    pub fidelity: f64,
    pub cell_cer: f64,
}

/// Scores `n` random tables, each corrupted at its own epsilon drawn
/// uniformly from [0, 1], against a reference read from ground truth.
pub fn corruption_sweep(n: usize, seed: u64, cfg: &RavConfig) -> Result<Vec<SweepSample>> {
    let tables = random_tables(n, seed);
    let doc = table_document(&tables);
    let anchors = anchor_crops(&doc.manifest.regions, &doc.rasters)?;
    let mut r = rng(seed ^ 0x5eed);
    let jobs: Vec<(usize, f64)> = (0..n).map(|i| (i, r.gen_range(0.0..=1.0))).collect();
    Ok(par_map(&jobs, cfg.jobs, |&(i, epsilon)| {
        let region = &doc.manifest.regions[i];
        let gt = &tables[i];
        let spec = CorruptionSpec {
            epsilon,
            seed: region_seed(seed, &region.region_id, "sweep"),
            ..CorruptionSpec::default()
        };
        let pred = mock_extract_table(gt, &spec);
        let reading = doc.truth.reading(&region.region_id).expect("table truth");
        let report = score_entity(
            &ExtractedEntity::table(pred.clone()),
            &anchors.crops[&region.region_id],
            &ReferenceChannel::Table(reading),
            cfg,
        );
        SweepSample {
            id: region.region_id.clone(),
            epsilon,
            fidelity: report.score,
            cell_cer: table_structure_eval(&pred, gt).cell_cer,
        }
    }))
}
