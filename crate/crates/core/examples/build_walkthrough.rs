//! Regenerates `fixtures/walkthrough/`: the page raster, manifest, scripted
//! plugin responses and config. `expected.json` is maintained by hand and is
//! only read here, to confirm the generated fixture replays cleanly.
//!
//! cargo run --release -p rav-core --example build_walkthrough [out_dir]

use std::collections::BTreeMap;
use std::error::Error;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use rav_core::config::RavConfig;
use rav_core::ingest::{anchor_crops, EmbeddedSpan, Origin, PageDescriptor, RasterSource, RegionManifest, RegionSpec};
use rav_core::model::{AnchorCrop, BoundingBox, EntityType, ExtractedEntity, ImageEntity, TableEntity};
use rav_core::orchestrate::{score_entity, ReferenceChannel};
use rav_core::raster::{resize_nearest, Canvas, Raster};
use rav_core::reconstruct::{
    embedded_text_within, AnchorImageFeatures, ReferenceReading, ReferenceSource,
    TableShape, TextReference,
};
use rav_core::synthetic::{chart_raster, draw_block};
use rav_core::walkthrough::{bundled_fixture_dir, replay};

const PAGE_W: usize = 1100;
const PAGE_H: usize = 1450;
const TABLE: (usize, usize, usize, usize) = (88, 72, 923, 271);
const CHART: (usize, usize, usize, usize) = (212, 430, 676, 454);
const TEXT_CHARS: usize = 115;

const HEADERS: [&str; 7] = ["", "Source Data", "Size", "Window", "Sparse", "Samples", "Step"];
const GROUPS: [(&str, &str); 2] = [("KESTREL 1", "Public web crawl v1"), ("KESTREL 2", "Curated mix of licensed text")];
const ROWS: [[&str; 5]; 8] = [
    ["3B", "2k", "no", "0.8T", "4.0e-4"],
    ["8B", "2k", "no", "0.8T", "4.0e-4"],
    ["20B", "2k", "no", "1.2T", "2.0e-4"],
    ["52B", "2k", "no", "1.2T", "2.0e-4"],
    ["3B", "8k", "no", "1.8T", "4.0e-4"],
    ["8B", "8k", "no", "1.8T", "4.0e-4"],
    ["24B", "8k", "yes", "1.8T", "2.0e-4"],
    ["64B", "8k", "yes", "1.8T", "2.0e-4"],
];
const COL_X: [usize; 7] = [8, 104, 372, 452, 548, 640, 760];

/// (region, text, target primary fidelity)
const TEXTS: [(&str, &str, f64); 7] = [
    (
        "0_0",
        "Table 3: Overview of the KESTREL model family. Sample counts refer to the pretraining stage only. All models \
         share a global batch of 2M samples. The two largest models use sparse attention to speed up decoding on long input sequences.",
        0.983,
    ),
    (
        "0_1",
        "Figure 4: Validation loss of the KESTREL 2 models over training steps. Loss is still falling after 1.8T samples.",
        1.000,
    ),
    (
        "0_2",
        "Vocabulary. We keep the subword vocabulary of the first generation, built with a unigram model. Numbers are \
         split into single digits and symbols fall back to raw bytes. The final vocabulary holds 48k entries.",
        0.995,
    ),
    ("0_3", "3.1.2 Compute Cluster and Power", 0.968),
    (
        "0_4",
        "Compute Cluster. All models were trained on a shared accelerator cluster split across two halls. Both halls use \
         the same accelerator type but differ in their network fabric: one uses a switched optical fabric while the other \
         relies on a copper mesh.",
        0.976,
    ),
    (
        "0_5",
        "Both fabrics link 400 Gbps endpoints. The halls also differ in their per-device power cap, 450W in the first and \
         380W in the second, which lets us compare energy use per sample on one recipe.",
        0.974,
    ),
    ("0_6", "9", 1.000),
];

fn table_entity(follower_label: &dyn Fn(usize, usize) -> String) -> TableEntity {
    let mut rows = Vec::new();
    for (r, vals) in ROWS.iter().enumerate() {
        let (g, within) = (r / 4, r % 4);
        let mut row = vec![
            if within == 0 { GROUPS[g].0.to_string() } else { follower_label(r, 0) },
            if within == 0 { GROUPS[g].1.to_string() } else { follower_label(r, 1) },
        ];
        row.extend(vals.iter().map(|s| s.to_string()));
        rows.push(row);
    }
    TableEntity::from_rows(HEADERS.iter().map(|s| s.to_string()).collect(), rows).expect("rectangular")
}

fn correct_table() -> TableEntity {
    table_entity(&|r, c| if c == 0 { GROUPS[r / 4].0.into() } else { GROUPS[r / 4].1.into() })
}

/// Booktabs-style table: three heavy rules, one light group rule, no
/// vertical rules, span labels drawn once per group.
fn draw_table(c: &mut Canvas, spans: &mut Vec<EmbeddedSpan>) -> Vec<(String, BoundingBox)> {
    let (tx, ty, tw, _) = TABLE;
    c.fill_rect(tx, ty + 2, tx + tw, ty + 4, 0);
    for (i, h) in HEADERS.iter().enumerate() {
        c.text(tx + COL_X[i], ty + 12, h, 1);
    }
    c.fill_rect(tx, ty + 28, tx + tw, ty + 29, 0);
    for (r, vals) in ROWS.iter().enumerate() {
        let top = ty + 36 + r * 28;
        for (i, v) in vals.iter().enumerate() {
            c.text(tx + COL_X[i + 2], top, v, 1);
        }
    }
    c.hline(tx, tx + tw, ty + 36 + 4 * 28 - 9);
    c.fill_rect(tx, ty + 262, tx + tw, ty + 264, 0);

    let mut label_regions = Vec::new();
    for (g, (label, source)) in GROUPS.iter().enumerate() {
        let top = ty + 36 + g * 112 + 46;
        c.text(tx + COL_X[0], top, label, 1);
        c.text(tx + COL_X[1], top, source, 1);
        let x0 = tx + COL_X[0];
        let bbox = BoundingBox::new(
            x0 as f64 - 2.0,
            top as f64 - 2.0,
            (x0 + label.len() * 8) as f64 + 2.0,
            top as f64 + 10.0,
        );
        spans.push(EmbeddedSpan {
            bbox: BoundingBox::new(x0 as f64, top as f64, (x0 + label.len() * 8) as f64, top as f64 + 8.0),
            text: label.to_string(),
        });
        label_regions.push((format!("0_{}", 9 + g), bbox));
    }
    label_regions
}

/// Shifts `k` evenly spaced alphanumeric characters to their successor.
fn substitute(text: &str, k: usize) -> String {
    let mut chars: Vec<char> = text.chars().collect();
    let slots: Vec<usize> = (0..chars.len()).filter(|&i| chars[i].is_ascii_alphanumeric()).collect();
    for j in 0..k {
        let i = slots[(2 * j + 1) * slots.len() / (2 * k)];
        chars[i] = match chars[i] {
            'z' => 'a',
            'Z' => 'A',
            '9' => '0',
            ch => (ch as u8 + 1) as char,
        };
    }
    chars.into_iter().collect()
}

/// OCR-style reading of the table: the truth serialization with seeded glyph
/// confusions in ordinary cells and debris from the ruling lines read as
/// `junk` extra characters. Repeated span labels are read cleanly.
fn noisy_reading(truth: &TableEntity, confusion: f64, junk: usize, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let debris = |n: usize, rng: &mut ChaCha8Rng| -> String {
        (0..n).map(|_| ['_', '-', '~', '='][rng.gen_range(0..4)]).collect()
    };
    let per_rule = [junk / 4, junk / 4, junk / 4, junk - 3 * (junk / 4)];
    let mut words: Vec<String> = vec![debris(per_rule[0], &mut rng)];
    let push_cell = |text: &str, protected: bool, rng: &mut ChaCha8Rng, words: &mut Vec<String>| {
        if text.is_empty() {
            return;
        }
        let read: String = text
            .chars()
            .map(|ch| {
                if protected || ch == ' ' || !rng.gen_bool(confusion) {
                    ch
                } else {
                    let mut alt = ch;
                    while alt == ch {
                        alt = (b'a' + rng.gen_range(0..26u8)) as char;
                    }
                    alt
                }
            })
            .collect();
        words.push(read);
    };
    for h in &truth.headers {
        push_cell(h, false, &mut rng, &mut words);
    }
    words.push(debris(per_rule[1], &mut rng));
    for (r, row) in truth.rows().enumerate() {
        if r == 4 {
            words.push(debris(per_rule[2], &mut rng));
        }
        for (c, cell) in row.iter().enumerate() {
            push_cell(cell, c < 2 && r % 4 != 0, &mut rng, &mut words);
        }
    }
    words.push(debris(per_rule[3], &mut rng));
    words.retain(|w| !w.is_empty());
    words.join(" ")
}

fn box_blur(r: &Raster) -> Raster {
    let (w, h) = (r.width(), r.height());
    Raster::from_gray_fn(w, h, |x, y| {
        let mut sum = 0u32;
        for dy in -1i64..=1 {
            for dx in -1i64..=1 {
                let xx = (x as i64 + dx).clamp(0, w as i64 - 1) as u32;
                let yy = (y as i64 + dy).clamp(0, h as i64 - 1) as u32;
                sum += r.gray_at(xx, yy) as u32;
            }
        }
        (sum / 9) as u8
    })
}

fn rounds_to(score: f64, target: f64) -> bool {
    (score - target).abs() < 0.0003
}

fn table_score(t: &TableEntity, anchor: &AnchorCrop, reading: &ReferenceReading, cfg: &RavConfig) -> f64 {
    score_entity(&ExtractedEntity::table(t.clone()), anchor, &ReferenceChannel::Table(reading.clone()), cfg).score
}

fn write_json(path: &Path, v: &Value) -> Result<(), Box<dyn Error>> {
    std::fs::write(path, serde_json::to_string_pretty(v)? + "\n")?;
    Ok(())
}

fn main() -> Result<(), Box<dyn Error>> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(bundled_fixture_dir);
    std::fs::create_dir_all(&out)?;
    let cfg = RavConfig::default();

    let mut canvas = Canvas::white(PAGE_W, PAGE_H);
    let mut spans = Vec::new();
    let mut regions: Vec<RegionSpec> = Vec::new();
    let region = |id: &str, bbox: BoundingBox, entity_type: EntityType| RegionSpec {
        region_id: id.to_string(),
        page_id: "0".to_string(),
        bbox,
        entity_type,
        detector_payload: None,
    };

    let labels = draw_table(&mut canvas, &mut spans);
    let (tx, ty, tw, th) = TABLE;
    let table_box = BoundingBox::new(tx as f64, ty as f64, (tx + tw) as f64, (ty + th) as f64);
    regions.push(region("0_7", table_box, EntityType::Table));
    for (id, bbox) in &labels {
        regions.push(region(id, *bbox, EntityType::Text));
    }

    let (cx, cy, cw, ch) = CHART;
    let chart = chart_raster(cw, ch, 2024);
    canvas.blit(&chart, cx, cy);
    let chart_box = BoundingBox::new(cx as f64, cy as f64, (cx + cw) as f64, (cy + ch) as f64);
    regions.push(region("0_8", chart_box, EntityType::Image));

    let positions: BTreeMap<&str, (usize, usize)> = [
        ("0_0", (88, 356)),
        ("0_1", (88, 892)),
        ("0_2", (88, 940)),
        ("0_3", (88, 1010)),
        ("0_4", (88, 1040)),
        ("0_5", (88, 1090)),
        ("0_6", (546, 1400)),
    ]
    .into_iter()
    .collect();
    for (id, text, _) in TEXTS {
        let (x, y) = positions[id];
        let (bbox, s) = draw_block(&mut canvas, x, y, text, TEXT_CHARS);
        spans.extend(s);
        regions.push(region(id, bbox, EntityType::Text));
    }

    let page_raster = canvas.into_raster();
    let page = PageDescriptor {
        page_id: "0".into(),
        raster: RasterSource::Path("page.png".into()),
        width: PAGE_W as u32,
        height: PAGE_H as u32,
        origin_convention: Origin::TopLeft,
        embedded_text: Some(spans),
        quality: None,
    };
    regions.sort_by(|a, b| a.region_id.cmp(&b.region_id));
    let manifest = RegionManifest {
        document_id: "walkthrough-page".into(),
        pages: vec![page.clone()],
        regions: regions.clone(),
    };
    let rasters: BTreeMap<String, Raster> = [("0".to_string(), page_raster.clone())].into_iter().collect();
    let anchors = anchor_crops(&regions, &rasters)?.crops;

    let mut primary = serde_json::Map::new();

    for (id, _, target) in TEXTS {
        let bbox = regions.iter().find(|r| r.region_id == id).expect("placed").bbox;
        let reference = TextReference {
            text: embedded_text_within(&page, &bbox).expect("native page"),
            source: ReferenceSource::EmbeddedStream,
        };
        let len = reference.text.chars().count();
        let k = (0..=len)
            .find(|&k| {
                let f = rav_core::compare::text_fidelity(&substitute(&reference.text, k), &reference).score;
                rounds_to(f, target)
            })
            .ok_or_else(|| format!("{id}: no substitution count reaches {target}"))?;
        println!("{id}: {k} substitutions over {len} chars");
        primary.insert(id.into(), json!({ "text": substitute(&reference.text, k) }));
    }

    let table_anchor = &anchors["0_7"];
    let truth = correct_table();
    let shape = TableShape { n_rows: 8, n_cols: 7 };
    let mut reading = None;
    for junk in 0..2000 {
        let r = ReferenceReading {
            text: noisy_reading(&truth, 0.7, junk, 41),
            shape: Some(shape),
        };
        let f = table_score(&truth, table_anchor, &r, &cfg);
        if rounds_to(f, 0.387) {
            let full = score_entity(&ExtractedEntity::table(truth.clone()), table_anchor, &ReferenceChannel::Table(r.clone()), &cfg);
            println!("0_7 fallback: {junk} debris chars, f = {f:.4}, {:?}", full.components);
            reading = Some(r);
            break;
        }
    }
    let reading = reading.ok_or("no reading noise reaches the fallback target")?;

    // Followers lose their span labels first; if that is not enough the
    // group-head cells are truncated as well.
    let primary_variant = |blank_labels: usize, kept: usize, blank_sources: usize, head_source: [usize; 2]| {
        let mut rows = Vec::new();
        for (r, vals) in ROWS.iter().enumerate() {
            let (label, source) = GROUPS[r / 4];
            let (c0, c1) = if r % 4 == 0 {
                (label.to_string(), source.chars().take(head_source[r / 4]).collect())
            } else {
                let follower = (r % 4) - 1 + 3 * (r / 4);
                (
                    if follower < blank_labels { String::new() } else { label.chars().take(kept).collect() },
                    if follower < blank_sources { String::new() } else { source.to_string() },
                )
            };
            let mut row = vec![c0, c1];
            row.extend(vals.iter().map(|s| s.to_string()));
            rows.push(row);
        }
        TableEntity::from_rows(HEADERS.iter().map(|s| s.to_string()).collect(), rows).expect("rectangular")
    };
    let mut candidates = Vec::new();
    for blank_labels in 0..=6usize {
        for kept in (0..GROUPS[0].0.len()).rev() {
            for blank_sources in 0..=6usize {
                candidates.push((blank_labels, kept, blank_sources, [usize::MAX; 2]));
            }
        }
    }
    for first in (0..=GROUPS[0].1.len()).rev() {
        for second in (0..=GROUPS[1].1.len()).rev() {
            candidates.push((6, 0, 6, [first, second]));
        }
    }
    let mut primary_table = None;
    for (bl, kept, bs, hs) in candidates {
        let t = primary_variant(bl, kept, bs, hs);
        let f = table_score(&t, table_anchor, &reading, &cfg);
        if std::env::var_os("WALKTHROUGH_DEBUG").is_some() {
            println!("  candidate {bl} {kept} {bs} {hs:?}: {f:.4}");
        }
        if rounds_to(f, 0.322) {
            println!("0_7 primary: blank labels {bl}, kept {kept}, blank sources {bs}, head sources cut to {hs:?}, f = {f:.4}");
            primary_table = Some(t);
            break;
        }
    }
    let primary_table = primary_table.ok_or("no primary variant reaches the table target")?;
    primary.insert("0_7".into(), serde_json::to_value(&primary_table)?);

    let chart_anchor = &anchors["0_8"];
    let text_boxes: Vec<BoundingBox> = regions
        .iter()
        .filter(|r| r.entity_type == EntityType::Text && r.region_id != "0_9" && r.region_id != "0_10")
        .map(|r| r.bbox)
        .collect();
    let features = AnchorImageFeatures::from_anchor(chart_anchor, &text_boxes, PAGE_H as f64, &cfg.caption);
    let blurred = box_blur(chart_anchor.pixels());
    let mut crop_2x = None;
    for step in 0..=2000 {
        let alpha = step as f64 / 20000.0;
        let a = chart_anchor.pixels();
        let mixed = Raster::from_gray_fn(a.width(), a.height(), |x, y| {
            let v = (1.0 - alpha) * a.gray_at(x, y) as f64 + alpha * blurred.gray_at(x, y) as f64;
            v.round() as u8
        });
        let crop = resize_nearest(&mixed, a.width() * 2, a.height() * 2);
        let entity = ImageEntity {
            crop,
            scale_factor: 2.0,
            label: Some("chart".into()),
            label_confidence: Some(0.93),
            enrichment: None,
        };
        let f = rav_core::compare::image_fidelity(&features.with_extracted(&entity, chart_anchor), &cfg.weights.image);
        if std::env::var_os("WALKTHROUGH_DEBUG").is_some() {
            println!("  blend {alpha:.5}: {:.4} {:?}", f.score, f.components);
        }
        if rounds_to(f.score, 0.981) {
            println!("0_8: blend {alpha:.5}, f = {:.4}, components {:?}", f.score, f.components);
            crop_2x = Some(entity);
            break;
        }
    }
    let image = crop_2x.ok_or("no blend reaches the image target")?;
    primary.insert("0_8".into(), serde_json::to_value(&image)?);

    std::fs::write(out.join("page.png"), page_raster.encode_png())?;
    write_json(&out.join("manifest.json"), &serde_json::to_value(&manifest)?)?;
    write_json(&out.join("primary.json"), &json!({ "id": "layout-primary", "responses": primary }))?;
    write_json(
        &out.join("fallback.json"),
        &json!({ "id": "vision-fallback", "responses": { "0_7": serde_json::to_value(&truth)? } }),
    )?;
    write_json(
        &out.join("ocr.json"),
        &json!({ "id": "crop-ocr", "responses": { "0_7": serde_json::to_value(&reading)? } }),
    )?;
    write_json(
        &out.join("enricher.json"),
        &json!({ "id": "vision-enricher", "responses": { "0_8": {
            "image_type": "chart",
            "description": "Validation loss falling over training steps for three KESTREL 2 model sizes.",
            "extracted_text": "8B 24B 64B",
            "structured_data": {
                "x_axis": "training step",
                "y_axis": "validation loss",
                "series": ["8B", "24B", "64B"],
                "trend": "decreasing"
            }
        } } }),
    )?;
    std::fs::write(
        out.join("config.toml"),
        "seed = 7\n\n\
         [plugins.primary]\nkind = \"scripted\"\nscript = \"primary.json\"\n\n\
         [plugins.fallback]\nkind = \"scripted\"\nscript = \"fallback.json\"\n\n\
         [plugins.ocr_reference]\nkind = \"scripted\"\nscript = \"ocr.json\"\n\n\
         [plugins.enricher]\nkind = \"scripted\"\nscript = \"enricher.json\"\n",
    )?;

    if out.join("expected.json").exists() {
        let report = replay(&out)?;
        print!("{}", report.render_table());
        for m in &report.mismatches {
            println!("MISMATCH {m}");
        }
        if !report.passed() {
            return Err("generated fixture does not replay cleanly".into());
        }
    }
    Ok(())
}
