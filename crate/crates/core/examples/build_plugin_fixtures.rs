//! Writes the golden wire-protocol fixtures under `fixtures/plugins/`, one
//! request/response pair per file.

use std::path::Path;

use serde_json::{json, Value};

use rav_core::model::{EntityType, ImageType, PluginRole};
use rav_core::plugins::{PluginRequest, PluginResponse, SCHEMA_VERSION};
use rav_core::raster::Raster;

fn request(id: &str, role: PluginRole, entity_type: EntityType, region: &str, context: &[&str]) -> PluginRequest {
    let crop = Raster::from_gray_fn(6, 4, |_, y| if y == 1 { 0 } else { 255 });
    PluginRequest {
        request_id: id.to_string(),
        role,
        entity_type,
        region_id: region.to_string(),
        crop: crop.to_base64_png(),
        context: context.iter().map(|s| s.to_string()).collect(),
        schema_version: SCHEMA_VERSION.to_string(),
    }
}

fn write(dir: &Path, name: &str, req: &PluginRequest, resp: &PluginResponse) -> Result<(), Box<dyn std::error::Error>> {
    let doc = json!({"request": req, "response": resp});
    let mut text = serde_json::to_string_pretty(&doc)?;
    text.push('\n');
    std::fs::write(dir.join(format!("{name}.json")), text)?;
    Ok(())
}

fn ok(req: &PluginRequest, payload: Value) -> PluginResponse {
    PluginResponse::success(&req.request_id, payload)
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join("plugins");
    std::fs::create_dir_all(&dir)?;

    let req = request("req-0001", PluginRole::PrimaryExtractor, EntityType::Table, "p001_03", &[]);
    let table = json!({
        "n_rows": 2, "n_cols": 3,
        "headers": ["Site", "Depth", "Grade"],
        "cells": ["harbor", "12.5", "B", "meadow", "", "A"]
    });
    write(&dir, "primary_table", &req, &ok(&req, table))?;

    let req = request(
        "req-0002",
        PluginRole::PrimaryExtractor,
        EntityType::Url,
        "p001_07",
        &["Further reading is listed below."],
    );
    let text = json!({"text": "Mirror at https://data.example.org/sets/v2", "urls": ["https://data.example.org/sets/v2"], "latex": null});
    write(&dir, "primary_url", &req, &ok(&req, text))?;

    let req = request("req-0003", PluginRole::PrimaryExtractor, EntityType::Formula, "p002_01", &[]);
    let formula = json!({"text": "E = m c^2", "urls": [], "latex": "E = mc^{2}"});
    write(&dir, "primary_formula", &req, &ok(&req, formula))?;

    let req = request("req-0004", PluginRole::FallbackExtractor, EntityType::Image, "p001_04", &["Figure 2: yield by cycle."]);
    let crop = Raster::from_gray_fn(12, 8, |x, y| if y == 7 - x * 7 / 11 { 0 } else { 255 });
    let image = json!({
        "crop": crop.to_base64_png(),
        "scale_factor": 2.0,
        "label": "chart",
        "label_confidence": 0.91,
        "enrichment": null
    });
    write(&dir, "fallback_image", &req, &ok(&req, image))?;

    let req = request("req-0005", PluginRole::OcrReference, EntityType::Table, "p001_03", &[]);
    let reading = json!({"text": "Site|Depth|Grade\nharbor|12.5|B\nmeadow||A", "shape": {"n_rows": 3, "n_cols": 3}});
    write(&dir, "ocr_table", &req, &ok(&req, reading))?;

    let req = request("req-0006", PluginRole::OcrReference, EntityType::Text, "p001_01", &[]);
    write(&dir, "ocr_text", &req, &ok(&req, json!({"text": "Basalt samples were taken at each site."})))?;

    let req = request("req-0007", PluginRole::Enricher, EntityType::Image, "p001_04", &["Figure 2: yield by cycle."]);
    let enrichment = json!({
        "image_type": ImageType::Chart,
        "description": "Yield falls steadily across six cycles.",
        "extracted_text": "cycle yield",
        "structured_data": {"series": ["yield"], "points": 6}
    });
    write(&dir, "enricher_chart", &req, &ok(&req, enrichment))?;

    let req = request("req-0008", PluginRole::PrimaryExtractor, EntityType::Text, "p009_99", &[]);
    write(&dir, "unknown_region", &req, &PluginResponse::failure(&req.request_id, "unknown region"))?;

    let mut req = request("req-0009", PluginRole::OcrReference, EntityType::Text, "p001_01", &[]);
    req.schema_version = "0".to_string();
    write(&dir, "schema_mismatch", &req, &PluginResponse::failure(&req.request_id, "schema_version mismatch"))?;

    // Payloads above must already be in canonical wire form.
    for entry in std::fs::read_dir(&dir)? {
        let path = entry?.path();
        let doc: Value = serde_json::from_str(&std::fs::read_to_string(&path)?)?;
        let req: PluginRequest = serde_json::from_value(doc["request"].clone())?;
        let resp: PluginResponse = serde_json::from_value(doc["response"].clone())?;
        if let Some(payload) = resp.payload {
            let parsed = rav_core::plugins::validate_payload(
                req.role,
                req.entity_type,
                payload.clone(),
                rav_core::model::UrlPattern::default_pattern(),
            )?;
            let back = parsed.to_value();
            if back != payload {
                return Err(format!("{}: payload not canonical:\n{back}\nvs\n{payload}", path.display()).into());
            }
        }
    }
    println!("wrote fixtures to {}", dir.display());
    Ok(())
}
