//! In-process plugins: scripted replay and seeded ground-truth corruption.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use super::protocol::{Concurrency, Handshake, Payload, PluginRequest, PluginResponse, SCHEMA_VERSION};
use super::PluginClient;
use crate::error::{RavError, Result};
use crate::model::{
    EntityContent, Enrichment, ExtractedEntity, ImageEntity, ImageType, PluginRole, TableEntity,
    TextEntity,
};
use crate::raster::Raster;
use crate::reconstruct::{structural_signature, ReferenceReading};

const ALPHABET: &[u8] = b"abcdefghijklmnopqrstuvwxyz0123456789";
const FALLBACK_EPSILON: f64 = 0.5;
const FALLBACK_JITTER_PX: u32 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub epsilon: f64,
    pub p_row_merge: f64,
    pub p_col_merge: f64,
    pub p_row_drop: f64,
    pub crop_jitter_px: u32,
    pub seed: u64,
}

impl CorruptionSpec {
    pub fn validate(&self) -> Result<()> {
        let probs = [self.epsilon, self.p_row_merge, self.p_col_merge, self.p_row_drop];
        if probs.iter().all(|p| (0.0..=1.0).contains(p)) {
            Ok(())
        } else {
            Err(RavError::Config("corruption probabilities must lie in [0, 1]".into()))
        }
    }
}

/// Per-region seed, independent of processing order.
pub fn region_seed(base: u64, region_id: &str, salt: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(base.to_le_bytes());
    h.update(region_id.as_bytes());
    h.update([0]);
    h.update(salt.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest is 32 bytes"))
}

fn join_cells(a: &str, b: &str) -> String {
    match (a.is_empty(), b.is_empty()) {
        (true, _) => b.to_string(),
        (_, true) => a.to_string(),
        _ => format!("{a} {b}"),
    }
}

fn substitute(text: &str, epsilon: f64, rng: &mut ChaCha8Rng) -> String {
    text.chars()
        .map(|c| {
            if epsilon > 0.0 && rng.gen_bool(epsilon) {
                loop {
                    let r = ALPHABET[rng.gen_range(0..ALPHABET.len())] as char;
                    if r != c {
                        break r;
                    }
                }
            } else {
                c
            }
        })
        .collect()
}

/// Seeded table corruption: column merge, row merge, row drop, then
/// per-character substitution.
pub fn mock_extract_table(gt: &TableEntity, spec: &CorruptionSpec) -> TableEntity {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut headers = gt.headers.clone();
    let mut rows: Vec<Vec<String>> = gt.rows().map(<[String]>::to_vec).collect();
    let mut n_cols = gt.n_cols;

    if rng.gen_bool(spec.p_col_merge) && n_cols >= 2 {
        let c = rng.gen_range(0..n_cols - 1);
        for row in rows.iter_mut().chain(std::iter::once(&mut headers).filter(|h| !h.is_empty())) {
            let right = row.remove(c + 1);
            row[c] = join_cells(&row[c], &right);
        }
        n_cols -= 1;
    }
    if rng.gen_bool(spec.p_row_merge) && rows.len() >= 2 {
        let r = rng.gen_range(0..rows.len() - 1);
        let below = rows.remove(r + 1);
        for (cell, extra) in rows[r].iter_mut().zip(below) {
            *cell = join_cells(cell, &extra);
        }
    }
    if rng.gen_bool(spec.p_row_drop) && rows.len() >= 2 {
        let r = rng.gen_range(0..rows.len());
        rows.remove(r);
    }
    let headers: Vec<String> = headers.iter().map(|h| substitute(h, spec.epsilon, &mut rng)).collect();
    let cells: Vec<String> = rows
        .iter()
        .flatten()
        .map(|c| substitute(c, spec.epsilon, &mut rng))
        .collect();
    TableEntity {
        n_rows: rows.len(),
        n_cols,
        headers,
        cells,
    }
}

pub fn mock_extract_text(gt: &TextEntity, spec: &CorruptionSpec) -> TextEntity {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    TextEntity {
        text: substitute(&gt.text, spec.epsilon, &mut rng),
        urls: Vec::new(),
        latex: gt.latex.clone(),
    }
}

/// Shifts content by up to `px` in each direction, filling with white.
pub fn jitter_crop(crop: &Raster, px: u32, seed: u64) -> Raster {
    if px == 0 {
        return crop.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = px as i64;
    let dx = rng.gen_range(-p..=p);
    let dy = rng.gen_range(-p..=p);
    let gray = crop.to_gray();
    Raster::from_gray_fn(gray.width(), gray.height(), |x, y| {
        let sx = x as i64 - dx;
        let sy = y as i64 - dy;
        if sx >= 0 && sy >= 0 && sx < gray.width() as i64 && sy < gray.height() as i64 {
            gray.gray_at(sx as u32, sy as u32)
        } else {
            255
        }
    })
}

pub fn mock_extract(gt: &ExtractedEntity, spec: &CorruptionSpec) -> ExtractedEntity {
    let content = match &gt.content {
        EntityContent::Table(t) => EntityContent::Table(mock_extract_table(t, spec)),
        EntityContent::Text(t) => EntityContent::Text(mock_extract_text(t, spec)),
        EntityContent::Image(i) => EntityContent::Image(ImageEntity {
            crop: jitter_crop(&i.crop, spec.crop_jitter_px, spec.seed),
            ..i.clone()
        }),
    };
    ExtractedEntity {
        entity_type: gt.entity_type,
        content,
    }
}

/// Returns the ground truth with probability `recovery_quality`, otherwise
/// a fresh corruption at epsilon 0.5.
pub fn mock_fallback(gt: &ExtractedEntity, recovery_quality: f64, seed: u64) -> ExtractedEntity {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if rng.gen_bool(recovery_quality.clamp(0.0, 1.0)) {
        return gt.clone();
    }
    let spec = CorruptionSpec {
        epsilon: FALLBACK_EPSILON,
        crop_jitter_px: FALLBACK_JITTER_PX,
        seed: rng.gen(),
        ..CorruptionSpec::default()
    };
    mock_extract(gt, &spec)
}

/// Ground-truth entities and enrichments keyed by region id.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruth {
    #[serde(default)]
    pub entities: BTreeMap<String, ExtractedEntity>,
    #[serde(default)]
    pub enrichments: BTreeMap<String, Enrichment>,
}

impl GroundTruth {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| RavError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| RavError::Config(format!("{}: {e}", path.display())))
    }

    /// The reading an ideal OCR pass over the region would produce.
    pub fn reading(&self, region_id: &str) -> Option<ReferenceReading> {
        match &self.entities.get(region_id)?.content {
            EntityContent::Table(t) => {
                let (sig, text) = structural_signature(t);
                Some(ReferenceReading {
                    text,
                    shape: Some(sig.shape()),
                })
            }
            EntityContent::Text(t) => Some(ReferenceReading {
                text: t.text.clone(),
                shape: None,
            }),
            EntityContent::Image(_) => None,
        }
    }
}

fn all_roles_handshake(id: &str) -> Handshake {
    Handshake {
        roles: vec![
            PluginRole::PrimaryExtractor,
            PluginRole::FallbackExtractor,
            PluginRole::OcrReference,
            PluginRole::Enricher,
        ],
        schema_version: SCHEMA_VERSION.to_string(),
        concurrency: Concurrency::Concurrent,
        id: Some(id.to_string()),
    }
}

/// Canned payloads keyed by region id. A `null` payload scripts a failure.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Script {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub responses: BTreeMap<String, Value>,
}

impl Script {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| RavError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| RavError::Config(format!("{}: {e}", path.display())))
    }
}

pub struct ScriptedExtractor {
    handshake: Handshake,
    responses: BTreeMap<String, Value>,
}

impl ScriptedExtractor {
    pub fn new(script: Script) -> Self {
        let id = script.id.unwrap_or_else(|| "scripted".to_string());
        ScriptedExtractor {
            handshake: all_roles_handshake(&id),
            responses: script.responses,
        }
    }
}

impl PluginClient for ScriptedExtractor {
    fn id(&self) -> &str {
        self.handshake.id.as_deref().unwrap_or("scripted")
    }

    fn handshake(&self) -> &Handshake {
        &self.handshake
    }

    fn call(&self, request: &PluginRequest, _timeout: Duration) -> PluginResponse {
        match self.responses.get(&request.region_id) {
            Some(Value::Null) => PluginResponse::failure(&request.request_id, "scripted failure"),
            Some(v) => PluginResponse::success(&request.request_id, v.clone()),
            None => PluginResponse::failure(&request.request_id, "unknown region"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MockBehavior {
    Corrupt(CorruptionSpec),
    Fallback { recovery_quality: f64 },
}

/// Ground-truth-backed plugin serving every role. Extraction roles corrupt
/// or recover; the OCR role reads ground truth; the enricher replays stored
/// enrichments.
pub struct MockClient {
    handshake: Handshake,
    truth: GroundTruth,
    behavior: MockBehavior,
    base_seed: u64,
}

impl MockClient {
    pub fn new(truth: GroundTruth, behavior: MockBehavior, base_seed: u64) -> Self {
        let id = match behavior {
            MockBehavior::Corrupt(_) => "mock",
            MockBehavior::Fallback { .. } => "mock-fallback",
        };
        MockClient {
            handshake: all_roles_handshake(id),
            truth,
            behavior,
            base_seed,
        }
    }

    fn truth_for(&self, request: &PluginRequest) -> std::result::Result<ExtractedEntity, String> {
        if let Some(e) = self.truth.entities.get(&request.region_id) {
            return Ok(e.clone());
        }
        if request.entity_type == crate::model::EntityType::Image {
            let crop = Raster::from_base64_png(&request.crop).map_err(|e| e.to_string())?;
            return Ok(ExtractedEntity::image(ImageEntity {
                crop,
                scale_factor: 1.0,
                label: None,
                label_confidence: None,
                enrichment: None,
            }));
        }
        Err("unknown region".to_string())
    }

    fn answer(&self, request: &PluginRequest) -> std::result::Result<Value, String> {
        let seed = region_seed(self.base_seed, &request.region_id, request.role.as_str());
        match request.role {
            PluginRole::PrimaryExtractor | PluginRole::FallbackExtractor => {
                let gt = self.truth_for(request)?;
                let out = match self.behavior {
                    MockBehavior::Corrupt(spec) => mock_extract(&gt, &CorruptionSpec { seed, ..spec }),
                    MockBehavior::Fallback { recovery_quality } => {
                        mock_fallback(&gt, recovery_quality, seed)
                    }
                };
                Ok(Payload::Entity(out).to_value())
            }
            PluginRole::OcrReference => self
                .truth
                .reading(&request.region_id)
                .map(|r| Payload::Reference(r).to_value())
                .ok_or_else(|| "unknown region".to_string()),
            PluginRole::Enricher => {
                let e = self.truth.enrichments.get(&request.region_id).cloned().unwrap_or(Enrichment {
                    image_type: ImageType::Other,
                    description: String::new(),
                    extracted_text: String::new(),
                    structured_data: None,
                });
                Ok(Payload::Enrichment(e).to_value())
            }
        }
    }
}

impl PluginClient for MockClient {
    fn id(&self) -> &str {
        self.handshake.id.as_deref().unwrap_or("mock")
    }

    fn handshake(&self) -> &Handshake {
        &self.handshake
    }

    fn call(&self, request: &PluginRequest, _timeout: Duration) -> PluginResponse {
        match self.answer(request) {
            Ok(v) => PluginResponse::success(&request.request_id, v),
            Err(e) => PluginResponse::failure(&request.request_id, e),
        }
    }
}
