//! Domain types shared by every stage, plus record-level invariant checks.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::{Arc, OnceLock};

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{RavError, Result};
use crate::raster::Raster;

/// Pixel-space box, top-left origin, half-open on the far edges.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BoundingBox {
    pub const fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        BoundingBox { x0, y0, x1, y1 }
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn is_degenerate(&self) -> bool {
        !(self.x1 > self.x0 && self.y1 > self.y0) || !self.is_finite()
    }

    fn is_finite(&self) -> bool {
        self.x0.is_finite() && self.y0.is_finite() && self.x1.is_finite() && self.y1.is_finite()
    }

    pub fn intersection_area(&self, other: &BoundingBox) -> f64 {
        let w = self.x1.min(other.x1) - self.x0.max(other.x0);
        let h = self.y1.min(other.y1) - self.y0.max(other.y0);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x0 + self.x1) / 2.0, (self.y0 + self.y1) / 2.0)
    }

    /// Integer pixel rectangle covering the box: floor on the near edges,
    /// ceil on the far edges, clipped to the page. The flag reports clipping.
    pub fn pixel_rect(&self, page_w: u32, page_h: u32) -> ((u32, u32, u32, u32), bool) {
        let fx0 = self.x0.floor();
        let fy0 = self.y0.floor();
        let fx1 = self.x1.ceil();
        let fy1 = self.y1.ceil();
        let x0 = fx0.clamp(0.0, page_w as f64) as u32;
        let y0 = fy0.clamp(0.0, page_h as f64) as u32;
        let x1 = fx1.clamp(0.0, page_w as f64) as u32;
        let y1 = fy1.clamp(0.0, page_h as f64) as u32;
        let clipped = fx0 < 0.0 || fy0 < 0.0 || fx1 > page_w as f64 || fy1 > page_h as f64;
        ((x0, y0, x1, y1), clipped)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntityType {
    Table,
    Image,
    Text,
    Formula,
    Url,
}

impl EntityType {
    pub const ALL: [EntityType; 5] = [
        EntityType::Table,
        EntityType::Image,
        EntityType::Text,
        EntityType::Formula,
        EntityType::Url,
    ];

    /// Text, formula and url regions all carry string payloads.
    pub fn is_text_like(self) -> bool {
        matches!(self, EntityType::Text | EntityType::Formula | EntityType::Url)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            EntityType::Table => "table",
            EntityType::Image => "image",
            EntityType::Text => "text",
            EntityType::Formula => "formula",
            EntityType::Url => "url",
        }
    }
}

impl fmt::Display for EntityType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EntityType {
    type Err = RavError;

    fn from_str(s: &str) -> Result<Self> {
        EntityType::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| RavError::Manifest(format!("unknown entity type label `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QualityKind {
    Clean,
    ScannedClean,
    ScannedDegraded,
    Photographed,
    Handwritten,
    Overlapping,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QualityClass {
    pub kind: QualityKind,
    pub skew_degrees: f64,
}

/// Immutable pixel crop of a detected region, cut from the unprocessed page.
///
/// There are no mutating accessors; clones share the same pixel buffer.
#[derive(Debug, Clone)]
pub struct AnchorCrop {
    region_id: String,
    source_page: String,
    bbox: BoundingBox,
    pixels: Arc<Raster>,
    digest: String,
}

impl AnchorCrop {
    pub(crate) fn new(region_id: String, source_page: String, bbox: BoundingBox, pixels: Raster) -> Self {
        let digest = pixels.digest();
        AnchorCrop {
            region_id,
            source_page,
            bbox,
            pixels: Arc::new(pixels),
            digest,
        }
    }

    pub fn region_id(&self) -> &str {
        &self.region_id
    }

    pub fn source_page(&self) -> &str {
        &self.source_page
    }

    pub fn bbox(&self) -> BoundingBox {
        self.bbox
    }

    pub fn pixels(&self) -> &Raster {
        &self.pixels
    }

    pub fn width(&self) -> u32 {
        self.pixels.width()
    }

    pub fn height(&self) -> u32 {
        self.pixels.height()
    }

    /// SHA-256 of the pixel buffer, fixed at creation.
    pub fn digest(&self) -> &str {
        &self.digest
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableEntity {
    pub n_rows: usize,
    pub n_cols: usize,
    #[serde(default)]
    pub headers: Vec<String>,
    /// Row-major, `n_rows * n_cols` long.
    pub cells: Vec<String>,
}

impl TableEntity {
    pub fn from_rows(headers: Vec<String>, rows: Vec<Vec<String>>) -> Result<Self> {
        let n_rows = rows.len();
        let n_cols = rows.first().map_or(headers.len(), Vec::len);
        if rows.iter().any(|r| r.len() != n_cols) {
            return Err(RavError::DegenerateTable { n_rows, n_cols });
        }
        Ok(TableEntity {
            n_rows,
            n_cols,
            headers,
            cells: rows.into_iter().flatten().collect(),
        })
    }

    pub fn rows(&self) -> impl Iterator<Item = &[String]> + '_ {
        self.cells.chunks(self.n_cols.max(1)).take(self.n_rows)
    }

    pub fn cell(&self, row: usize, col: usize) -> &str {
        &self.cells[row * self.n_cols + col]
    }

    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.cells.len() != self.n_rows * self.n_cols {
            out.push("cells length mismatch".to_string());
        }
        if !self.headers.is_empty() && self.headers.len() != self.n_cols {
            out.push("headers length mismatch".to_string());
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageType {
    Photograph,
    Chart,
    Diagram,
    Flowchart,
    Logo,
    Screenshot,
    Other,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Enrichment {
    pub image_type: ImageType,
    pub description: String,
    #[serde(default)]
    pub extracted_text: String,
    #[serde(default)]
    pub structured_data: Option<serde_json::Map<String, serde_json::Value>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageEntity {
    pub crop: Raster,
    #[serde(default = "one")]
    pub scale_factor: f64,
    #[serde(default)]
    pub label: Option<String>,
    #[serde(default)]
    pub label_confidence: Option<f64>,
    #[serde(default)]
    pub enrichment: Option<Enrichment>,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextEntity {
    pub text: String,
    #[serde(default)]
    pub urls: Vec<String>,
    #[serde(default)]
    pub latex: Option<String>,
}

impl TextEntity {
    pub fn plain(text: impl Into<String>) -> Self {
        TextEntity {
            text: text.into(),
            urls: Vec::new(),
            latex: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EntityContent {
    Table(TableEntity),
    Image(ImageEntity),
    Text(TextEntity),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractedEntity {
    pub entity_type: EntityType,
    pub content: EntityContent,
}

impl ExtractedEntity {
    pub fn table(t: TableEntity) -> Self {
        ExtractedEntity {
            entity_type: EntityType::Table,
            content: EntityContent::Table(t),
        }
    }

    pub fn image(i: ImageEntity) -> Self {
        ExtractedEntity {
            entity_type: EntityType::Image,
            content: EntityContent::Image(i),
        }
    }

    pub fn text(entity_type: EntityType, t: TextEntity) -> Self {
        ExtractedEntity {
            entity_type,
            content: EntityContent::Text(t),
        }
    }

    pub fn variant_matches_type(&self) -> bool {
        match &self.content {
            EntityContent::Table(_) => self.entity_type == EntityType::Table,
            EntityContent::Image(_) => self.entity_type == EntityType::Image,
            EntityContent::Text(_) => self.entity_type.is_text_like(),
        }
    }

    pub fn violations(&self, urls: &UrlPattern) -> Vec<String> {
        let mut out = Vec::new();
        if !self.variant_matches_type() {
            out.push("entity variant does not match entity_type".to_string());
        }
        match &self.content {
            EntityContent::Table(t) => out.extend(t.violations()),
            EntityContent::Image(i) => {
                if i.crop.is_empty() {
                    out.push("image crop empty".to_string());
                }
            }
            EntityContent::Text(t) => {
                if t.urls.iter().any(|u| !urls.is_match(u)) {
                    out.push("url does not match pattern".to_string());
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelityReport {
    pub score: f64,
    pub components: BTreeMap<String, f64>,
    pub threshold_applied: f64,
    pub passed: bool,
}

impl FidelityReport {
    /// Report not yet gated; `threshold_applied` and `passed` are set by the gate.
    pub fn ungated(score: f64, components: BTreeMap<String, f64>) -> Self {
        FidelityReport {
            score,
            components,
            threshold_applied: f64::NAN,
            passed: false,
        }
    }

    pub fn zero(diagnostic: &str) -> Self {
        let mut components = BTreeMap::new();
        components.insert(diagnostic.to_string(), 1.0);
        FidelityReport::ungated(0.0, components)
    }

    pub fn with_threshold(mut self, threshold: f64) -> Self {
        self.threshold_applied = threshold;
        self.passed = self.score >= threshold;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub extractor_id: String,
    pub re_extraction_count: u8,
    pub pass_fidelities: Vec<FidelityReport>,
    pub low_confidence: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordContext {
    pub neighbors: Vec<String>,
    pub caption: Option<String>,
    pub preceding: Vec<String>,
    pub following: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum EnrichmentStatus {
    Enriched,
    Skipped { reason: String },
    EnrichmentError { message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityRecord {
    pub region_id: String,
    pub entity_type: EntityType,
    pub bbox: BoundingBox,
    pub page: String,
    pub entity: Option<ExtractedEntity>,
    pub fidelity: FidelityReport,
    pub provenance: Provenance,
    pub context: RecordContext,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub enrichment_status: Option<EnrichmentStatus>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub diagnostics: Vec<String>,
}

/// Lists every broken record invariant. Empty means the record is well formed.
pub fn validate_record(record: &EntityRecord) -> Vec<String> {
    validate_record_with(record, UrlPattern::default_pattern())
}

pub fn validate_record_with(record: &EntityRecord, urls: &UrlPattern) -> Vec<String> {
    let mut out = Vec::new();
    if record.bbox.is_degenerate() {
        out.push("degenerate bbox".to_string());
    }
    match &record.entity {
        Some(entity) => {
            if entity.entity_type != record.entity_type {
                out.push("entity_type mismatch".to_string());
            }
            out.extend(entity.violations(urls));
        }
        None if record.diagnostics.is_empty() => out.push("entity missing".to_string()),
        None => {}
    }
    let f = &record.fidelity;
    if !(0.0..=1.0).contains(&f.score) {
        out.push("score out of range".to_string());
    }
    if f.passed != (f.score >= f.threshold_applied) {
        out.push("passed inconsistent".to_string());
    }
    let p = &record.provenance;
    if p.re_extraction_count > 1 {
        out.push("re_extraction_count exceeds 1".to_string());
    }
    if p.pass_fidelities.len() != p.re_extraction_count as usize + 1 {
        out.push("pass_fidelities length inconsistent".to_string());
    }
    if p.low_confidence != (f.score < f.threshold_applied) {
        out.push("low_confidence inconsistent".to_string());
    }
    if record.context.preceding.len() > 2 || record.context.following.len() > 2 {
        out.push("context too long".to_string());
    }
    out
}

/// URL recognizer applied to text extractions.
#[derive(Debug, Clone)]
pub struct UrlPattern {
    find: Regex,
    full: Regex,
}

pub const DEFAULT_URL_PATTERN: &str = r"https?://[^\s)\]}>]+";

impl UrlPattern {
    pub fn new(pattern: &str) -> Result<Self> {
        let find = Regex::new(pattern).map_err(|e| RavError::Config(format!("url pattern: {e}")))?;
        let full = Regex::new(&format!("^(?:{pattern})$"))
            .map_err(|e| RavError::Config(format!("url pattern: {e}")))?;
        Ok(UrlPattern { find, full })
    }

    pub fn default_pattern() -> &'static UrlPattern {
        static DEFAULT: OnceLock<UrlPattern> = OnceLock::new();
        DEFAULT.get_or_init(|| UrlPattern::new(DEFAULT_URL_PATTERN).expect("default pattern compiles"))
    }

    pub fn is_match(&self, url: &str) -> bool {
        self.full.is_match(url)
    }

    pub fn extract(&self, text: &str) -> Vec<String> {
        self.find.find_iter(text).map(|m| m.as_str().to_string()).collect()
    }

    /// Keeps conforming plugin-supplied urls and appends any found in `text`.
    pub fn merge_into(&self, entity: &mut TextEntity) {
        let mut urls: Vec<String> = entity.urls.drain(..).filter(|u| self.is_match(u)).collect();
        for u in self.extract(&entity.text) {
            if !urls.contains(&u) {
                urls.push(u);
            }
        }
        entity.urls = urls;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PluginRole {
    PrimaryExtractor,
    FallbackExtractor,
    OcrReference,
    Enricher,
}

impl PluginRole {
    pub fn as_str(self) -> &'static str {
        match self {
            PluginRole::PrimaryExtractor => "primary_extractor",
            PluginRole::FallbackExtractor => "fallback_extractor",
            PluginRole::OcrReference => "ocr_reference",
            PluginRole::Enricher => "enricher",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PluginCall {
    pub role: PluginRole,
    /// Wall time; only recorded when timing capture is enabled.
    pub duration_ms: Option<u64>,
    pub ok: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PassChoice {
    Primary,
    Fallback,
}

/// `full` when a fallback extractor was wired in, `primary_only` otherwise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PipelineMode {
    Full,
    PrimaryOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PassRecord {
    pub extractor_id: String,
    pub entity: Option<ExtractedEntity>,
    pub fidelity: FidelityReport,
    /// Digest of the anchor pixels the comparator scored against.
    pub anchor_digest: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostic: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationTrace {
    pub region_id: String,
    pub page: String,
    pub bbox: BoundingBox,
    pub entity_type: EntityType,
    pub pipeline_mode: PipelineMode,
    pub primary: PassRecord,
    pub fallback: Option<PassRecord>,
    pub gate_fired: bool,
    pub final_choice: PassChoice,
    pub plugin_calls: Vec<PluginCall>,
    #[serde(default)]
    pub enrichment: Option<Enrichment>,
}

impl ValidationTrace {
    pub fn final_pass(&self) -> &PassRecord {
        match (self.final_choice, &self.fallback) {
            (PassChoice::Fallback, Some(fb)) => fb,
            _ => &self.primary,
        }
    }

    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.fallback.is_some() != self.gate_fired {
            out.push("fallback presence inconsistent with gate_fired".to_string());
        }
        let expected = match &self.fallback {
            Some(fb) if fb.fidelity.score > self.primary.fidelity.score => PassChoice::Fallback,
            _ => PassChoice::Primary,
        };
        if self.final_choice != expected {
            out.push("final_choice is not the higher-fidelity pass".to_string());
        }
        out
    }

    /// Canonical single-line JSON: declaration-ordered fields, sorted maps.
    pub fn to_canonical_line(&self) -> String {
        serde_json::to_string(self).expect("trace serialization cannot fail")
    }

    pub fn from_json_line(line: &str) -> Result<Self> {
        let trace: ValidationTrace =
            serde_json::from_str(line).map_err(|e| RavError::Trace(format!("malformed trace: {e}")))?;
        let problems = trace.violations();
        if !problems.is_empty() {
            return Err(RavError::Trace(format!(
                "trace {} rejected: {}",
                trace.region_id,
                problems.join("; ")
            )));
        }
        Ok(trace)
    }
}

/// Serialize-then-parse; equal traces serialize to identical bytes.
pub fn trace_roundtrip(trace: &ValidationTrace) -> Result<ValidationTrace> {
    ValidationTrace::from_json_line(&trace.to_canonical_line())
}

pub fn traces_to_jsonl(traces: &[ValidationTrace]) -> String {
    let mut out = String::new();
    for t in traces {
        out.push_str(&t.to_canonical_line());
        out.push('\n');
    }
    out
}

pub fn traces_from_jsonl(text: &str) -> Result<Vec<ValidationTrace>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(ValidationTrace::from_json_line)
        .collect()
}
