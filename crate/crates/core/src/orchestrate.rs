//! The validation loop: anchor-derived reference, primary pass, gate, at most
//! one fallback, retention, image enrichment and context assembly.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::compare::{degenerate_table_report, image_fidelity, table_fidelity, text_fidelity, TableScoring};
use crate::config::{CaptionRule, RavConfig, Thresholds};
use crate::error::{RavError, Result};
use crate::ingest::{
    anchor_crops, classify_page_quality, deskew, estimate_skew, load_page_rasters,
    spatial_region_filter, LoadedManifest, PageDescriptor, RegionManifest, RegionSpec,
};
use crate::model::{
    AnchorCrop, BoundingBox, EntityContent, EntityRecord, EntityType, Enrichment, EnrichmentStatus,
    ExtractedEntity, FidelityReport, PassChoice, PassRecord, PipelineMode, PluginCall, Provenance,
    QualityClass, QualityKind, RecordContext, ValidationTrace,
};
use crate::par::par_map;
use crate::plugins::{Payload, PluginHandle, PluginSet};
use crate::raster::Raster;
use crate::reconstruct::{
    caption_match, reconstruct_table, reconstruct_table_reference, reconstruct_text_reference,
    AnchorImageFeatures, ReferenceReader, ReferenceReading, TextReference,
};

const CONTEXT_SPAN: usize = 2;

/// Applies the per-type threshold. Passing means `score >= threshold`.
pub fn gate(report: &mut FidelityReport, entity_type: EntityType, thresholds: &Thresholds) -> bool {
    let t = thresholds.get(entity_type);
    report.threshold_applied = t;
    report.passed = report.score >= t;
    report.passed
}

/// Everything the comparator is allowed to score against, fixed before the
/// first pass and shared unchanged by the second.
#[derive(Debug, Clone)]
pub enum ReferenceChannel {
    Table(ReferenceReading),
    Image(AnchorImageFeatures),
    Text(TextReference),
    Unavailable(String),
}

pub struct RegionInput<'a> {
    pub region: &'a RegionSpec,
    pub anchor: &'a AnchorCrop,
    pub page: &'a PageDescriptor,
    /// Crop for the primary extractor when the page was deskewed.
    pub primary_crop: Option<Raster>,
    /// Text-region boxes on the same page, for the caption check.
    pub caption_boxes: Vec<BoundingBox>,
}

impl RegionInput<'_> {
    fn primary_pixels(&self) -> &Raster {
        self.primary_crop.as_ref().unwrap_or_else(|| self.anchor.pixels())
    }
}

struct RecordingReader<'a> {
    handle: &'a PluginHandle,
    entity_type: EntityType,
    calls: Mutex<Vec<PluginCall>>,
}

impl ReferenceReader for RecordingReader<'_> {
    fn read(&self, anchor: &AnchorCrop) -> Result<ReferenceReading> {
        let inv = self
            .handle
            .invoke(self.entity_type, anchor.region_id(), anchor.pixels(), &[]);
        self.calls.lock().expect("calls lock").push(inv.call);
        match inv.result {
            Ok(Payload::Reference(r)) => Ok(r),
            Ok(_) => Err(RavError::ReferenceUnavailable("OCR returned a non-reference payload".into())),
            Err(e) => Err(RavError::ReferenceUnavailable(e)),
        }
    }
}

pub fn build_reference(
    input: &RegionInput<'_>,
    ocr: Option<&PluginHandle>,
    cfg: &RavConfig,
    calls: &mut Vec<PluginCall>,
) -> ReferenceChannel {
    let entity_type = input.region.entity_type;
    let recorder = ocr.map(|handle| RecordingReader {
        handle,
        entity_type,
        calls: Mutex::new(Vec::new()),
    });
    let reader = recorder.as_ref().map(|r| r as &dyn ReferenceReader);
    let channel = match entity_type {
        EntityType::Image => ReferenceChannel::Image(AnchorImageFeatures::from_anchor(
            input.anchor,
            &input.caption_boxes,
            input.page.height as f64,
            &cfg.caption,
        )),
        EntityType::Table => match reconstruct_table_reference(input.anchor, input.page, reader) {
            Ok(r) => ReferenceChannel::Table(r),
            Err(e) => ReferenceChannel::Unavailable(e.to_string()),
        },
        _ => match reconstruct_text_reference(input.anchor, input.page, reader) {
            Ok(r) => ReferenceChannel::Text(r),
            Err(e) => ReferenceChannel::Unavailable(e.to_string()),
        },
    };
    if let Some(r) = recorder {
        calls.extend(r.calls.into_inner().expect("calls lock"));
    }
    channel
}

/// Fidelity of one extraction against the fixed reference (ungated).
pub fn score_entity(
    entity: &ExtractedEntity,
    anchor: &AnchorCrop,
    reference: &ReferenceChannel,
    cfg: &RavConfig,
) -> FidelityReport {
    match (&entity.content, reference) {
        (_, ReferenceChannel::Unavailable(_)) => FidelityReport::zero("reference_unavailable"),
        (EntityContent::Table(t), ReferenceChannel::Table(reading)) => match reconstruct_table(t, anchor) {
            Ok(recon) => table_fidelity(
                &recon,
                anchor,
                &reading.text,
                reading.shape,
                TableScoring {
                    table: &cfg.weights.table,
                    structure: &cfg.weights.table_structure,
                    skip_visual: cfg.table_skip_visual,
                },
            ),
            Err(_) => degenerate_table_report(),
        },
        (EntityContent::Image(i), ReferenceChannel::Image(features)) => {
            image_fidelity(&features.with_extracted(i, anchor), &cfg.weights.image)
        }
        (EntityContent::Text(t), ReferenceChannel::Text(reference)) => text_fidelity(&t.text, reference),
        _ => FidelityReport::zero("reference_mismatch"),
    }
}

fn run_pass(
    handle: Option<&PluginHandle>,
    input: &RegionInput<'_>,
    crop: &Raster,
    context: &[String],
    reference: &ReferenceChannel,
    cfg: &RavConfig,
    calls: &mut Vec<PluginCall>,
) -> PassRecord {
    let entity_type = input.region.entity_type;
    let (extractor_id, extracted) = match handle {
        Some(h) => {
            let inv = h.invoke(entity_type, &input.region.region_id, crop, context);
            calls.push(inv.call);
            let entity = match inv.result {
                Ok(Payload::Entity(e)) => Ok(e),
                Ok(_) => Err("extractor returned a non-entity payload".to_string()),
                Err(e) => Err(e),
            };
            (h.id().to_string(), entity)
        }
        None => ("none".to_string(), Err("no extractor configured".to_string())),
    };
    let (entity, mut fidelity, diagnostic) = match extracted {
        Ok(entity) => {
            let report = score_entity(&entity, input.anchor, reference, cfg);
            let diagnostic = match reference {
                ReferenceChannel::Unavailable(msg) => Some(msg.clone()),
                _ if report.components.contains_key("degenerate_table") => {
                    Some("degenerate table".to_string())
                }
                _ => None,
            };
            (Some(entity), report, diagnostic)
        }
        Err(msg) => (None, FidelityReport::zero("extraction_failed"), Some(msg)),
    };
    gate(&mut fidelity, entity_type, &cfg.thresholds);
    PassRecord {
        extractor_id,
        entity,
        fidelity,
        anchor_digest: input.anchor.digest().to_string(),
        diagnostic,
    }
}

/// Result of the first pass, held while context snippets are assembled.
#[derive(Debug, Clone)]
pub struct PrimaryOutcome {
    pub reference: ReferenceChannel,
    pub primary: PassRecord,
    pub calls: Vec<PluginCall>,
}

pub fn primary_pass(input: &RegionInput<'_>, plugins: &PluginSet, cfg: &RavConfig) -> PrimaryOutcome {
    let mut calls = Vec::new();
    let reference = build_reference(input, plugins.ocr_reference.as_ref(), cfg, &mut calls);
    let primary = run_pass(
        plugins.primary.as_ref(),
        input,
        input.primary_pixels(),
        &[],
        &reference,
        cfg,
        &mut calls,
    );
    PrimaryOutcome {
        reference,
        primary,
        calls,
    }
}

/// Gate, optional fallback on the unmodified anchor, and retention.
pub fn finish_entity(
    input: &RegionInput<'_>,
    outcome: PrimaryOutcome,
    context_snippets: &[String],
    plugins: &PluginSet,
    cfg: &RavConfig,
) -> (EntityRecord, ValidationTrace) {
    let PrimaryOutcome {
        reference,
        primary,
        mut calls,
    } = outcome;
    let reference_ok = !matches!(reference, ReferenceChannel::Unavailable(_));
    let fire = !primary.fidelity.passed && reference_ok && plugins.fallback.is_some();
    let fallback = fire.then(|| {
        run_pass(
            plugins.fallback.as_ref(),
            input,
            input.anchor.pixels(),
            context_snippets,
            &reference,
            cfg,
            &mut calls,
        )
    });
    let final_choice = match &fallback {
        Some(fb) if fb.fidelity.score > primary.fidelity.score => PassChoice::Fallback,
        _ => PassChoice::Primary,
    };
    let mode = if plugins.fallback.is_some() {
        PipelineMode::Full
    } else {
        PipelineMode::PrimaryOnly
    };
    let trace = ValidationTrace {
        region_id: input.region.region_id.clone(),
        page: input.region.page_id.clone(),
        bbox: input.region.bbox,
        entity_type: input.region.entity_type,
        pipeline_mode: mode,
        primary,
        fallback,
        gate_fired: fire,
        final_choice,
        plugin_calls: calls,
        enrichment: None,
    };
    let record = record_from_trace(&trace);
    (record, trace)
}

fn record_from_trace(trace: &ValidationTrace) -> EntityRecord {
    let chosen = trace.final_pass();
    let mut pass_fidelities = vec![trace.primary.fidelity.clone()];
    let mut diagnostics: Vec<String> = trace.primary.diagnostic.iter().map(|d| format!("primary: {d}")).collect();
    if let Some(fb) = &trace.fallback {
        pass_fidelities.push(fb.fidelity.clone());
        diagnostics.extend(fb.diagnostic.iter().map(|d| format!("fallback: {d}")));
    }
    EntityRecord {
        region_id: trace.region_id.clone(),
        entity_type: trace.entity_type,
        bbox: trace.bbox,
        page: trace.page.clone(),
        entity: chosen.entity.clone(),
        fidelity: chosen.fidelity.clone(),
        provenance: Provenance {
            extractor_id: chosen.extractor_id.clone(),
            re_extraction_count: u8::from(trace.fallback.is_some()),
            pass_fidelities,
            low_confidence: !chosen.fidelity.passed,
        },
        context: RecordContext::default(),
        enrichment_status: None,
        diagnostics,
    }
}

/// Both passes for a single region.
pub fn validate_entity(
    input: &RegionInput<'_>,
    plugins: &PluginSet,
    context_snippets: &[String],
    cfg: &RavConfig,
) -> (EntityRecord, ValidationTrace) {
    let outcome = primary_pass(input, plugins, cfg);
    finish_entity(input, outcome, context_snippets, plugins, cfg)
}

/// Calls the enricher for an image region whatever its gate outcome.
pub fn enrich_image(
    record: &mut EntityRecord,
    trace: &mut ValidationTrace,
    anchor: &AnchorCrop,
    enricher: Option<&PluginHandle>,
    context_snippets: &[String],
) {
    if record.entity_type != EntityType::Image {
        return;
    }
    let Some(handle) = enricher else {
        record.enrichment_status = Some(EnrichmentStatus::Skipped {
            reason: "no enricher available".to_string(),
        });
        return;
    };
    let inv = handle.invoke(EntityType::Image, &record.region_id, anchor.pixels(), context_snippets);
    trace.plugin_calls.push(inv.call);
    match inv.result {
        Ok(Payload::Enrichment(e)) => {
            if let Some(ExtractedEntity {
                content: EntityContent::Image(img),
                ..
            }) = record.entity.as_mut()
            {
                img.enrichment = Some(e.clone());
            }
            trace.enrichment = Some(e);
            record.enrichment_status = Some(EnrichmentStatus::Enriched);
        }
        Ok(_) => {
            record.enrichment_status = Some(EnrichmentStatus::EnrichmentError {
                message: "enricher returned a non-enrichment payload".to_string(),
            })
        }
        Err(msg) if msg.starts_with("schema violation") => {
            record.enrichment_status = Some(EnrichmentStatus::EnrichmentError { message: msg })
        }
        Err(msg) => record.enrichment_status = Some(EnrichmentStatus::Skipped { reason: msg }),
    }
}

/// Geometry and text of a region as seen by the context builder.
#[derive(Debug, Clone)]
pub struct ContextRegion {
    pub region_id: String,
    pub page: String,
    pub bbox: BoundingBox,
    pub entity_type: EntityType,
    pub text: Option<String>,
}

fn reading_key(b: &BoundingBox) -> (f64, f64) {
    (b.y0, b.x0)
}

/// Neighbours, caption and surrounding text blocks for `regions[target]`.
pub fn enrich_context(
    target: usize,
    regions: &[ContextRegion],
    k: usize,
    page_height: f64,
    rule: &CaptionRule,
) -> RecordContext {
    let me = &regions[target];
    let (cx, cy) = me.bbox.center();
    let mut others: Vec<(f64, &ContextRegion)> = regions
        .iter()
        .enumerate()
        .filter(|(i, r)| *i != target && r.page == me.page)
        .map(|(_, r)| {
            let (x, y) = r.bbox.center();
            (((x - cx).powi(2) + (y - cy).powi(2)).sqrt(), r)
        })
        .collect();
    others.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.region_id.cmp(&b.1.region_id)));
    let neighbors = others.iter().take(k).map(|(_, r)| r.region_id.clone()).collect();

    let mut blocks: Vec<&ContextRegion> = regions
        .iter()
        .filter(|r| r.page == me.page && r.entity_type == EntityType::Text)
        .collect();
    blocks.sort_by(|a, b| {
        let (ay, ax) = reading_key(&a.bbox);
        let (by, bx) = reading_key(&b.bbox);
        ay.total_cmp(&by).then(ax.total_cmp(&bx)).then_with(|| a.region_id.cmp(&b.region_id))
    });
    let text_of = |r: &&ContextRegion| r.text.clone().unwrap_or_default();
    let (before, after): (Vec<&ContextRegion>, Vec<&ContextRegion>) = {
        let key = reading_key(&me.bbox);
        let before = blocks
            .iter()
            .copied()
            .filter(|r| r.region_id != me.region_id && before_in_order(r, me, key))
            .collect();
        let after = blocks
            .iter()
            .copied()
            .filter(|r| r.region_id != me.region_id && !before_in_order(r, me, key))
            .collect();
        (before, after)
    };
    let preceding = before[before.len().saturating_sub(CONTEXT_SPAN)..].iter().map(text_of).collect();
    let following = after.iter().take(CONTEXT_SPAN).map(text_of).collect();

    let caption = (me.entity_type == EntityType::Image)
        .then(|| {
            let boxes: Vec<BoundingBox> = blocks.iter().map(|r| r.bbox).collect();
            caption_match(&me.bbox, &boxes, page_height, rule).map(|i| text_of(&blocks[i]))
        })
        .flatten();
    RecordContext {
        neighbors,
        caption,
        preceding,
        following,
    }
}

fn before_in_order(r: &ContextRegion, me: &ContextRegion, key: (f64, f64)) -> bool {
    let rk = reading_key(&r.bbox);
    rk.0 < key.0 || (rk.0 == key.0 && (rk.1 < key.1 || (rk.1 == key.1 && r.region_id < me.region_id)))
}

fn entity_text(entity: Option<&ExtractedEntity>) -> Option<String> {
    match &entity?.content {
        EntityContent::Text(t) => Some(t.text.clone()),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TypeSummary {
    pub count: usize,
    pub passed_primary: usize,
    pub passed_final: usize,
    pub pass_rate: f64,
    pub mean_fidelity: f64,
    pub low_confidence: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PageSummary {
    pub page_id: String,
    pub quality: QualityKind,
    pub skew_degrees: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub document_id: String,
    pub pipeline_mode: PipelineMode,
    pub regions_processed: usize,
    pub regions_filtered: Vec<String>,
    pub regions_dropped_degenerate: usize,
    pub anchors_clipped: usize,
    pub per_type: BTreeMap<String, TypeSummary>,
    pub pass_rate: Option<f64>,
    pub mean_fidelity: Option<f64>,
    pub fallback_calls: usize,
    pub recovered: usize,
    pub cost_per_fallback_call: f64,
    pub estimated_cost: f64,
    pub low_confidence: usize,
    pub enrichment_attempts: usize,
    pub pages: Vec<PageSummary>,
}

#[allow(clippy::too_many_arguments)]
fn summarize(
    manifest: &RegionManifest,
    records: &[EntityRecord],
    traces: &[ValidationTrace],
    pages: Vec<PageSummary>,
    filtered: Vec<String>,
    dropped: usize,
    clipped: usize,
    plugins: &PluginSet,
    cfg: &RavConfig,
) -> Summary {
    let mut per_type = BTreeMap::new();
    for t in EntityType::ALL {
        let group: Vec<(&EntityRecord, &ValidationTrace)> = records
            .iter()
            .zip(traces)
            .filter(|(r, _)| r.entity_type == t)
            .collect();
        if group.is_empty() {
            continue;
        }
        let n = group.len();
        let passed_final = group.iter().filter(|(r, _)| r.fidelity.passed).count();
        per_type.insert(
            t.as_str().to_string(),
            TypeSummary {
                count: n,
                passed_primary: group.iter().filter(|(_, tr)| tr.primary.fidelity.passed).count(),
                passed_final,
                pass_rate: passed_final as f64 / n as f64,
                mean_fidelity: group.iter().map(|(r, _)| r.fidelity.score).sum::<f64>() / n as f64,
                low_confidence: group.iter().filter(|(r, _)| r.provenance.low_confidence).count(),
            },
        );
    }
    let n = records.len();
    let fallback_calls = traces.iter().filter(|t| t.fallback.is_some()).count();
    let recovered = traces
        .iter()
        .filter(|t| t.fallback.as_ref().is_some_and(|fb| fb.fidelity.passed))
        .count();
    Summary {
        document_id: manifest.document_id.clone(),
        pipeline_mode: if plugins.fallback.is_some() {
            PipelineMode::Full
        } else {
            PipelineMode::PrimaryOnly
        },
        regions_processed: n,
        regions_filtered: filtered,
        regions_dropped_degenerate: dropped,
        anchors_clipped: clipped,
        per_type,
        pass_rate: (n > 0).then(|| records.iter().filter(|r| r.fidelity.passed).count() as f64 / n as f64),
        mean_fidelity: (n > 0).then(|| records.iter().map(|r| r.fidelity.score).sum::<f64>() / n as f64),
        fallback_calls,
        recovered,
        cost_per_fallback_call: cfg.cost_per_fallback_call,
        estimated_cost: fallback_calls as f64 * cfg.cost_per_fallback_call,
        low_confidence: records.iter().filter(|r| r.provenance.low_confidence).count(),
        enrichment_attempts: traces
            .iter()
            .flat_map(|t| &t.plugin_calls)
            .filter(|c| c.role == crate::model::PluginRole::Enricher)
            .count(),
        pages,
    }
}

#[derive(Debug, Clone)]
pub struct DocumentRun {
    pub records: Vec<EntityRecord>,
    pub traces: Vec<ValidationTrace>,
    pub summary: Summary,
}

fn page_quality(page: &PageDescriptor, raster: &Raster) -> QualityClass {
    match page.quality {
        Some(QualityKind::ScannedDegraded) => QualityClass {
            kind: QualityKind::ScannedDegraded,
            skew_degrees: estimate_skew(raster),
        },
        Some(kind) => QualityClass {
            kind,
            skew_degrees: 0.0,
        },
        None => classify_page_quality(raster, page.has_embedded_text()),
    }
}

/// Loads page rasters and runs the whole document.
pub fn process_document(loaded: &LoadedManifest, plugins: &PluginSet, cfg: &RavConfig) -> Result<DocumentRun> {
    let pages = load_page_rasters(loaded)?;
    process_pages(&loaded.manifest, &pages, plugins, cfg, loaded.dropped_degenerate)
}

/// Runs the pipeline on already-decoded page rasters. Output is ordered by
/// region id whatever the worker count.
pub fn process_pages(
    manifest: &RegionManifest,
    rasters: &BTreeMap<String, Raster>,
    plugins: &PluginSet,
    cfg: &RavConfig,
    dropped_degenerate: usize,
) -> Result<DocumentRun> {
    let anchors = anchor_crops(&manifest.regions, rasters)?;

    let page_list: Vec<&PageDescriptor> = manifest.pages.iter().collect();
    let qualities: Vec<QualityClass> = par_map(&page_list, cfg.jobs, |p| page_quality(p, &rasters[&p.page_id]));
    let quality: BTreeMap<&str, QualityClass> = page_list
        .iter()
        .zip(&qualities)
        .map(|(p, q)| (p.page_id.as_str(), *q))
        .collect();

    let (mut kept, removed) = spatial_region_filter(&manifest.regions, cfg.containment_threshold);
    kept.sort_by(|a, b| a.region_id.cmp(&b.region_id));

    let inputs: Vec<RegionInput<'_>> = kept
        .iter()
        .map(|region| {
            let page = manifest.page(&region.page_id).expect("manifest pages checked at load");
            let anchor = &anchors.crops[&region.region_id];
            let q = quality[region.page_id.as_str()];
            let primary_crop = (q.kind == QualityKind::ScannedDegraded && q.skew_degrees != 0.0)
                .then(|| deskew(anchor.pixels(), q.skew_degrees));
            let caption_boxes = kept
                .iter()
                .filter(|r| r.page_id == region.page_id && r.entity_type == EntityType::Text)
                .map(|r| r.bbox)
                .collect();
            RegionInput {
                region,
                anchor,
                page,
                primary_crop,
                caption_boxes,
            }
        })
        .collect();

    let outcomes = par_map(&inputs, cfg.jobs, |input| primary_pass(input, plugins, cfg));

    let context_of = |texts: &[Option<String>]| -> Vec<RecordContext> {
        let regions: Vec<ContextRegion> = kept
            .iter()
            .zip(texts)
            .map(|(r, t)| ContextRegion {
                region_id: r.region_id.clone(),
                page: r.page_id.clone(),
                bbox: r.bbox,
                entity_type: r.entity_type,
                text: t.clone(),
            })
            .collect();
        (0..regions.len())
            .map(|i| {
                let h = manifest.page(&regions[i].page).map_or(0.0, |p| p.height as f64);
                enrich_context(i, &regions, cfg.context_neighbors, h, &cfg.caption)
            })
            .collect()
    };
    let primary_texts: Vec<Option<String>> =
        outcomes.iter().map(|o| entity_text(o.primary.entity.as_ref())).collect();
    let snippets: Vec<Vec<String>> = context_of(&primary_texts)
        .into_iter()
        .map(|c| c.preceding.into_iter().chain(c.following).collect())
        .collect();

    let work: Vec<(usize, PrimaryOutcome)> = outcomes.into_iter().enumerate().collect();
    let mut results: Vec<(EntityRecord, ValidationTrace)> = par_map(&work, cfg.jobs, |(i, outcome)| {
        let input = &inputs[*i];
        let (mut record, mut trace) = finish_entity(input, outcome.clone(), &snippets[*i], plugins, cfg);
        enrich_image(&mut record, &mut trace, input.anchor, plugins.enricher.as_ref(), &snippets[*i]);
        (record, trace)
    });

    let final_texts: Vec<Option<String>> =
        results.iter().map(|(r, _)| entity_text(r.entity.as_ref())).collect();
    for ((record, _), ctx) in results.iter_mut().zip(context_of(&final_texts)) {
        record.context = ctx;
    }

    let (records, traces): (Vec<EntityRecord>, Vec<ValidationTrace>) = results.into_iter().unzip();
    let pages = page_list
        .iter()
        .zip(&qualities)
        .map(|(p, q)| PageSummary {
            page_id: p.page_id.clone(),
            quality: q.kind,
            skew_degrees: q.skew_degrees,
        })
        .collect();
    let summary = summarize(
        manifest,
        &records,
        &traces,
        pages,
        removed.into_iter().map(|r| r.region_id).collect(),
        dropped_degenerate,
        anchors.clipped,
        plugins,
        cfg,
    );
    Ok(DocumentRun {
        records,
        traces,
        summary,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationMode {
    Full,
    GateOnly,
    NoRav,
}

impl AblationMode {
    pub const ALL: [AblationMode; 3] = [AblationMode::Full, AblationMode::GateOnly, AblationMode::NoRav];

    pub fn as_str(self) -> &'static str {
        match self {
            AblationMode::Full => "full",
            AblationMode::GateOnly => "gate_only",
            AblationMode::NoRav => "no_rav",
        }
    }
}

impl fmt::Display for AblationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AblationMode {
    type Err = RavError;

    fn from_str(s: &str) -> Result<Self> {
        AblationMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| RavError::Config(format!("unknown mode `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextEntry {
    pub region_id: String,
    pub entity_type: EntityType,
    pub fidelity: f64,
    pub text: String,
}

/// Plain-text rendering of an entity for a QA context window.
pub fn serialize_for_context(entity: Option<&ExtractedEntity>, enrichment: Option<&Enrichment>) -> String {
    match entity.map(|e| &e.content) {
        Some(EntityContent::Table(t)) => {
            let mut lines = Vec::new();
            if !t.headers.is_empty() {
                lines.push(t.headers.join(" | "));
            }
            lines.extend(t.rows().map(|r| r.join(" | ")));
            lines.join("\n")
        }
        Some(EntityContent::Text(t)) => t.text.clone(),
        Some(EntityContent::Image(img)) => {
            let e = enrichment.or(img.enrichment.as_ref());
            e.map(|e| {
                [e.description.as_str(), e.extracted_text.as_str()]
                    .iter()
                    .filter(|s| !s.is_empty())
                    .copied()
                    .collect::<Vec<_>>()
                    .join(" ")
            })
            .unwrap_or_default()
        }
        None => enrichment
            .map(|e| format!("{} {}", e.description, e.extracted_text).trim().to_string())
            .unwrap_or_default(),
    }
}

/// Context for one ablation mode, derived from a single full-mode trace set
/// and ordered by page then reading position.
pub fn derive_ablation_context(traces: &[ValidationTrace], mode: AblationMode) -> Result<Vec<ContextEntry>> {
    if let Some(t) = traces.iter().find(|t| t.pipeline_mode != PipelineMode::Full) {
        return Err(RavError::Trace(format!(
            "ablation needs traces from a full run; {} was produced without a fallback",
            t.region_id
        )));
    }
    let mut ordered: Vec<&ValidationTrace> = traces.iter().collect();
    ordered.sort_by(|a, b| {
        a.page
            .cmp(&b.page)
            .then(a.bbox.y0.total_cmp(&b.bbox.y0))
            .then(a.bbox.x0.total_cmp(&b.bbox.x0))
            .then_with(|| a.region_id.cmp(&b.region_id))
    });
    Ok(ordered
        .into_iter()
        .filter_map(|t| {
            let pass = match mode {
                AblationMode::Full => t.final_pass(),
                AblationMode::NoRav => &t.primary,
                AblationMode::GateOnly if t.primary.fidelity.passed => &t.primary,
                AblationMode::GateOnly => return None,
            };
            Some(ContextEntry {
                region_id: t.region_id.clone(),
                entity_type: t.entity_type,
                fidelity: pass.fidelity.score,
                text: serialize_for_context(pass.entity.as_ref(), t.enrichment.as_ref()),
            })
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::TableEntity;

    fn report(score: f64) -> FidelityReport {
        FidelityReport::ungated(score, BTreeMap::new())
    }

    #[test]
    fn gate_boundaries() {
        let th = Thresholds::default();
        let mut r = report(0.322);
        assert!(!gate(&mut r, EntityType::Table, &th));
        let mut r = report(0.981);
        assert!(gate(&mut r, EntityType::Image, &th));
        assert_eq!(r.threshold_applied, 0.70);
        let mut r = report(0.75);
        assert!(gate(&mut r, EntityType::Table, &th));
    }

    fn ctx_region(id: &str, ty: EntityType, b: (f64, f64, f64, f64), text: Option<&str>) -> ContextRegion {
        ContextRegion {
            region_id: id.into(),
            page: "p".into(),
            bbox: BoundingBox::new(b.0, b.1, b.2, b.3),
            entity_type: ty,
            text: text.map(String::from),
        }
    }

    #[test]
    fn first_block_has_no_preceding() {
        let regions = vec![
            ctx_region("a", EntityType::Text, (0.0, 0.0, 100.0, 10.0), Some("one")),
            ctx_region("b", EntityType::Text, (0.0, 20.0, 100.0, 30.0), Some("two")),
            ctx_region("c", EntityType::Text, (0.0, 40.0, 100.0, 50.0), Some("three")),
            ctx_region("d", EntityType::Text, (0.0, 60.0, 100.0, 70.0), Some("four")),
        ];
        let c = enrich_context(0, &regions, 3, 1000.0, &CaptionRule::default());
        assert!(c.preceding.is_empty());
        assert_eq!(c.following, vec!["two", "three"]);
        let c = enrich_context(3, &regions, 3, 1000.0, &CaptionRule::default());
        assert_eq!(c.preceding, vec!["two", "three"]);
        assert!(c.following.is_empty());
    }

    #[test]
    fn image_caption_beneath() {
        let regions = vec![
            ctx_region("img", EntityType::Image, (100.0, 100.0, 400.0, 300.0), None),
            ctx_region("cap", EntityType::Text, (100.0, 310.0, 400.0, 330.0), Some("Figure 1: bars")),
            ctx_region("far", EntityType::Text, (100.0, 900.0, 400.0, 930.0), Some("body")),
        ];
        let c = enrich_context(0, &regions, 3, 1000.0, &CaptionRule::default());
        assert_eq!(c.caption.as_deref(), Some("Figure 1: bars"));
        assert_eq!(c.neighbors, vec!["cap", "far"]);
    }

    #[test]
    fn context_table_serialization() {
        let t = TableEntity::from_rows(
            vec!["a".into(), "b".into()],
            vec![vec!["1".into(), "2".into()]],
        )
        .unwrap();
        let e = ExtractedEntity::table(t);
        assert_eq!(serialize_for_context(Some(&e), None), "a | b\n1 | 2");
    }

    #[test]
    fn ablation_mode_parsing() {
        assert_eq!("gate_only".parse::<AblationMode>().unwrap(), AblationMode::GateOnly);
        assert!("partial".parse::<AblationMode>().is_err());
    }
}
