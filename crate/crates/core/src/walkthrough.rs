//! Replay of the bundled single-page walkthrough: a native page with seven
//! text blocks, one row-spanning table and one chart, run end to end with
//! scripted plugins and checked row by row against `expected.json`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::RavConfig;
use crate::error::{RavError, Result};
use crate::ingest::load_manifest;
use crate::model::{EntityRecord, EntityType, QualityKind, ValidationTrace};
use crate::orchestrate::{process_document, DocumentRun};
use crate::plugins::PluginSet;

/// One row of the expected per-entity table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpectedRow {
    pub region_id: String,
    pub entity_type: EntityType,
    pub primary_fidelity: f64,
    pub fallback: bool,
    pub final_fidelity: f64,
    pub low_confidence: bool,
    pub re_extraction_count: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Expected {
    pub page_quality: Option<QualityKind>,
    #[serde(default)]
    pub filtered_regions: Vec<String>,
    pub rows: Vec<ExpectedRow>,
}

impl Expected {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| RavError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| RavError::Config(format!("{}: {e}", path.display())))
    }
}

/// What the run produced for one region, in the expected table's terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservedRow {
    pub region_id: String,
    pub entity_type: EntityType,
    pub primary_fidelity: f64,
    pub primary_passed: bool,
    pub fallback: bool,
    pub final_fidelity: f64,
    pub low_confidence: bool,
    pub re_extraction_count: u8,
}

impl ObservedRow {
    fn from_run(record: &EntityRecord, trace: &ValidationTrace) -> Self {
        ObservedRow {
            region_id: record.region_id.clone(),
            entity_type: record.entity_type,
            primary_fidelity: trace.primary.fidelity.score,
            primary_passed: trace.primary.fidelity.passed,
            fallback: trace.gate_fired,
            final_fidelity: record.fidelity.score,
            low_confidence: record.provenance.low_confidence,
            re_extraction_count: record.provenance.re_extraction_count,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ReplayReport {
    pub rows: Vec<ObservedRow>,
    pub mismatches: Vec<String>,
    #[serde(skip)]
    pub run: DocumentRun,
}

impl ReplayReport {
    pub fn passed(&self) -> bool {
        self.mismatches.is_empty()
    }

    /// Fixed-width table of the observed rows.
    pub fn render_table(&self) -> String {
        let mut out = String::from("region  type   primary  fallback  final  low_confidence  re_extractions\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{:<7} {:<6} {:>7.3}  {:<8}  {:>5.3}  {:<14}  {}\n",
                r.region_id,
                r.entity_type.as_str(),
                r.primary_fidelity,
                if r.fallback { "yes" } else { "no" },
                r.final_fidelity,
                if r.low_confidence { "yes" } else { "no" },
                r.re_extraction_count
            ));
        }
        out
    }
}

/// Directory of the fixtures shipped with this crate.
pub fn bundled_fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join("walkthrough")
}

fn three(x: f64) -> String {
    format!("{x:.3}")
}

/// Compares a run against the expected table; one message per disagreement.
pub fn compare_rows(expected: &Expected, run: &DocumentRun) -> Vec<String> {
    let mut out = Vec::new();
    let observed: BTreeMap<&str, (&EntityRecord, &ValidationTrace)> = run
        .records
        .iter()
        .zip(&run.traces)
        .map(|(r, t)| (r.region_id.as_str(), (r, t)))
        .collect();
    let wanted: BTreeMap<&str, &ExpectedRow> = expected.rows.iter().map(|r| (r.region_id.as_str(), r)).collect();

    for (id, want) in &wanted {
        let Some((record, trace)) = observed.get(id) else {
            out.push(format!("{id}: missing from run"));
            continue;
        };
        let got = ObservedRow::from_run(record, trace);
        let primary_pass_expected = want.primary_fidelity >= trace.primary.fidelity.threshold_applied;
        let checks: [(&str, String, String); 7] = [
            ("entity_type", want.entity_type.as_str().into(), got.entity_type.as_str().into()),
            ("primary_fidelity", three(want.primary_fidelity), three(got.primary_fidelity)),
            ("primary_gate", primary_pass_expected.to_string(), got.primary_passed.to_string()),
            ("fallback", want.fallback.to_string(), got.fallback.to_string()),
            ("final_fidelity", three(want.final_fidelity), three(got.final_fidelity)),
            ("low_confidence", want.low_confidence.to_string(), got.low_confidence.to_string()),
            (
                "re_extraction_count",
                want.re_extraction_count.to_string(),
                got.re_extraction_count.to_string(),
            ),
        ];
        for (field, w, g) in checks {
            if w != g {
                out.push(format!("{id}: {field} expected {w}, got {g}"));
            }
        }
    }
    for id in observed.keys().filter(|id| !wanted.contains_key(*id)) {
        out.push(format!("{id}: unexpected region in run"));
    }

    if let Some(q) = expected.page_quality {
        for page in &run.summary.pages {
            if page.quality != q {
                out.push(format!("page {}: quality expected {q:?}, got {:?}", page.page_id, page.quality));
            }
        }
    }
    let mut filtered = run.summary.regions_filtered.clone();
    filtered.sort();
    let mut want_filtered = expected.filtered_regions.clone();
    want_filtered.sort();
    if filtered != want_filtered {
        out.push(format!("filtered regions expected {want_filtered:?}, got {filtered:?}"));
    }
    out
}

/// Runs `manifest.json` under `config.toml` from `dir` and checks the result
/// against `expected.json` in the same directory.
pub fn replay(dir: &Path) -> Result<ReplayReport> {
    let cfg = RavConfig::load(&dir.join("config.toml"))?;
    let loaded = load_manifest(&dir.join("manifest.json"))?;
    let expected = Expected::load(&dir.join("expected.json"))?;
    let plugins = PluginSet::from_config(&cfg)?;
    let run = process_document(&loaded, &plugins, &cfg)?;
    let mismatches = compare_rows(&expected, &run);
    let rows = run
        .records
        .iter()
        .zip(&run.traces)
        .map(|(r, t)| ObservedRow::from_run(r, t))
        .collect();
    Ok(ReplayReport { rows, mismatches, run })
}
