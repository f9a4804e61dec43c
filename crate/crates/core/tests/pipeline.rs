use std::path::Path;

use rav_core::config::RavConfig;
use rav_core::ingest::load_manifest;
use rav_core::model::{validate_record, EntityType, EnrichmentStatus, PassChoice};
use rav_core::orchestrate::{process_document, DocumentRun};
use rav_core::plugins::PluginSet;
use rav_core::synthetic::mixed_document;

const CONFIG: &str = r#"seed = 3

[plugins.primary]
kind = "mock"
ground_truth = "truth.json"
epsilon = 0.3
p_row_drop = 0.3

[plugins.fallback]
kind = "mock_fallback"
ground_truth = "truth.json"
recovery_quality = 0.8

[plugins.ocr_reference]
kind = "mock"
ground_truth = "truth.json"

[plugins.enricher]
kind = "mock"
ground_truth = "truth.json"
"#;

fn run(dir: &Path, jobs: usize) -> DocumentRun {
    let mut cfg = RavConfig::load(&dir.join("config.toml")).unwrap();
    cfg.jobs = jobs;
    let loaded = load_manifest(&dir.join("manifest.json")).unwrap();
    process_document(&loaded, &PluginSet::from_config(&cfg).unwrap(), &cfg).unwrap()
}

fn written_doc() -> tempfile::TempDir {
    let tmp = tempfile::tempdir().unwrap();
    mixed_document(3, 42).write(tmp.path()).unwrap();
    std::fs::write(tmp.path().join("config.toml"), CONFIG).unwrap();
    tmp
}

#[test]
fn mixed_document_runs_end_to_end() {
    let tmp = written_doc();
    let out = run(tmp.path(), 0);
    assert_eq!(out.records.len(), 18);
    assert_eq!(out.summary.regions_processed, 18);
    assert!(out.summary.regions_filtered.is_empty());
    for (record, trace) in out.records.iter().zip(&out.traces) {
        assert_eq!(record.region_id, trace.region_id);
        assert!(validate_record(record).is_empty(), "{}: {:?}", record.region_id, validate_record(record));
        if trace.final_choice == PassChoice::Fallback {
            assert_eq!(record.provenance.extractor_id, "mock-fallback");
        }
        if record.entity_type == EntityType::Image {
            assert_eq!(record.enrichment_status, Some(EnrichmentStatus::Enriched));
            assert!(record.context.caption.is_some(), "{} lost its caption", record.region_id);
        }
    }
    let ids: Vec<&str> = out.records.iter().map(|r| r.region_id.as_str()).collect();
    let mut sorted = ids.clone();
    sorted.sort();
    assert_eq!(ids, sorted);
    assert_eq!(
        out.summary.estimated_cost,
        out.summary.fallback_calls as f64 * out.summary.cost_per_fallback_call
    );
}

#[test]
fn worker_count_does_not_change_output() {
    let tmp = written_doc();
    let (a, b) = (run(tmp.path(), 0), run(tmp.path(), 1));
    assert_eq!(a.records, b.records);
    assert_eq!(a.traces, b.traces);
    assert_eq!(a.summary, b.summary);
}

#[test]
fn missing_page_raster_is_a_manifest_error() {
    let tmp = written_doc();
    std::fs::remove_file(tmp.path().join("p000.png")).unwrap();
    let loaded = load_manifest(&tmp.path().join("manifest.json")).unwrap();
    let cfg = RavConfig::default();
    let err = process_document(&loaded, &PluginSet::default(), &cfg).unwrap_err();
    assert!(err.to_string().contains("p000"), "{err}");
}
