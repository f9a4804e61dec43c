use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::Arc;
use std::time::Duration;

use serde_json::{json, Value};

use rav_core::model::{EntityType, PluginRole};
use rav_core::plugins::{Payload, PluginClient, PluginHandle, SubprocessClient};
use rav_core::raster::Raster;
use rav_core::walkthrough::bundled_fixture_dir;

fn rav(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rav"))
        .args(args)
        .env_remove("RAV_API_KEY")
        .output()
        .expect("rav runs")
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Copy of the bundled walkthrough fixtures that a test may edit.
fn fixture_copy(tmp: &Path) -> PathBuf {
    let dir = tmp.join("walkthrough");
    std::fs::create_dir_all(&dir).unwrap();
    for entry in std::fs::read_dir(bundled_fixture_dir()).unwrap() {
        let path = entry.unwrap().path();
        std::fs::copy(&path, dir.join(path.file_name().unwrap())).unwrap();
    }
    dir
}

fn edit_json(path: &Path, f: impl FnOnce(&mut Value)) {
    let mut v: Value = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    f(&mut v);
    std::fs::write(path, serde_json::to_string_pretty(&v).unwrap()).unwrap();
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn validate_walkthrough_writes_all_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let fx = bundled_fixture_dir();
    let out = tmp.path().join("out");
    let o = rav(&[
        "validate",
        "--manifest",
        s(&fx.join("manifest.json")),
        "--config",
        s(&fx.join("config.toml")),
        "--out",
        s(&out),
        "--mode",
        "gate_only",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let summary = read_json(&out.join("summary.json"));
    assert_eq!(summary["fallback_calls"], 1);
    assert_eq!(summary["low_confidence"], 1);
    assert_eq!(summary["regions_processed"], 9);
    let records = std::fs::read_to_string(out.join("records.jsonl")).unwrap();
    assert_eq!(records.lines().count(), 9);
    let ctx = read_json(&out.join("context_gate_only.json"));
    let ids: Vec<&str> = ctx.as_array().unwrap().iter().map(|e| e["region_id"].as_str().unwrap()).collect();
    assert_eq!(ids.len(), 8);
    assert!(!ids.contains(&"0_7"));
    // Inputs are untouched.
    let again = rav(&["replay-walkthrough"]);
    assert!(again.status.success());
}

#[test]
fn validate_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let missing = rav(&["validate", "--manifest", "/definitely/not/here.json", "--out", s(&out)]);
    assert_eq!(missing.status.code(), Some(2), "{}", stderr(&missing));

    let broken = tmp.path().join("broken.json");
    std::fs::write(&broken, "{\"document_id\": 3}").unwrap();
    assert_eq!(rav(&["validate", "--manifest", s(&broken), "--out", s(&out)]).status.code(), Some(2));

    let fx = bundled_fixture_dir();
    let bad_cfg = tmp.path().join("bad.toml");
    std::fs::write(&bad_cfg, "[weights.table]\nssim = 0.9\nstructure = 0.6\n").unwrap();
    let o = rav(&["validate", "--manifest", s(&fx.join("manifest.json")), "--config", s(&bad_cfg), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));

    let o = rav(&[
        "validate",
        "--manifest",
        s(&fx.join("manifest.json")),
        "--config",
        s(&fx.join("config.toml")),
        "--out",
        s(&out),
        "--containment-threshold",
        "1.5",
    ]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn validate_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let fx = bundled_fixture_dir();
    let mut traces = Vec::new();
    for (k, jobs) in ["0", "1"].iter().enumerate() {
        let out = tmp.path().join(format!("run{k}"));
        let o = rav(&[
            "validate",
            "--manifest",
            s(&fx.join("manifest.json")),
            "--config",
            s(&fx.join("config.toml")),
            "--out",
            s(&out),
            "--jobs",
            jobs,
        ]);
        assert!(o.status.success());
        traces.push(std::fs::read(out.join("traces.jsonl")).unwrap());
    }
    assert_eq!(traces[0], traces[1]);
}

#[test]
fn replay_reports_edited_expectation() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = fixture_copy(tmp.path());
    // Claim the fallback reached 0.80; under the table gate that would clear
    // low confidence, which the run contradicts.
    edit_json(&dir.join("expected.json"), |v| {
        let row = v["rows"].as_array_mut().unwrap().iter_mut().find(|r| r["region_id"] == "0_7").unwrap();
        row["final_fidelity"] = json!(0.80);
        row["low_confidence"] = json!(false);
    });
    let o = rav(&["replay-walkthrough", "--fixtures", s(&dir)]);
    assert_eq!(o.status.code(), Some(5));
    let err = stderr(&o);
    assert!(err.contains("0_7: low_confidence expected false, got true"), "{err}");
    assert!(err.contains("0_7: final_fidelity expected 0.800, got 0.387"), "{err}");
}

#[test]
fn replay_names_an_extra_region() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = fixture_copy(tmp.path());
    edit_json(&dir.join("manifest.json"), |v| {
        v["regions"].as_array_mut().unwrap().push(json!({
            "region_id": "0_11",
            "page_id": "0",
            "bbox": {"x0": 86.0, "y0": 1200.0, "x1": 400.0, "y1": 1214.0},
            "entity_type": "text"
        }));
    });
    let o = rav(&["replay-walkthrough", "--fixtures", s(&dir)]);
    assert_eq!(o.status.code(), Some(5), "{}", stderr(&o));
    assert!(stderr(&o).contains("0_11: unexpected region in run"), "{}", stderr(&o));
}

#[test]
fn eval_tasks_and_input_mismatches() {
    let tmp = tempfile::tempdir().unwrap();
    let answers = tmp.path().join("answers.json");
    let a = |q: &str, p: &str| json!({"question_id": q, "predicted": p, "golds": ["delta"]});
    std::fs::write(
        &answers,
        json!({"full": [a("q1", "delta"), a("q2", "delta")], "no_rav": [a("q1", "delta"), a("q3", "x")]}).to_string(),
    )
    .unwrap();
    let o = rav(&["eval", "ablation", s(&answers)]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));

    std::fs::write(
        &answers,
        json!({"full": [a("q1", "delta"), a("q2", "delta")], "no_rav": [a("q1", "delta"), a("q2", "unanswerable")]})
            .to_string(),
    )
    .unwrap();
    let out = tmp.path().join("report");
    let o = rav(&["eval", "ablation", s(&answers), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report = read_json(&out.join("ablation.json"));
    assert_eq!(report["per_mode"]["full"]["anls"], 1.0);
    assert_eq!(report["per_mode"]["no_rav"]["answerable_rate"], 0.5);
    assert!(out.join("ablation.csv").exists());

    assert_eq!(rav(&["eval", "recovery", s(&answers)]).status.code(), Some(4));
    assert_eq!(rav(&["eval", "layout", s(&answers)]).status.code(), Some(4));
    assert_eq!(rav(&["eval", "reliability", s(&answers)]).status.code(), Some(4));
}

#[test]
fn eval_layout_identity() {
    let tmp = tempfile::tempdir().unwrap();
    let boxes = tmp.path().join("boxes.json");
    std::fs::write(
        &boxes,
        json!([
            {"page": "p", "entity_type": "table", "bbox": {"x0": 0.0, "y0": 0.0, "x1": 10.0, "y1": 10.0}},
            {"page": "p", "entity_type": "text", "bbox": {"x0": 20.0, "y0": 0.0, "x1": 40.0, "y1": 5.0}}
        ])
        .to_string(),
    )
    .unwrap();
    let o = rav(&["eval", "layout", s(&boxes), s(&boxes)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report["micro_f1"], 1.0);
    assert_eq!(report["macro_f1"], 1.0);
}

#[test]
fn sweep_feeds_reliability() {
    let tmp = tempfile::tempdir().unwrap();
    let csv = tmp.path().join("sweep.csv");
    let o = rav(&["sweep", "--n", "60", "--seed", "5", "--skip-visual", "--out", s(&csv)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = tmp.path().join("rel");
    let o = rav(&["eval", "reliability", s(&csv), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report = read_json(&out.join("reliability.json"));
    assert!(report["spearman"]["rho"].as_f64().unwrap() >= 0.8);
    let curve = std::fs::read_to_string(out.join("pr_curve.csv")).unwrap();
    assert_eq!(curve.lines().count(), 102);
}

#[test]
fn serve_mock_speaks_the_subprocess_protocol() {
    let script = bundled_fixture_dir().join("ocr.json");
    let client = SubprocessClient::spawn(
        env!("CARGO_BIN_EXE_rav"),
        &["serve-mock".to_string(), "--script".to_string(), s(&script).to_string()],
        Duration::from_secs(10),
    )
    .unwrap();
    let h = PluginHandle::in_process(Arc::new(client) as Arc<dyn PluginClient>, PluginRole::OcrReference).unwrap();
    let crop = Raster::filled_gray(4, 4, 255);
    match h.invoke(EntityType::Table, "0_7", &crop, &[]).result.unwrap() {
        Payload::Reference(r) => assert_eq!(r.shape.map(|s| (s.n_rows, s.n_cols)), Some((8, 7))),
        other => panic!("{other:?}"),
    }
    assert_eq!(h.invoke(EntityType::Text, "nope", &crop, &[]).result.unwrap_err(), "unknown region");
}

#[test]
fn walkthrough_replays_through_subprocess_plugins() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = fixture_copy(tmp.path());
    let bin = env!("CARGO_BIN_EXE_rav");
    let mut cfg = String::from("seed = 7\n");
    for (role, file) in [("primary", "primary"), ("fallback", "fallback"), ("ocr_reference", "ocr"), ("enricher", "enricher")] {
        let script = dir.join(format!("{file}.json"));
        cfg.push_str(&format!(
            "\n[plugins.{role}]\nkind = \"subprocess\"\ncommand = {bin:?}\nargs = [\"serve-mock\", \"--script\", {:?}]\n",
            s(&script)
        ));
    }
    std::fs::write(dir.join("config.toml"), cfg).unwrap();
    let o = rav(&["replay-walkthrough", "--fixtures", s(&dir)]);
    assert!(o.status.success(), "{}\n{}", String::from_utf8_lossy(&o.stdout), stderr(&o));
}

#[test]
fn keyed_plugins_are_skipped_without_an_api_key() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = fixture_copy(tmp.path());
    let cfg = "seed = 7\n\n[plugins.primary]\nkind = \"scripted\"\nscript = \"primary.json\"\n\n\
               [plugins.ocr_reference]\nkind = \"scripted\"\nscript = \"ocr.json\"\n\n\
               [plugins.fallback]\nkind = \"scripted\"\nscript = \"fallback.json\"\nrequires_api_key = true\n\n\
               [plugins.enricher]\nkind = \"scripted\"\nscript = \"enricher.json\"\nrequires_api_key = true\n";
    std::fs::write(dir.join("config.toml"), cfg).unwrap();
    let out = tmp.path().join("out");
    let o = rav(&[
        "validate",
        "--manifest",
        s(&dir.join("manifest.json")),
        "--config",
        s(&dir.join("config.toml")),
        "--out",
        s(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let summary = read_json(&out.join("summary.json"));
    assert_eq!(summary["pipeline_mode"], "primary_only");
    assert_eq!(summary["fallback_calls"], 0);
    assert_eq!(summary["regions_processed"], 9);
    let records = std::fs::read_to_string(out.join("records.jsonl")).unwrap();
    let image: Value = records
        .lines()
        .map(|l| serde_json::from_str::<Value>(l).unwrap())
        .find(|r| r["entity_type"] == "image")
        .unwrap();
    assert_eq!(image["enrichment_status"]["status"], "skipped");
    assert!(!out.join("context_full.json").exists());
}
