//! Staged evaluation: layout matching, table structure, gate reliability,
//! fallback recovery and the context ablation.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{RavError, Result};
use crate::metrics::{anls, cer, pearson_r, spearman_rho, Spearman, ANLS_TAU};
use crate::model::{BoundingBox, EntityType, TableEntity, ValidationTrace};
use crate::orchestrate::AblationMode;
use crate::reconstruct::structural_signature;

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;
pub const DEFAULT_CORRECTNESS_CUTOFF: f64 = 0.1;
const MIN_RELIABILITY_SAMPLES: usize = 10;
const TAU_STEPS: usize = 100;

fn csv_string(write: impl FnOnce(&mut csv::Writer<Vec<u8>>) -> csv::Result<()>) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    write(&mut w).expect("writing csv to memory");
    String::from_utf8(w.into_inner().expect("flushing csv to memory")).expect("csv is utf-8")
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledBox {
    #[serde(default)]
    pub page: String,
    pub entity_type: EntityType,
    pub bbox: BoundingBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub gt: usize,
    pub predicted: usize,
    pub true_positives: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub mean_iou: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayoutReport {
    pub iou_threshold: f64,
    pub per_class: BTreeMap<String, ClassScores>,
    pub micro_f1: f64,
    pub macro_f1: f64,
}

fn f1_of(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Greedy one-to-one matching per class and page, highest IoU first.
pub fn layout_eval(pred: &[LabeledBox], gt: &[LabeledBox], iou_threshold: f64) -> LayoutReport {
    let mut per_class = BTreeMap::new();
    let (mut tp_all, mut pred_all, mut gt_all) = (0, 0, 0);
    for class in EntityType::ALL {
        let p: Vec<&LabeledBox> = pred.iter().filter(|b| b.entity_type == class).collect();
        let g: Vec<&LabeledBox> = gt.iter().filter(|b| b.entity_type == class).collect();
        if p.is_empty() && g.is_empty() {
            continue;
        }
        let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
        for (gi, gb) in g.iter().enumerate() {
            for (pi, pb) in p.iter().enumerate() {
                if gb.page != pb.page {
                    continue;
                }
                let v = iou(&gb.bbox, &pb.bbox);
                if v >= iou_threshold {
                    pairs.push((v, gi, pi));
                }
            }
        }
        pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut g_used = vec![false; g.len()];
        let mut p_used = vec![false; p.len()];
        let mut matched = Vec::new();
        for (v, gi, pi) in pairs {
            if !g_used[gi] && !p_used[pi] {
                g_used[gi] = true;
                p_used[pi] = true;
                matched.push(v);
            }
        }
        let tp = matched.len();
        let precision = ratio(tp, p.len());
        let recall = ratio(tp, g.len());
        per_class.insert(
            class.as_str().to_string(),
            ClassScores {
                gt: g.len(),
                predicted: p.len(),
                true_positives: tp,
                precision,
                recall,
                f1: f1_of(precision, recall),
                mean_iou: (tp > 0).then(|| matched.iter().sum::<f64>() / tp as f64),
            },
        );
        tp_all += tp;
        pred_all += p.len();
        gt_all += g.len();
    }
    let macro_f1 = if per_class.is_empty() {
        0.0
    } else {
        per_class.values().map(|c| c.f1).sum::<f64>() / per_class.len() as f64
    };
    LayoutReport {
        iou_threshold,
        per_class,
        micro_f1: f1_of(ratio(tp_all, pred_all), ratio(tp_all, gt_all)),
        macro_f1,
    }
}

impl LayoutReport {
    pub fn to_csv(&self) -> String {
        csv_string(|w| {
            w.write_record(["class", "gt", "predicted", "tp", "precision", "recall", "f1", "mean_iou"])?;
            for (class, c) in &self.per_class {
                w.write_record([
                    class.clone(),
                    c.gt.to_string(),
                    c.predicted.to_string(),
                    c.true_positives.to_string(),
                    c.precision.to_string(),
                    c.recall.to_string(),
                    c.f1.to_string(),
                    opt(c.mean_iou),
                ])?;
            }
            Ok(())
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableStructureScores {
    pub row_match: bool,
    pub col_match: bool,
    pub exact_shape: bool,
    pub row_abs_err: usize,
    pub col_abs_err: usize,
    pub cell_cer: f64,
}

pub fn table_structure_eval(pred: &TableEntity, gt: &TableEntity) -> TableStructureScores {
    let row_match = pred.n_rows == gt.n_rows;
    let col_match = pred.n_cols == gt.n_cols;
    TableStructureScores {
        row_match,
        col_match,
        exact_shape: row_match && col_match,
        row_abs_err: pred.n_rows.abs_diff(gt.n_rows),
        col_abs_err: pred.n_cols.abs_diff(gt.n_cols),
        cell_cer: cer(&structural_signature(pred).1, &structural_signature(gt).1),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TablePair {
    pub id: String,
    pub pred: TableEntity,
    pub gt: TableEntity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableSample {
    pub id: String,
    #[serde(flatten)]
    pub scores: TableStructureScores,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableStructureReport {
    pub n: usize,
    pub row_accuracy: f64,
    pub col_accuracy: f64,
    pub shape_accuracy: f64,
    pub mean_row_abs_err: f64,
    pub mean_col_abs_err: f64,
    pub mean_cell_cer: f64,
    pub samples: Vec<TableSample>,
}

pub fn table_structure_report(pairs: &[TablePair]) -> Result<TableStructureReport> {
    if pairs.is_empty() {
        return Err(RavError::EvalInput("no table pairs".into()));
    }
    let samples: Vec<TableSample> = pairs
        .iter()
        .map(|p| TableSample {
            id: p.id.clone(),
            scores: table_structure_eval(&p.pred, &p.gt),
        })
        .collect();
    let n = samples.len() as f64;
    let frac = |f: fn(&TableStructureScores) -> bool| samples.iter().filter(|s| f(&s.scores)).count() as f64 / n;
    let mean = |f: fn(&TableStructureScores) -> f64| samples.iter().map(|s| f(&s.scores)).sum::<f64>() / n;
    Ok(TableStructureReport {
        n: samples.len(),
        row_accuracy: frac(|s| s.row_match),
        col_accuracy: frac(|s| s.col_match),
        shape_accuracy: frac(|s| s.exact_shape),
        mean_row_abs_err: mean(|s| s.row_abs_err as f64),
        mean_col_abs_err: mean(|s| s.col_abs_err as f64),
        mean_cell_cer: mean(|s| s.cell_cer),
        samples,
    })
}

impl TableStructureReport {
    pub fn to_csv(&self) -> String {
        csv_string(|w| {
            w.write_record(["id", "row_match", "col_match", "exact_shape", "row_abs_err", "col_abs_err", "cell_cer"])?;
            for s in &self.samples {
                let c = &s.scores;
                w.write_record([
                    s.id.clone(),
                    c.row_match.to_string(),
                    c.col_match.to_string(),
                    c.exact_shape.to_string(),
                    c.row_abs_err.to_string(),
                    c.col_abs_err.to_string(),
                    c.cell_cer.to_string(),
                ])?;
            }
            Ok(())
        })
    }
}

/// One scored extraction with its ground-truth cell error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReliabilitySample {
    pub fidelity: f64,
    pub cell_cer: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub tau: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityReport {
    pub n: usize,
    pub positives: usize,
    pub correctness_cutoff: f64,
    pub spearman: Spearman,
    pub pearson: f64,
    pub optimal_tau: f64,
    pub f1_at_optimal: f64,
    pub precision: f64,
    pub recall: f64,
    pub pr_curve: Vec<PrPoint>,
}

/// Gate precision/recall when accepting `fidelity >= tau`. With nothing
/// accepted, precision is taken as 1.
pub fn gate_pr(samples: &[ReliabilitySample], labels: &[bool], tau: f64) -> PrPoint {
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for (s, &correct) in samples.iter().zip(labels) {
        match (s.fidelity >= tau, correct) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            (false, false) => {}
        }
    }
    let precision = if tp + fp == 0 { 1.0 } else { tp as f64 / (tp + fp) as f64 };
    let recall = ratio(tp, tp + fneg);
    PrPoint {
        tau,
        precision,
        recall,
        f1: if tp == 0 { 0.0 } else { f1_of(precision, recall) },
    }
}

/// Correlation between fidelity and `-cell_cer`, plus the threshold sweep
/// over {0.00, 0.01, ..., 1.00}. The best F1 wins; ties go to the lower tau.
pub fn fidelity_reliability(samples: &[ReliabilitySample], correctness_cutoff: f64) -> Result<ReliabilityReport> {
    if samples.len() < MIN_RELIABILITY_SAMPLES {
        return Err(RavError::EvalInput(format!(
            "reliability needs at least {MIN_RELIABILITY_SAMPLES} samples, got {}",
            samples.len()
        )));
    }
    let fid: Vec<f64> = samples.iter().map(|s| s.fidelity).collect();
    let quality: Vec<f64> = samples.iter().map(|s| -s.cell_cer).collect();
    let spearman = spearman_rho(&fid, &quality)?;
    let pearson = pearson_r(&fid, &quality)?;
    let labels: Vec<bool> = samples.iter().map(|s| s.cell_cer <= correctness_cutoff).collect();
    let pr_curve: Vec<PrPoint> = (0..=TAU_STEPS)
        .map(|i| gate_pr(samples, &labels, i as f64 / TAU_STEPS as f64))
        .collect();
    let best = pr_curve
        .iter()
        .fold(None::<&PrPoint>, |acc, p| match acc {
            Some(b) if b.f1 >= p.f1 => Some(b),
            _ => Some(p),
        })
        .expect("sweep is non-empty");
    Ok(ReliabilityReport {
        n: samples.len(),
        positives: labels.iter().filter(|&&l| l).count(),
        correctness_cutoff,
        spearman,
        pearson,
        optimal_tau: best.tau,
        f1_at_optimal: best.f1,
        precision: best.precision,
        recall: best.recall,
        pr_curve,
    })
}

impl ReliabilityReport {
    pub fn pr_curve_csv(&self) -> String {
        csv_string(|w| {
            w.write_record(["tau", "precision", "recall", "f1"])?;
            for p in &self.pr_curve {
                w.write_record([
                    format!("{:.2}", p.tau),
                    p.precision.to_string(),
                    p.recall.to_string(),
                    p.f1.to_string(),
                ])?;
            }
            Ok(())
        })
    }

    pub fn to_csv(&self) -> String {
        csv_string(|w| {
            w.write_record(["n", "spearman", "p_value", "pearson", "optimal_tau", "f1", "precision", "recall"])?;
            w.write_record([
                self.n.to_string(),
                self.spearman.rho.to_string(),
                self.spearman.p_two_sided.to_string(),
                self.pearson.to_string(),
                format!("{:.2}", self.optimal_tau),
                self.f1_at_optimal.to_string(),
                self.precision.to_string(),
                self.recall.to_string(),
            ])?;
            Ok(())
        })
    }
}

/// Reads `fidelity,cell_cer` rows (header required).
pub fn read_reliability_csv(text: &str) -> Result<Vec<ReliabilitySample>> {
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| RavError::EvalInput(format!("reliability csv: {e}")))?
        .clone();
    if !(headers.iter().any(|h| h == "fidelity") && headers.iter().any(|h| h == "cell_cer")) {
        return Err(RavError::EvalInput("reliability csv needs fidelity and cell_cer columns".into()));
    }
    reader
        .deserialize::<ReliabilitySample>()
        .map(|r| r.map_err(|e| RavError::EvalInput(format!("reliability csv: {e}"))))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryStats {
    pub failed_n: usize,
    pub recovered_n: usize,
    /// Absent when nothing failed.
    pub rate: Option<f64>,
    pub mean_delta_fidelity: Option<f64>,
    pub mean_fidelity_recovered: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryReport {
    #[serde(flatten)]
    pub overall: RecoveryStats,
    pub per_type: BTreeMap<String, RecoveryStats>,
}

fn recovery_stats<'a>(traces: impl Iterator<Item = &'a ValidationTrace>) -> RecoveryStats {
    let failed: Vec<&ValidationTrace> = traces.filter(|t| !t.primary.fidelity.passed).collect();
    let recovered: Vec<&ValidationTrace> = failed
        .iter()
        .copied()
        .filter(|t| t.fallback.as_ref().is_some_and(|fb| fb.fidelity.passed))
        .collect();
    let n = failed.len();
    let delta = |t: &&ValidationTrace| {
        t.fallback
            .as_ref()
            .map_or(0.0, |fb| fb.fidelity.score - t.primary.fidelity.score)
    };
    RecoveryStats {
        failed_n: n,
        recovered_n: recovered.len(),
        rate: (n > 0).then(|| recovered.len() as f64 / n as f64),
        mean_delta_fidelity: (n > 0).then(|| failed.iter().map(delta).sum::<f64>() / n as f64),
        mean_fidelity_recovered: (!recovered.is_empty()).then(|| {
            recovered
                .iter()
                .map(|t| t.fallback.as_ref().expect("recovered has fallback").fidelity.score)
                .sum::<f64>()
                / recovered.len() as f64
        }),
    }
}

/// Failed means the primary pass missed its threshold; recovered means the
/// fallback pass met it. Delta is fallback minus primary (0 without a
/// fallback), averaged over failures.
pub fn recovery_rate(traces: &[ValidationTrace]) -> RecoveryReport {
    let per_type = EntityType::ALL
        .into_iter()
        .filter(|t| traces.iter().any(|tr| tr.entity_type == *t))
        .map(|t| {
            (
                t.as_str().to_string(),
                recovery_stats(traces.iter().filter(|tr| tr.entity_type == t)),
            )
        })
        .collect();
    RecoveryReport {
        overall: recovery_stats(traces.iter()),
        per_type,
    }
}

impl RecoveryReport {
    pub fn to_csv(&self) -> String {
        csv_string(|w| {
            w.write_record(["scope", "failed_n", "recovered_n", "rate", "mean_delta_fidelity", "mean_fidelity_recovered"])?;
            let rows = std::iter::once(("all".to_string(), &self.overall))
                .chain(self.per_type.iter().map(|(k, v)| (k.clone(), v)));
            for (scope, s) in rows {
                w.write_record([
                    scope,
                    s.failed_n.to_string(),
                    s.recovered_n.to_string(),
                    opt(s.rate),
                    opt(s.mean_delta_fidelity),
                    opt(s.mean_fidelity_recovered),
                ])?;
            }
            Ok(())
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Answer {
    pub question_id: String,
    pub predicted: String,
    pub golds: Vec<String>,
    #[serde(default)]
    pub pipeline_error: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeScores {
    pub n: usize,
    pub anls: f64,
    pub answerable_rate: f64,
    pub error_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionDelta {
    pub question_id: String,
    pub full: f64,
    pub no_rav: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadToHead {
    pub wins: usize,
    pub losses: usize,
    pub ties: usize,
    pub questions: Vec<QuestionDelta>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub per_mode: BTreeMap<AblationMode, ModeScores>,
    /// Full against no_rav, when both modes are present.
    pub full_vs_no_rav: Option<HeadToHead>,
}

fn answer_score(a: &Answer) -> f64 {
    if a.pipeline_error {
        0.0
    } else {
        anls(&a.predicted, &a.golds, ANLS_TAU)
    }
}

/// ANLS, answerable rate and error rate per mode, plus question-level
/// wins and losses of full over no_rav. Every mode must cover the same
/// question ids.
pub fn ablation_report(
    answers: &BTreeMap<AblationMode, Vec<Answer>>,
    unanswerable_marker: &str,
) -> Result<AblationReport> {
    let mut expected: Option<BTreeSet<&str>> = None;
    for (mode, list) in answers {
        let ids: BTreeSet<&str> = list.iter().map(|a| a.question_id.as_str()).collect();
        if ids.len() != list.len() {
            return Err(RavError::EvalInput(format!("mode {mode} repeats a question id")));
        }
        match &expected {
            None => expected = Some(ids),
            Some(e) if *e != ids => {
                return Err(RavError::EvalInput(format!("mode {mode} covers a different question set")))
            }
            Some(_) => {}
        }
    }
    if answers.is_empty() || expected.as_ref().is_some_and(BTreeSet::is_empty) {
        return Err(RavError::EvalInput("no answers".into()));
    }
    let marker = unanswerable_marker.trim().to_lowercase();
    let per_mode = answers
        .iter()
        .map(|(mode, list)| {
            let n = list.len() as f64;
            let answerable = list
                .iter()
                .filter(|a| {
                    let p = a.predicted.trim().to_lowercase();
                    !a.pipeline_error && !p.is_empty() && p != marker
                })
                .count();
            (
                *mode,
                ModeScores {
                    n: list.len(),
                    anls: list.iter().map(answer_score).sum::<f64>() / n,
                    answerable_rate: answerable as f64 / n,
                    error_rate: list.iter().filter(|a| a.pipeline_error).count() as f64 / n,
                },
            )
        })
        .collect();
    let full_vs_no_rav = match (answers.get(&AblationMode::Full), answers.get(&AblationMode::NoRav)) {
        (Some(full), Some(base)) => {
            let base_by_id: BTreeMap<&str, &Answer> = base.iter().map(|a| (a.question_id.as_str(), a)).collect();
            let mut questions: Vec<QuestionDelta> = full
                .iter()
                .map(|a| {
                    let f = answer_score(a);
                    let b = answer_score(base_by_id[a.question_id.as_str()]);
                    QuestionDelta {
                        question_id: a.question_id.clone(),
                        full: f,
                        no_rav: b,
                        delta: f - b,
                    }
                })
                .collect();
            questions.sort_by(|a, b| a.question_id.cmp(&b.question_id));
            Some(HeadToHead {
                wins: questions.iter().filter(|q| q.delta > 0.0).count(),
                losses: questions.iter().filter(|q| q.delta < 0.0).count(),
                ties: questions.iter().filter(|q| q.delta == 0.0).count(),
                questions,
            })
        }
        _ => None,
    };
    Ok(AblationReport {
        per_mode,
        full_vs_no_rav,
    })
}

impl AblationReport {
    pub fn to_csv(&self) -> String {
        csv_string(|w| {
            w.write_record(["mode", "n", "anls", "answerable_rate", "error_rate"])?;
            for (mode, s) in &self.per_mode {
                w.write_record([
                    mode.to_string(),
                    s.n.to_string(),
                    s.anls.to_string(),
                    s.answerable_rate.to_string(),
                    s.error_rate.to_string(),
                ])?;
            }
            Ok(())
        })
    }
}
