//! Fidelity scoring. Every comparator takes the reconstruction on one side
//! and an anchor-derived reference on the other.

use std::collections::BTreeMap;

use crate::config::{ImageWeights, StructureWeights, TableWeights};
use crate::metrics::{cer, phash_similarity, ssim_binarized};
use crate::model::{AnchorCrop, FidelityReport};
use crate::reconstruct::{ImageFeatureSet, TableReconstruction, TableShape, TextReference};

const SHARPNESS_FLOOR: f64 = 1e-6;

/// Graded shape agreement: per-dimension min/max ratio, averaged.
pub fn row_col_match(pred_rows: usize, pred_cols: usize, ref_rows: usize, ref_cols: usize) -> f64 {
    let ratio = |p: usize, r: usize| p.min(r) as f64 / p.max(r).max(1) as f64;
    0.5 * ratio(pred_rows, ref_rows) + 0.5 * ratio(pred_cols, ref_cols)
}

#[derive(Debug, Clone, Copy)]
pub struct TableScoring<'a> {
    pub table: &'a TableWeights,
    pub structure: &'a StructureWeights,
    pub skip_visual: bool,
}

pub fn table_fidelity(
    recon: &TableReconstruction,
    anchor: &AnchorCrop,
    reference_reading: &str,
    ref_shape: Option<TableShape>,
    scoring: TableScoring<'_>,
) -> FidelityReport {
    let mut components = BTreeMap::new();
    let shape_term = match ref_shape {
        Some(s) => row_col_match(recon.signature.n_rows, recon.signature.n_cols, s.n_rows, s.n_cols),
        None => {
            components.insert("shape_unreferenced".to_string(), 1.0);
            1.0
        }
    };
    let cer_cells = cer(&recon.serialized_cells, reference_reading);
    let f_struct = scoring.structure.row_col * shape_term
        + scoring.structure.cells * (1.0 - cer_cells).max(0.0);
    components.insert("row_col_match".to_string(), shape_term);
    components.insert("cer_cells".to_string(), cer_cells);
    components.insert("f_struct".to_string(), f_struct);
    let score = if scoring.skip_visual {
        f_struct
    } else {
        let ssim = ssim_binarized(&recon.rendered, anchor.pixels());
        components.insert("ssim_binarized".to_string(), ssim);
        scoring.table.ssim * ssim + scoring.table.structure * f_struct
    };
    FidelityReport::ungated(score.clamp(0.0, 1.0), components)
}

/// Score for a table that cannot be rendered (zero rows or columns).
pub fn degenerate_table_report() -> FidelityReport {
    FidelityReport::zero("degenerate_table")
}

pub fn image_fidelity(features: &ImageFeatureSet, weights: &ImageWeights) -> FidelityReport {
    let similarity = phash_similarity(features.phash_extracted, features.phash_anchor);
    let ratio = (features.sharp_extracted / features.sharp_anchor.max(SHARPNESS_FLOOR)).min(1.0);
    let ratio = if ratio.is_finite() { ratio.max(0.0) } else { 0.0 };
    let caption = if features.caption_adjacent { 1.0 } else { 0.0 };
    let score = weights.phash * similarity + weights.sharpness * ratio + weights.caption * caption;
    let components = BTreeMap::from([
        ("phash_similarity".to_string(), similarity),
        ("sharpness_ratio".to_string(), ratio),
        ("caption_check".to_string(), caption),
    ]);
    FidelityReport::ungated(score.clamp(0.0, 1.0), components)
}

pub fn text_fidelity(extracted_text: &str, reference: &TextReference) -> FidelityReport {
    let c = cer(extracted_text, &reference.text);
    let components = BTreeMap::from([("cer".to_string(), c)]);
    FidelityReport::ungated((1.0 - c).max(0.0), components)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Weights;
    use crate::metrics::Hash64;
    use crate::model::{BoundingBox, TableEntity};
    use crate::reconstruct::{reconstruct_table, render_table_grid, ReferenceSource};

    fn weights() -> Weights {
        Weights::default()
    }

    fn scoring(w: &Weights, skip_visual: bool) -> TableScoring<'_> {
        TableScoring {
            table: &w.table,
            structure: &w.table_structure,
            skip_visual,
        }
    }

    fn table() -> TableEntity {
        TableEntity::from_rows(
            vec!["Model".into(), "Acc".into()],
            vec![
                vec!["base".into(), "71.2".into()],
                vec!["large".into(), "74.9".into()],
            ],
        )
        .unwrap()
    }

    fn anchor_of(t: &TableEntity) -> AnchorCrop {
        let pixels = render_table_grid(t, 160, 60).unwrap();
        AnchorCrop::new("t".into(), "p".into(), BoundingBox::new(0.0, 0.0, 160.0, 60.0), pixels)
    }

    #[test]
    fn row_col_examples() {
        assert_eq!(row_col_match(8, 7, 8, 7), 1.0);
        let v = row_col_match(16, 4, 26, 4);
        assert!((v - (0.5 * 16.0 / 26.0 + 0.5)).abs() < 1e-12);
        assert!((v - 0.808).abs() < 5e-4);
        assert_eq!(row_col_match(0, 0, 5, 5), 0.0);
        assert_eq!(row_col_match(0, 0, 0, 0), 0.0);
    }

    #[test]
    fn perfect_table_scores_one() {
        let t = table();
        let anchor = anchor_of(&t);
        let recon = reconstruct_table(&t, &anchor).unwrap();
        let w = weights();
        let shape = Some(recon.signature.shape());
        let r = table_fidelity(&recon, &anchor, "Model Acc base 71.2 large 74.9", shape, scoring(&w, false));
        assert!((r.score - 1.0).abs() < 1e-9, "{r:?}");
        assert!(!r.components.contains_key("shape_unreferenced"));
    }

    #[test]
    fn skip_visual_is_f_struct() {
        let t = table();
        let anchor = anchor_of(&t);
        let recon = reconstruct_table(&t, &anchor).unwrap();
        let w = weights();
        let r = table_fidelity(&recon, &anchor, "Model Acc base 71.2 large 75.9", None, scoring(&w, true));
        assert_eq!(r.score, r.components["f_struct"]);
        assert!(!r.components.contains_key("ssim_binarized"));
        assert_eq!(r.components["shape_unreferenced"], 1.0);
    }

    #[test]
    fn hand_arithmetic_case() {
        // ssim 0.5, shape 1, cer 0.5
        let w = weights();
        let f_struct = w.table_structure.row_col * 1.0 + w.table_structure.cells * 0.5;
        let score = w.table.ssim * 0.5 + w.table.structure * f_struct;
        assert!((score - 0.56).abs() < 1e-12);
    }

    #[test]
    fn table_fidelity_monotone_in_cer() {
        let t = table();
        let anchor = anchor_of(&t);
        let recon = reconstruct_table(&t, &anchor).unwrap();
        let w = weights();
        let readings = [
            "Model Acc base 71.2 large 74.9",
            "Model Acc base 71.2 large 7x.x",
            "Mxdel Axx bxse 7x.2 lxrge 7x.x",
            "",
        ];
        let scores: Vec<f64> = readings
            .iter()
            .map(|r| table_fidelity(&recon, &anchor, r, None, scoring(&w, false)).score)
            .collect();
        assert!(scores.windows(2).all(|p| p[0] >= p[1]), "{scores:?}");
    }

    #[test]
    fn image_examples() {
        let w = weights();
        let h = Hash64(0xdead_beef_0000_ffff);
        let mut f = ImageFeatureSet {
            phash_extracted: h,
            phash_anchor: h,
            sharp_extracted: 50.0,
            sharp_anchor: 50.0,
            caption_adjacent: true,
        };
        assert!((image_fidelity(&f, &w.image).score - 1.0).abs() < 1e-12);
        f.caption_adjacent = false;
        assert!((image_fidelity(&f, &w.image).score - 0.9).abs() < 1e-12);
        // 13 differing bits: similarity 51/64 is close to but not 0.8; use exact arithmetic
        f.phash_extracted = Hash64(h.0 ^ 0x1fff);
        f.sharp_extracted = 25.0;
        f.caption_adjacent = true;
        let expect = 0.6 * (51.0 / 64.0) + 0.3 * 0.5 + 0.1;
        assert!((image_fidelity(&f, &w.image).score - expect).abs() < 1e-12);
        let hand: f64 = 0.6 * 0.8 + 0.3 * 0.5 + 0.1 * 1.0;
        assert!((hand - 0.73).abs() < 1e-12);
    }

    #[test]
    fn sharper_extraction_clamps_and_flat_anchor_is_safe() {
        let w = weights();
        let f = ImageFeatureSet {
            phash_extracted: Hash64(0),
            phash_anchor: Hash64(0),
            sharp_extracted: 500.0,
            sharp_anchor: 0.0,
            caption_adjacent: false,
        };
        let r = image_fidelity(&f, &w.image);
        assert_eq!(r.components["sharpness_ratio"], 1.0);
        assert!((r.score - 0.9).abs() < 1e-12);
    }

    #[test]
    fn text_examples() {
        let reference = TextReference {
            text: "Scaling laws".into(),
            source: ReferenceSource::EmbeddedStream,
        };
        assert_eq!(text_fidelity("Scaling laws", &reference).score, 1.0);
        let long = "x".repeat(40);
        assert_eq!(text_fidelity(&long, &reference).score, 0.0);
        let one = text_fidelity("Scaling lawz", &reference);
        assert!((one.score - (1.0 - 1.0 / 12.0)).abs() < 1e-12);
    }

    #[test]
    fn degenerate_report_is_zero() {
        let r = degenerate_table_report();
        assert_eq!(r.score, 0.0);
        assert_eq!(r.components["degenerate_table"], 1.0);
    }
}
