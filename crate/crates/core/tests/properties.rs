use proptest::prelude::*;

use rav_core::evalkit::{fidelity_reliability, iou, ReliabilitySample};
use rav_core::ingest::{containment_ratio, spatial_region_filter, RegionSpec};
use rav_core::metrics::{cer, levenshtein, pearson_r, spearman_rho};
use rav_core::model::{BoundingBox, EntityType, TableEntity};
use rav_core::plugins::{mock_extract_table, CorruptionSpec};
use rav_core::reconstruct::structural_signature;

fn bbox() -> impl Strategy<Value = BoundingBox> {
    (0.0..500.0f64, 0.0..500.0f64, 1.0..200.0f64, 1.0..200.0f64)
        .prop_map(|(x, y, w, h)| BoundingBox::new(x, y, x + w, y + h))
}

fn table() -> impl Strategy<Value = TableEntity> {
    (1usize..6, 1usize..5).prop_flat_map(|(r, c)| {
        (
            prop::collection::vec("[a-z]{0,6}", c),
            prop::collection::vec(prop::collection::vec("[a-z0-9.]{0,8}", c), r),
        )
            .prop_map(|(headers, rows)| TableEntity::from_rows(headers, rows).unwrap())
    })
}

proptest! {
    #[test]
    fn levenshtein_is_a_metric(a in "[abc]{0,12}", b in "[abc]{0,12}", c in "[abc]{0,12}") {
        prop_assert_eq!(levenshtein(&a, &b), levenshtein(&b, &a));
        prop_assert_eq!(levenshtein(&a, &a), 0);
        prop_assert!(levenshtein(&a, &c) <= levenshtein(&a, &b) + levenshtein(&b, &c));
        prop_assert!(levenshtein(&a, &b) <= a.chars().count().max(b.chars().count()));
    }

    #[test]
    fn cer_is_zero_only_for_equal_text(a in "[a-z]{1,20}", b in "[a-z]{1,20}") {
        let e = cer(&a, &b);
        prop_assert!(e >= 0.0);
        prop_assert_eq!(e == 0.0, a == b);
    }

    #[test]
    fn spearman_ignores_monotone_transforms(xs in prop::collection::vec(-50.0..50.0f64, 4..30),
                                           ys in prop::collection::vec(-50.0..50.0f64, 30)) {
        let ys = &ys[..xs.len()];
        if let Ok(base) = spearman_rho(&xs, ys) {
            let warped: Vec<f64> = xs.iter().map(|x| (x / 10.0).exp() + 3.0 * x).collect();
            let moved = spearman_rho(&warped, ys).unwrap();
            prop_assert!((base.rho - moved.rho).abs() < 1e-12);
            prop_assert!((-1.0..=1.0).contains(&base.rho));
        }
        if let Ok(r) = pearson_r(&xs, ys) {
            prop_assert!((-1.0..=1.0).contains(&r));
        }
    }

    #[test]
    fn iou_is_symmetric_and_bounded(a in bbox(), b in bbox()) {
        let (ab, ba) = (iou(&a, &b), iou(&b, &a));
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert!((iou(&a, &a) - 1.0).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&containment_ratio(&a, &b)));
    }

    #[test]
    fn containment_filter_is_idempotent(boxes in prop::collection::vec((bbox(), 0u8..3), 1..25), t in 0.5..1.0f64) {
        let regions: Vec<RegionSpec> = boxes
            .into_iter()
            .enumerate()
            .map(|(i, (b, k))| RegionSpec {
                region_id: format!("r{i}"),
                page_id: "p".into(),
                bbox: b,
                entity_type: [EntityType::Text, EntityType::Table, EntityType::Image][k as usize],
                detector_payload: None,
            })
            .collect();
        let (kept, removed) = spatial_region_filter(&regions, t);
        prop_assert_eq!(kept.len() + removed.len(), regions.len());
        prop_assert!(removed.iter().all(|r| r.entity_type == EntityType::Text));
        let (again, none) = spatial_region_filter(&kept, t);
        prop_assert!(none.is_empty());
        prop_assert_eq!(again, kept);
    }

    #[test]
    fn pr_curve_is_well_formed(pairs in prop::collection::vec((0.0..=1.0f64, 0.0..=1.0f64), 10..60)) {
        let samples: Vec<ReliabilitySample> =
            pairs.iter().map(|&(fidelity, cell_cer)| ReliabilitySample { fidelity, cell_cer }).collect();
        if let Ok(report) = fidelity_reliability(&samples, 0.1) {
            prop_assert_eq!(report.pr_curve.len(), 101);
            for w in report.pr_curve.windows(2) {
                prop_assert!(w[1].recall <= w[0].recall);
            }
            for p in &report.pr_curve {
                prop_assert!((0.0..=1.0).contains(&p.precision) && (0.0..=1.0).contains(&p.recall));
            }
            prop_assert!(report.pr_curve.iter().all(|p| p.f1 <= report.f1_at_optimal));
        }
    }

    #[test]
    fn mock_corruption_is_pure_and_shape_safe(t in table(), eps in 0.0..=1.0f64, seed in any::<u64>(),
                                              pm in 0.0..=1.0f64, pd in 0.0..=1.0f64) {
        let spec = CorruptionSpec { epsilon: eps, p_row_merge: pm, p_col_merge: pm, p_row_drop: pd, crop_jitter_px: 0, seed };
        let a = mock_extract_table(&t, &spec);
        prop_assert_eq!(&a, &mock_extract_table(&t, &spec));
        prop_assert_eq!(a.cells.len(), a.n_rows * a.n_cols);
        prop_assert!(a.n_rows <= t.n_rows && a.n_cols <= t.n_cols);
        let clean = mock_extract_table(&t, &CorruptionSpec { seed, ..CorruptionSpec::default() });
        prop_assert_eq!(structural_signature(&clean), structural_signature(&t));
    }
}
