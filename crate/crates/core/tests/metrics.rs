use mal_core::eval::*;
use mal_core::geometry::{BBox, Detection};
use mal_core::scenes::GroundTruthObject;
use proptest::prelude::*;

fn b(x: f64, y: f64, w: f64, h: f64) -> BBox {
    BBox::new(x, y, x + w, y + h).unwrap()
}

fn arb_image() -> impl Strategy<Value = EvalImage> {
    let gt = prop::collection::vec((0.0..80.0f64, 0.0..80.0f64, 4.0..20.0f64, 4.0..20.0f64, 0usize..2), 1..5);
    let det = prop::collection::vec((0.0..80.0f64, 0.0..80.0f64, 4.0..20.0f64, 4.0..20.0f64, 0usize..2, 0.01..1.0f64), 0..12);
    (gt, det).prop_map(|(g, d)| {
        let ground_truth = g
            .into_iter()
            .map(|(x, y, w, h, c)| GroundTruthObject { bbox: b(x, y, w, h), class_id: c })
            .collect();
        let detections: Vec<Detection> = d
            .into_iter()
            .map(|(x, y, w, h, c, s)| Detection { bbox: b(x, y, w, h), class_id: c, score: s })
            .collect();
        EvalImage { candidates: detections.clone(), detections, ground_truth }
    })
}

proptest! {
    #[test]
    fn ap_invariant_to_monotone_score_transform(images in prop::collection::vec(arb_image(), 1..4)) {
        let warped: Vec<EvalImage> = images
            .iter()
            .map(|im| {
                let f = |d: &Detection| Detection { score: (3.0 * d.score).exp() / 30.0, ..*d };
                EvalImage {
                    detections: im.detections.iter().map(f).collect(),
                    candidates: im.candidates.iter().map(f).collect(),
                    ground_truth: im.ground_truth.clone(),
                }
            })
            .collect();
        let (a, w) = (ap_sweep(&images), ap_sweep(&warped));
        prop_assert_eq!(a.ap, w.ap);
        prop_assert_eq!(a.ap50, w.ap50);
    }

    #[test]
    fn ap_bounded(images in prop::collection::vec(arb_image(), 1..4)) {
        for t in iou_thresholds() {
            if let Some(v) = average_precision(&images, t) {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }
    }

    #[test]
    fn spearman_bounded_and_symmetric(x in prop::collection::vec(-5.0..5.0f64, 2..30)) {
        let y: Vec<f64> = x.iter().map(|v| v * v).collect();
        if let Some(r) = spearman(&x, &y) {
            prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&r));
            prop_assert_eq!(Some(r), spearman(&y, &x));
        }
        let inc: Vec<f64> = x.iter().map(|v| v.exp()).collect();
        if let Some(r) = spearman(&x, &inc) {
            prop_assert!((r - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn perfect_detections_give_full_ap() {
    let gts = vec![
        GroundTruthObject { bbox: b(0.0, 0.0, 10.0, 10.0), class_id: 0 },
        GroundTruthObject { bbox: b(30.0, 30.0, 10.0, 20.0), class_id: 1 },
    ];
    let dets: Vec<Detection> = gts.iter().map(|g| Detection { bbox: g.bbox, class_id: g.class_id, score: 0.9 }).collect();
    let img = EvalImage { candidates: dets.clone(), detections: dets, ground_truth: gts };
    let s = ap_sweep(&[img]);
    assert_eq!(s.ap, Some(1.0));
    assert_eq!(s.ap50, Some(1.0));
}
