mod common;

use common::brute_topk;
use mal_core::geometry::BBox;
use mal_core::mal::select_anchors;
use mal_core::matching::*;
use proptest::prelude::*;

fn arb_box(extent: f64) -> impl Strategy<Value = BBox> {
    (0.0..extent, 0.0..extent, 1.0..extent / 2.0, 1.0..extent / 2.0)
        .prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h).unwrap())
}

fn arb_scene() -> impl Strategy<Value = (Vec<BBox>, Vec<BBox>)> {
    (prop::collection::vec(arb_box(40.0), 1..60), prop::collection::vec(arb_box(40.0), 0..5))
}

proptest! {
    #[test]
    fn baseline_labels_respect_thresholds((anchors, gts) in arb_scene()) {
        let a = assign_baseline(&anchors, &gts, 0.5, 0.4).unwrap();
        prop_assert_eq!(a.labels.len(), anchors.len());
        for (i, l) in a.labels.iter().enumerate() {
            let best = gts.iter().map(|g| g.iou(&anchors[i])).fold(0.0, f64::max);
            match l {
                AnchorLabel::Negative => prop_assert!(best < 0.4),
                AnchorLabel::Ignore => prop_assert!((0.4..0.5).contains(&best)),
                AnchorLabel::Positive(o) => prop_assert!(*o < gts.len() && anchors[i].iou(&gts[*o]) > 0.0),
            }
        }
        // every object overlapping some anchor owns at least one positive unless a later object took it
        if let Some(last) = gts.len().checked_sub(1) {
            if anchors.iter().any(|x| x.iou(&gts[last]) > 0.0) {
                prop_assert!(a.positives().any(|(_, o)| o == last));
            }
        }
    }

    #[test]
    fn bags_are_top_k_by_iou((anchors, gts) in arb_scene(), k in 1usize..20) {
        let bags = build_bags(&anchors, &gts, k).unwrap();
        prop_assert_eq!(bags.len(), gts.len());
        for b in &bags {
            let g = &gts[b.object_index];
            let overlapping = anchors.iter().filter(|x| x.iou(g) > 0.0).count();
            prop_assert_eq!(b.len(), k.min(overlapping));
            prop_assert!(b.ious.windows(2).all(|w| w[0] >= w[1]));
            let kth = b.ious.last().copied().unwrap_or(0.0);
            for (i, x) in anchors.iter().enumerate() {
                if !b.anchor_indices.contains(&i) {
                    prop_assert!(x.iou(g) <= kth);
                }
            }
        }
    }

    #[test]
    fn mal_negatives_avoid_bag_positives((anchors, gts) in arb_scene(), k in 1usize..20) {
        let neg = mal_negatives(&anchors, &gts, 0.4);
        let bags = build_bags(&anchors, &gts, k).unwrap();
        for b in &bags {
            for (a, v) in b.anchor_indices.iter().zip(&b.ious) {
                if *v >= 0.5 {
                    prop_assert!(!neg.contains(a));
                }
            }
        }
        prop_assert!(neg.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn selection_equals_brute_force(conf in prop::collection::vec(prop::sample::select(vec![0.0, 0.25, 0.5, 0.75, 1.0]), 1..50), frac in 0.0..1.0f64) {
        let n = conf.len();
        let bag = AnchorBag {
            object_index: 0,
            anchor_indices: (100..100 + n).collect(),
            ious: vec![0.5; n],
        };
        let count = ((n as f64 * frac) as usize).max(1);
        let got = select_anchors(&bag, &conf, count).unwrap();
        let want: Vec<usize> = brute_topk(&conf, count).into_iter().map(|j| 100 + j).collect();
        prop_assert_eq!(got, want);
    }
}
