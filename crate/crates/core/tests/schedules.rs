use mal_core::mal::*;
use mal_core::model::{FeatureLevel, FeatureMap};
use proptest::prelude::*;

fn schedule(variant: DepressionVariant) -> DepressionSchedule {
    DepressionSchedule { variant, ..Default::default() }
}

fn arb_level() -> impl Strategy<Value = FeatureLevel> {
    (1usize..5, 1usize..7, 1usize..7).prop_flat_map(|(c, h, w)| {
        prop::collection::vec(0.0..2.0f64, c * h * w).prop_map(move |values| FeatureLevel {
            channels: c,
            height: h,
            width: w,
            values,
        })
    })
}

proptest! {
    #[test]
    fn selection_count_monotone(bag in 1usize..200, a in 0.0..=1.0f64, b in 0.0..=1.0f64) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let n_lo = selection_count(lo, bag).unwrap();
        let n_hi = selection_count(hi, bag).unwrap();
        prop_assert!(n_hi <= n_lo);
        prop_assert!((1..=bag).contains(&n_hi));
    }

    #[test]
    fn depression_fraction_in_unit_range(lambda in 0.0..=1.0f64, peak in 0.0..=1.0f64, steps in 1usize..10) {
        for v in [DepressionVariant::None, DepressionVariant::Constant, DepressionVariant::Step, DepressionVariant::SymmetricStep] {
            let s = DepressionSchedule { variant: v, peak_fraction: peak, step_count: steps };
            let f = depression_fraction(lambda, &s).unwrap();
            prop_assert!((0.0..=peak).contains(&f));
        }
    }

    #[test]
    fn depress_identities(level in arb_level(), fraction in 0.0..=1.0f64) {
        let m = attention_map(&level);
        let keep = protected_positions(&m, fraction);
        let n = level.cells();
        prop_assert_eq!(keep.len(), ((fraction * n as f64) - 1e-9).ceil().max(0.0) as usize);
        let v = depress(&level, &m, fraction).unwrap();
        for c in 0..level.channels {
            for p in 0..n {
                let u = level.values[c * n + p];
                let want = if keep.contains(&p) { u } else { (1.0 + m[p]) * u };
                prop_assert_eq!(v.values[c * n + p], want);
            }
        }
        // protected set holds the largest attention values
        if let (Some(&min_kept), false) = (keep.iter().map(|&p| &m[p]).min_by(|a, b| a.total_cmp(b)), keep.is_empty()) {
            for p in (0..n).filter(|p| !keep.contains(p)) {
                prop_assert!(m[p] <= min_kept);
            }
        }
    }

    #[test]
    fn attention_is_weighted_channel_sum(level in arb_level()) {
        let m = attention_map(&level);
        let n = level.cells();
        for p in 0..n {
            let want: f64 = (0..level.channels)
                .map(|c| {
                    let ch = &level.values[c * n..(c + 1) * n];
                    ch.iter().sum::<f64>() / n as f64 * ch[p]
                })
                .sum();
            prop_assert!((m[p] - want).abs() <= 1e-12 * (1.0 + want.abs()));
        }
    }
}

#[test]
fn endpoints_on_fine_grid() {
    for i in 0..=1000 {
        let l = i as f64 / 1000.0;
        assert_eq!(depression_fraction(l, &schedule(DepressionVariant::Constant)).unwrap(), 0.5);
        assert_eq!(depression_fraction(l, &schedule(DepressionVariant::None)).unwrap(), 0.0);
    }
    assert_eq!(selection_count(0.0, 50).unwrap(), 50);
    for n in 1..300 {
        assert_eq!(selection_count(1.0, n).unwrap(), 1);
    }
    let sym = schedule(DepressionVariant::SymmetricStep);
    assert_eq!(depression_fraction(0.0, &sym).unwrap(), 0.0);
    assert_eq!(depression_fraction(1.0, &sym).unwrap(), 0.0);
    assert_eq!(depression_fraction(0.5, &sym).unwrap(), 0.5);
    assert!(selection_count(1.5, 10).is_err());
    assert!(depression_fraction(-0.1, &sym).is_err());
}

#[test]
fn depress_features_touches_every_level() {
    let lvl = |v: f64| FeatureLevel { channels: 1, height: 2, width: 2, values: vec![v, 0.0, 0.0, 0.0] };
    let u = FeatureMap { levels: vec![lvl(1.0), lvl(2.0)] };
    let v = depress_features(&u, 0.0).unwrap();
    // M = mean * U: 0.25 at the hot cell of level 0, 1.0 at level 1
    assert_eq!(v.levels[0].values[0], 1.25);
    assert_eq!(v.levels[1].values[0], 4.0);
    assert_eq!(depress_features(&u, 1.0).unwrap(), u);
}
