//! Average precision against the threshold-enumeration reference.

use mks_core::metrics::{average_precision, class_ap, pr_curve, ScoredPrediction};
use mks_core::reference;
use mks_core::rng::SplitMix64;
use proptest::prelude::*;

/// Random predictions with distinct scores; `positives ≥` labelled positives,
/// the excess modelling ground truths that were never detected.
fn random_set(rng: &mut SplitMix64) -> (Vec<ScoredPrediction>, usize) {
    let n = 1 + rng.below(40) as usize;
    let p_pos = rng.uniform();
    let mut preds: Vec<ScoredPrediction> = (0..n)
        .map(|i| {
            ScoredPrediction::new(
                (i as f64 + rng.uniform_range(0.0, 0.5)) / n as f64,
                rng.uniform() < p_pos,
            )
        })
        .collect();
    rng.shuffle(&mut preds);
    let labelled = preds.iter().filter(|p| p.is_positive).count();
    let positives = labelled.max(1) + rng.below(4) as usize;
    (preds, positives)
}

#[test]
fn matches_reference_on_a_thousand_random_sets() {
    let mut rng = SplitMix64::new(0xa9);
    let mut worst = 0.0f64;
    for i in 0..1000 {
        let (preds, positives) = random_set(&mut rng);
        let ap = class_ap(0, &preds, positives).unwrap().ap;
        let oracle = reference::average_precision(&preds, positives);
        let err = (ap - oracle).abs();
        assert!(err <= 1e-12, "set {i}: {ap} vs {oracle}");
        worst = worst.max(err);
    }
    println!("worst absolute difference: {worst:e}");
}

#[test]
fn hand_example_is_five_sixths() {
    let preds = [
        ScoredPrediction::new(0.9, true),
        ScoredPrediction::new(0.8, false),
        ScoredPrediction::new(0.7, true),
    ];
    let ap = class_ap(0, &preds, 2).unwrap().ap;
    assert!((ap - 0.833333).abs() < 1e-6);
    assert_eq!(format!("{ap:.6}"), "0.833333");
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 128, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn ap_is_a_probability_and_order_invariant(seed in any::<u64>()) {
        let mut rng = SplitMix64::new(seed);
        let (mut preds, positives) = random_set(&mut rng);
        let ap = average_precision(&pr_curve(&preds, positives).unwrap());
        prop_assert!((0.0..=1.0).contains(&ap));
        rng.shuffle(&mut preds);
        let again = average_precision(&pr_curve(&preds, positives).unwrap());
        prop_assert_eq!(ap, again);
    }

    #[test]
    fn recall_is_monotone(seed in any::<u64>()) {
        let mut rng = SplitMix64::new(seed);
        let (preds, positives) = random_set(&mut rng);
        let curve = pr_curve(&preds, positives).unwrap();
        prop_assert!(curve.windows(2).all(|w| w[0].recall <= w[1].recall));
    }
}
