mod common;

use nireg::data::LabelVector;
use nireg::metrics::{evaluate, roc_curve};
use nireg::model::{fit, LogisticModel, RegularizerSpec};
use nireg::optim::SolverOptions;
use nireg::preprocess::{fit_pca, DEFAULT_RANK_TOLERANCE};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn auc_equals_pairwise_count(
        scores in prop::collection::vec(0u8..6, 2..80),
        labels in prop::collection::vec(0u8..2, 2..80),
    ) {
        let n = scores.len().min(labels.len());
        let mut y = labels[..n].to_vec();
        y[0] = 0;
        y[1] = 1;
        let s: Vec<f64> = scores[..n].iter().map(|&v| f64::from(v) * 0.25).collect();
        let c = roc_curve(&s, &LabelVector::new(y.clone()).unwrap()).unwrap();
        prop_assert!((c.auc - common::pairwise_auc(&s, &y)).abs() <= 1e-12);
        prop_assert!((c.trapezoid_area() - c.auc).abs() <= 1e-12);
        prop_assert!(c.points.windows(2).all(|w| w[0].0 <= w[1].0 && w[0].1 <= w[1].1));
    }
}

#[test]
fn trained_model_beats_chance_on_its_training_data() {
    let ds = common::logistic_dataset(2, 150, 3);
    let t = fit_pca(&ds.features, DEFAULT_RANK_TOLERANCE).unwrap();
    let pcs = t.apply(&ds.features).unwrap();
    let m = fit(
        &pcs,
        &ds.labels,
        &RegularizerSpec::l2(1.0).unwrap(),
        &SolverOptions::default(),
    )
    .unwrap()
    .with_transform(&t);
    let zero = LogisticModel::new(0.0, vec![0.0; t.k], RegularizerSpec::none());
    let good = evaluate(&m, &t, &ds, "train").unwrap();
    let base = evaluate(&zero, &t, &ds, "train").unwrap();
    assert_eq!(base.auc, 0.5);
    assert!(good.auc >= base.auc);
}

#[test]
fn identical_scores_give_identical_curves() {
    let ds = common::logistic_dataset(3, 100, 3);
    let t = fit_pca(&ds.features, DEFAULT_RANK_TOLERANCE).unwrap();
    let a = LogisticModel::new(0.1, vec![1.0, -0.5, 0.25], RegularizerSpec::none());
    let b = LogisticModel::new(
        0.1,
        vec![1.0, -0.5, 0.25],
        RegularizerSpec::l2(3.0).unwrap(),
    );
    let ra = evaluate(&a, &t, &ds, "x").unwrap();
    let rb = evaluate(&b, &t, &ds, "x").unwrap();
    assert_eq!(ra.curve, rb.curve);
}

#[test]
fn mismatched_transform_rejected() {
    let ds = common::logistic_dataset(4, 50, 3);
    let t = fit_pca(&ds.features, DEFAULT_RANK_TOLERANCE).unwrap();
    let other = fit_pca(
        &common::logistic_dataset(5, 50, 3).features,
        DEFAULT_RANK_TOLERANCE,
    )
    .unwrap();
    let m = LogisticModel::new(0.0, vec![0.0; 3], RegularizerSpec::none()).with_transform(&other);
    assert!(evaluate(&m, &t, &ds, "x").is_err());
}
