use fedseg::metrics::{
    auc, bce, cosine_similarity, dice, rmse, scd, ssim, ConfusionCounts, MetricsConfig, MetricsReport,
    METRICS_COLUMNS,
};
use fedseg::{rng, Error};
use fedseg_oracles::{auc_pairs, ssim_direct};
use proptest::prelude::*;
use rand::Rng;

const TOL: f64 = 1e-9;

#[test]
fn dice_examples() {
    let ones = [1.0f64; 10];
    assert!((dice(&ones, &ones, 1e-6).unwrap() - 20.0 / (20.0 + 1e-6)).abs() < TOL);
    assert_eq!(dice(&[1.0, 0.0], &[0.0, 1.0], 1e-6).unwrap(), 0.0);
    let d = dice(&[1.0, 1.0, 0.0, 0.0], &[1.0, 0.0, 0.0, 0.0], 0.0).unwrap();
    assert!((d - 2.0 / 3.0).abs() < TOL);
    assert!(dice(&[1.0], &[1.0, 0.0], 0.0).is_err());
}

#[test]
fn cosine_examples() {
    assert!((cosine_similarity(&[0.3, 2.0], &[0.3, 2.0]).unwrap().unwrap() - 1.0).abs() < TOL);
    assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), Some(0.0));
    let c = cosine_similarity(&[1.0, 1.0], &[1.0, 0.0]).unwrap().unwrap();
    assert!((c - std::f64::consts::FRAC_1_SQRT_2).abs() < TOL);
    assert_eq!(cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]).unwrap(), None);

    let a = [1.0, 1.0];
    let b = [1.0, 0.0];
    let z = [0.0, 0.0];
    let s = scd([(&a[..], &b[..]), (&a[..], &a[..]), (&z[..], &a[..])]).unwrap();
    assert_eq!(s.pairs, 3);
    assert_eq!(s.zero_vectors, 1);
    assert!((s.scd - (1.0 - std::f64::consts::FRAC_1_SQRT_2 + 0.0 + 1.0)).abs() < TOL);
}

#[test]
fn bce_examples() {
    assert!((bce(&[1.0], &[1.0 - 1e-7]).unwrap() - 1e-7).abs() < 1e-12);
    assert!((bce(&[1.0], &[0.5]).unwrap() - std::f64::consts::LN_2).abs() < TOL);
    assert!((bce(&[0.0], &[0.5]).unwrap() - std::f64::consts::LN_2).abs() < TOL);
    assert!(bce(&[1.0], &[0.0]).unwrap().is_finite());
}

#[test]
fn confusion_examples() {
    let c = ConfusionCounts {
        tp: 3,
        fp: 1,
        fn_: 2,
        tn: 4,
    };
    assert!((c.iou().value - 0.5).abs() < TOL);
    assert!((c.accuracy().value - 0.7).abs() < TOL);
    assert!((c.recall().value - 0.6).abs() < TOL);
    assert!((c.precision().value - 0.75).abs() < TOL);
    assert!((c.f1().value - 2.0 / 3.0).abs() < TOL);

    let t = [1.0, 0.0, 1.0, 0.0];
    let same = ConfusionCounts::from_threshold(&t, &t, 0.5).unwrap();
    assert_eq!(same.accuracy().value, 1.0);
    assert_eq!(same.f1().value, 1.0);

    let neg = ConfusionCounts::from_threshold(&[0.0; 4], &[0.1; 4], 0.5).unwrap();
    assert_eq!((neg.tp, neg.fp, neg.fn_, neg.tn), (0, 0, 0, 4));
    for r in [neg.recall(), neg.precision(), neg.f1(), neg.iou()] {
        assert!(r.degenerate);
        assert_eq!(r.value, 0.0);
    }
}

#[test]
fn rmse_examples() {
    assert_eq!(rmse(&[0.2, 0.4], &[0.2, 0.4]).unwrap(), 0.0);
    assert!((rmse(&[0.0, 0.0], &[3.0, 4.0]).unwrap() - 12.5f64.sqrt()).abs() < TOL);
    assert_eq!(rmse(&[0.1, 0.9], &[0.5, 0.2]).unwrap(), rmse(&[0.5, 0.2], &[0.1, 0.9]).unwrap());
}

#[test]
fn ssim_examples() {
    let cfg = MetricsConfig::default();
    let mut r = rng::stream(1);
    let x: Vec<f64> = (0..16 * 16).map(|_| r.random()).collect();
    assert_eq!(ssim(&x, &x, 16, 16, 1, &cfg).unwrap(), 1.0);

    let a = vec![0.3; 64];
    let b = vec![0.8; 64];
    assert!(ssim(&a, &b, 8, 8, 1, &cfg).unwrap() < 1.0);

    for trial in 0..10 {
        let mut r = rng::stream(100 + trial);
        let x: Vec<f64> = (0..256).map(|_| r.random()).collect();
        let y: Vec<f64> = (0..256).map(|_| r.random()).collect();
        let got = ssim(&x, &y, 16, 16, 1, &cfg).unwrap();
        let want = ssim_direct(&x, &y, 16, 16, 7, cfg.ssim_c1, cfg.ssim_c2);
        assert!((got - want).abs() < TOL, "{got} vs {want}");
        assert!((got - ssim(&y, &x, 16, 16, 1, &cfg).unwrap()).abs() < TOL);
    }
    // Smaller than the window: one global window.
    let x: Vec<f64> = (0..25).map(|i| (i % 7) as f64 / 7.0).collect();
    let y: Vec<f64> = (0..25).map(|i| (i % 5) as f64 / 5.0).collect();
    let got = ssim(&x, &y, 5, 5, 1, &cfg).unwrap();
    assert!((got - ssim_direct(&x, &y, 5, 5, 7, cfg.ssim_c1, cfg.ssim_c2)).abs() < TOL);
}

#[test]
fn auc_examples() {
    let labels = [true, true, false, false];
    assert_eq!(auc(&[0.9, 0.8, 0.2, 0.1], &labels).unwrap(), 1.0);
    assert_eq!(auc(&[0.1, 0.2, 0.8, 0.9], &labels).unwrap(), 0.0);
    assert_eq!(auc(&[0.5; 4], &labels).unwrap(), 0.5);
    assert!(matches!(
        auc(&[0.5, 0.6], &[true, true]),
        Err(Error::SingleClass { missing: "negative" })
    ));
    assert!(matches!(
        auc(&[0.5, 0.6], &[false, false]),
        Err(Error::SingleClass { missing: "positive" })
    ));
}

#[test]
fn auc_matches_pair_counting_on_fuzzed_instances() {
    for trial in 0..100 {
        let mut r = rng::stream(1000 + trial);
        let mut labels: Vec<bool> = (0..100).map(|_| r.random()).collect();
        labels[0] = true;
        labels[1] = false;
        // Coarse scores force ties.
        let scores: Vec<f64> = (0..100).map(|_| (r.random_range(0..20) as f64) / 20.0).collect();
        let got = auc(&scores, &labels).unwrap();
        assert!((got - auc_pairs(&scores, &labels)).abs() < TOL);
        let shifted: Vec<f64> = scores.iter().map(|s| s + 3.0).collect();
        assert!((auc(&shifted, &labels).unwrap() - got).abs() < TOL);
    }
}

#[test]
fn f1_equals_dice_and_iou_bounded_on_binary_masks() {
    for trial in 0..1000 {
        let mut r = rng::stream(5000 + trial);
        let n = r.random_range(1..200);
        let p_t = r.random::<f64>();
        let p_p = r.random::<f64>();
        let t: Vec<f64> = (0..n).map(|_| if r.random_bool(p_t) { 1.0 } else { 0.0 }).collect();
        let p: Vec<f64> = (0..n).map(|_| if r.random_bool(p_p) { 1.0 } else { 0.0 }).collect();
        let c = ConfusionCounts::from_threshold(&t, &p, 0.5).unwrap();
        let d = dice(&t, &p, 0.0).unwrap();
        let d = if d.is_nan() { 0.0 } else { d };
        assert!((c.f1().value - d).abs() < TOL, "trial {trial}: {} vs {d}", c.f1().value);
        assert!(c.iou().value <= d + TOL);
        assert_eq!(dice(&t, &p, 1e-6).unwrap(), dice(&p, &t, 1e-6).unwrap());
    }
}

fn report_for(truth: &[Vec<f32>], pred: &[Vec<f32>], h: usize, w: usize) -> MetricsReport {
    let t: Vec<&[f32]> = truth.iter().map(|v| v.as_slice()).collect();
    let p: Vec<&[f32]> = pred.iter().map(|v| v.as_slice()).collect();
    MetricsReport::from_predictions(&t, &p, (h, w, 3), &MetricsConfig::default()).unwrap()
}

fn random_mask(seed: u64, len: usize) -> Vec<f32> {
    let mut r = rng::stream(seed);
    (0..len).map(|_| if r.random_bool(0.3) { 1.0 } else { 0.0 }).collect()
}

#[test]
fn oracle_predictions_score_perfectly() {
    let truth: Vec<Vec<f32>> = (0..3).map(|s| random_mask(s, 8 * 8 * 3)).collect();
    let r = report_for(&truth, &truth, 8, 8);
    assert!((r.dice - 1.0).abs() < 1e-6);
    assert_eq!(r.rmse, 0.0);
    assert_eq!(r.auc, 1.0);
    assert_eq!(r.samples, 3);
    assert!(r.scd.abs() < 1e-9);
}

#[test]
fn constant_half_prediction() {
    let truth: Vec<Vec<f32>> = (0..3).map(|s| random_mask(10 + s, 8 * 8 * 3)).collect();
    let pred = vec![vec![0.5f32; 8 * 8 * 3]; 3];
    let r = report_for(&truth, &pred, 8, 8);
    assert!((r.bce - std::f64::consts::LN_2).abs() < 1e-9);
    assert_eq!(r.auc, 0.5);
}

#[test]
fn schema_columns() {
    assert_eq!(
        METRICS_COLUMNS[..14],
        [
            "dice",
            "bce",
            "bce_dice",
            "iou",
            "rmse",
            "ssim",
            "cosine_similarity",
            "scd",
            "accuracy",
            "recall",
            "precision",
            "f1",
            "auc",
            "samples"
        ]
    );
}

#[test]
fn csv_output() {
    let dir = tempfile::tempdir().unwrap();
    let truth: Vec<Vec<f32>> = (0..2).map(|s| random_mask(20 + s, 8 * 8 * 3)).collect();
    let r = report_for(&truth, &truth, 8, 8);
    let path = dir.path().join("m.csv");
    fedseg::metrics::write_metrics_csv(&path, &[("a".into(), "test".into(), r)]).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert!(lines[0].starts_with('#'));
    assert_eq!(lines[1].split(',').count(), 2 + METRICS_COLUMNS.len());
    assert_eq!(lines.len(), 3);
}

proptest! {
    #[test]
    fn report_ranges(seed in 0u64..10_000, n in 1usize..4) {
        let mut r = rng::stream(seed);
        let truth: Vec<Vec<f32>> = (0..n).map(|_| {
            let mut m: Vec<f32> = (0..8 * 8 * 3).map(|_| if r.random_bool(0.3) { 1.0 } else { 0.0 }).collect();
            m[0] = 1.0;
            m[1] = 0.0;
            m
        }).collect();
        let pred: Vec<Vec<f32>> = (0..n).map(|_| (0..8 * 8 * 3).map(|_| r.random::<f32>()).collect()).collect();
        let rep = report_for(&truth, &pred, 8, 8);
        for v in [rep.dice, rep.iou, rep.accuracy, rep.recall, rep.precision, rep.f1, rep.auc, rep.dice_per_image, rep.iou_per_image] {
            prop_assert!((0.0..=1.0).contains(&v), "{rep:?}");
        }
        prop_assert!((-1.0..=1.0).contains(&rep.ssim));
        prop_assert!(rep.rmse >= 0.0 && rep.bce >= 0.0 && rep.scd >= 0.0);
        prop_assert!(rep.iou <= rep.dice + 1e-9);
    }
}
