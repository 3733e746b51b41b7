use fedseg::aggregators::{
    adaptive_clip_update, aggregate_dp, aggregate_mean, clip, flatten_norm, Aggregator, AggregatorSpec,
};
use fedseg::federation::ClientUpdate;
use fedseg::weights::ModelWeights;
use fedseg::{rng, Tensor};
use rand::Rng;
use rand_distr::{Distribution, LogNormal};

fn weights(parts: &[(&str, Vec<f32>)]) -> ModelWeights {
    let mut w = ModelWeights::new();
    for (n, v) in parts {
        w.push(*n, Tensor::new([v.len()], v.clone()).unwrap()).unwrap();
    }
    w
}

fn update(id: usize, parts: &[(&str, Vec<f32>)]) -> ClientUpdate {
    ClientUpdate {
        client_id: id,
        delta: weights(parts),
        num_examples: 1,
    }
}

fn random_update(id: usize, seed: u64, scale: f32) -> ClientUpdate {
    let mut r = rng::stream(seed);
    update(
        id,
        &[
            ("a", (0..7).map(|_| r.random_range(-scale..scale)).collect()),
            ("b", (0..5).map(|_| r.random_range(-scale..scale)).collect()),
        ],
    )
}

#[test]
fn norm_examples() {
    assert_eq!(flatten_norm(&weights(&[("a", vec![0.0; 4])])), 0.0);
    assert_eq!(flatten_norm(&weights(&[("a", vec![3.0]), ("b", vec![4.0])])), 5.0);
    assert_eq!(
        flatten_norm(&weights(&[("b", vec![4.0]), ("a", vec![3.0])])),
        flatten_norm(&weights(&[("a", vec![3.0]), ("b", vec![4.0])]))
    );
}

#[test]
fn clip_examples() {
    let small = update(0, &[("a", vec![0.0, 2.0])]);
    assert_eq!(clip(&small, 5.0), small);
    let big = update(0, &[("a", vec![6.0, 8.0])]);
    let c = clip(&big, 5.0);
    assert_eq!(c.delta.tensor(0).data(), &[3.0, 4.0]);
    assert!((flatten_norm(&c.delta) - 5.0).abs() < 1e-6);
    let zero = update(0, &[("a", vec![0.0, 0.0])]);
    assert_eq!(clip(&zero, 5.0), zero);
    for seed in 0..50 {
        let u = random_update(0, seed, 3.0);
        let once = clip(&u, 1.0);
        assert_eq!(clip(&once, 1.0), once, "seed {seed}");
    }
}

#[test]
fn mean_examples() {
    let m = aggregate_mean(&[update(0, &[("a", vec![1.0, 3.0])]), update(1, &[("a", vec![3.0, 5.0])])], false).unwrap();
    assert_eq!(m.tensor(0).data(), &[2.0, 4.0]);

    let u = random_update(0, 1, 1.0);
    let same: Vec<ClientUpdate> = (0..5).map(|id| ClientUpdate { client_id: id, ..u.clone() }).collect();
    assert_eq!(aggregate_mean(&same, false).unwrap(), u.delta);

    let mut a = update(0, &[("a", vec![0.0])]);
    let mut b = update(1, &[("a", vec![4.0])]);
    a.num_examples = 1;
    b.num_examples = 3;
    assert_eq!(aggregate_mean(&[a, b], true).unwrap().tensor(0).data(), &[3.0]);

    let mismatch = [update(0, &[("a", vec![1.0])]), update(1, &[("a", vec![1.0, 2.0])])];
    assert!(aggregate_mean(&mismatch, false).is_err());
    assert!(aggregate_mean(&[], false).is_err());
}

#[test]
fn mean_is_permutation_invariant() {
    let us: Vec<ClientUpdate> = (0..6).map(|i| random_update(i, 10 + i as u64, 1.0)).collect();
    let base = aggregate_mean(&us, false).unwrap();
    let mut rev = us.clone();
    rev.reverse();
    assert_eq!(aggregate_mean(&rev, false).unwrap(), base);
    rev.swap(1, 4);
    assert_eq!(aggregate_mean(&rev, false).unwrap(), base);
}

#[test]
fn dp_without_noise_equals_mean_bit_for_bit() {
    let us: Vec<ClientUpdate> = (0..4).map(|i| random_update(i, 20 + i as u64, 2.0)).collect();
    let mut r = rng::stream(0);
    assert_eq!(
        aggregate_dp(&us, f64::INFINITY, 0.0, &mut r).unwrap(),
        aggregate_mean(&us, false).unwrap()
    );
    let max = us.iter().map(|u| flatten_norm(&u.delta)).fold(0.0, f64::max);
    assert_eq!(aggregate_dp(&us, max, 0.0, &mut r).unwrap(), aggregate_mean(&us, false).unwrap());
}

#[test]
fn dp_clip_then_mean() {
    let u = update(0, &[("a", vec![6.0, 8.0])]);
    let mut r = rng::stream(0);
    let d = aggregate_dp(&[u], 5.0, 0.0, &mut r).unwrap();
    assert!((flatten_norm(&d) - 5.0).abs() < 1e-6);
}

#[test]
fn dp_noise_scale() {
    let k = 4;
    let us: Vec<ClientUpdate> = (0..k)
        .map(|i| ClientUpdate {
            client_id: i,
            delta: weights(&[("a", vec![0.0; 10_000])]),
            num_examples: 1,
        })
        .collect();
    let clip_norm = 2.0;
    let mut r = rng::stream(3);
    let d = aggregate_dp(&us, clip_norm, 1.0, &mut r).unwrap();
    let v = d.tensor(0).data();
    let mean = v.iter().map(|&x| x as f64).sum::<f64>() / v.len() as f64;
    let std = (v.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / v.len() as f64).sqrt();
    let want = clip_norm / k as f64;
    assert!((std / want - 1.0).abs() < 0.05, "{std} vs {want}");
}

#[test]
fn identical_clients_collapse_under_every_aggregator() {
    let u = random_update(0, 5, 0.01);
    let one = [u.clone()];
    let many: Vec<ClientUpdate> = (0..4).map(|id| ClientUpdate { client_id: id, ..u.clone() }).collect();
    let specs = [
        AggregatorSpec::Mean { weighted: false },
        AggregatorSpec::Mean { weighted: true },
        AggregatorSpec::Dp {
            clip_norm: 1e9,
            noise_multiplier: 0.0,
            seed: 0,
        },
    ];
    for spec in specs {
        let a = Aggregator::new(spec.clone()).unwrap().aggregate(&one).unwrap().delta;
        let b = Aggregator::new(spec.clone()).unwrap().aggregate(&many).unwrap().delta;
        assert_eq!(a, b, "{spec:?}");
        assert_eq!(a, u.delta);
    }
}

#[test]
fn adaptive_rule_examples() {
    let c = adaptive_clip_update(2.0, 1.0, 0.5, 0.2);
    assert!((c - 2.0 * (-0.1f64).exp()).abs() < 1e-12);
    assert_eq!(adaptive_clip_update(2.0, 0.5, 0.5, 0.2), 2.0);

    let mut agg = Aggregator::new(AggregatorSpec::AdaptiveQuantile {
        initial_clip: 10.0,
        target_quantile: 0.5,
        learning_rate: 0.2,
        noise_multiplier: 0.0,
        seed: 0,
    })
    .unwrap();
    let us: Vec<ClientUpdate> = (0..4).map(|i| update(i, &[("a", vec![0.01 * i as f32])])).collect();
    let out = agg.aggregate(&us).unwrap();
    assert_eq!(out.clip_norm, Some(10.0));
    assert_eq!(out.clipped_fraction, 0.0);
    assert!((agg.clip_norm().unwrap() - 10.0 * (-0.1f64).exp()).abs() < 1e-12);
}

#[test]
fn adaptive_clip_tracks_target_quantile() {
    let gamma = 0.5;
    let mut agg = Aggregator::new(AggregatorSpec::AdaptiveQuantile {
        initial_clip: 0.1,
        target_quantile: gamma,
        learning_rate: 0.2,
        noise_multiplier: 0.0,
        seed: 0,
    })
    .unwrap();
    let dist = LogNormal::new(0.0, 0.5).unwrap();
    let mut r = rng::stream(77);
    let mut fractions = Vec::new();
    for _ in 0..200 {
        let us: Vec<ClientUpdate> = (0..100)
            .map(|i| update(i, &[("a", vec![dist.sample(&mut r) as f32])]))
            .collect();
        let out = agg.aggregate(&us).unwrap();
        fractions.push(out.clipped_fraction);
        assert!(agg.clip_norm().unwrap() > 0.0);
    }
    let tail = &fractions[150..];
    let running = tail.iter().sum::<f64>() / tail.len() as f64;
    assert!((running - (1.0 - gamma)).abs() <= 0.05, "{running}");
    // The median of the norm distribution is 1.
    assert!((agg.clip_norm().unwrap() - 1.0).abs() < 0.2, "{:?}", agg.clip_norm());
}

#[test]
fn spec_validation_and_serde() {
    assert!(Aggregator::new(AggregatorSpec::Dp {
        clip_norm: 0.0,
        noise_multiplier: 1.0,
        seed: 0
    })
    .is_err());
    assert!(Aggregator::new(AggregatorSpec::AdaptiveQuantile {
        initial_clip: 0.1,
        target_quantile: 1.0,
        learning_rate: 0.2,
        noise_multiplier: 0.0,
        seed: 0
    })
    .is_err());
    let spec: AggregatorSpec = serde_json::from_str(r#"{"kind":"dp"}"#).unwrap();
    assert_eq!(spec, AggregatorSpec::dp());
    let spec: AggregatorSpec = serde_json::from_str(r#"{"kind":"adaptive_quantile"}"#).unwrap();
    assert_eq!(spec, AggregatorSpec::adaptive());
}

#[test]
fn aggregated_layout_matches_input() {
    let us: Vec<ClientUpdate> = (0..3).map(|i| random_update(i, 40 + i as u64, 1.0)).collect();
    for spec in [AggregatorSpec::default(), AggregatorSpec::dp(), AggregatorSpec::adaptive()] {
        let d = Aggregator::new(spec).unwrap().aggregate(&us).unwrap().delta;
        us[0].delta.check_layout(&d).unwrap();
    }
}
