use std::collections::HashMap;

use fedseg::aggregators::{Aggregator, AggregatorSpec};
use fedseg::dataset::{generate_synthetic, stack, ImageSample};
use fedseg::federation::{
    client_pipeline, local_train, make_clients, partition_indices, run_round, run_training, ClientState, FLConfig,
};
use fedseg::metrics::MetricsConfig;
use fedseg::tensor::AdamConfig;
use fedseg::unet::{Trainer, UNetConfig, UNetModel};
use fedseg::{rng, Error};
use fedseg_oracles::chi_square_uniform;
use rand::Rng;

#[test]
fn partition_sizes() {
    let p = partition_indices(11_472, 4, 0).unwrap();
    assert!(p.iter().all(|c| c.len() == 2_868));
    let sizes: Vec<usize> = partition_indices(10, 3, 1).unwrap().iter().map(Vec::len).collect();
    assert_eq!(sizes, [4, 3, 3]);
    let one = partition_indices(7, 1, 2).unwrap();
    assert_eq!(one.len(), 1);
    let mut all = one[0].clone();
    all.sort();
    assert_eq!(all, (0..7).collect::<Vec<_>>());
    assert!(partition_indices(3, 4, 0).is_err());
    assert!(partition_indices(0, 1, 0).is_err());
}

#[test]
fn partitions_disjoint_and_exhaustive() {
    let mut r = rng::stream(99);
    for _ in 0..100 {
        let n = r.random_range(1..500);
        let k = r.random_range(1..=n.min(16));
        let seed = r.random();
        let parts = partition_indices(n, k, seed).unwrap();
        assert_eq!(parts.len(), k);
        let mut seen = vec![false; n];
        for p in &parts {
            assert!(p.len() == n / k || p.len() == n / k + 1);
            for &i in p {
                assert!(!seen[i], "duplicate {i}");
                seen[i] = true;
            }
        }
        assert!(seen.iter().all(|&s| s));
        assert_eq!(parts, partition_indices(n, k, seed).unwrap());
    }
}

#[test]
fn pipeline_batching() {
    let mut r = rng::stream(0);
    let b = client_pipeline(5, 2, 2, 4, &mut r);
    assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), [2, 2, 2, 2, 2]);
    let b = client_pipeline(5, 1, 2, 4, &mut r);
    assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), [2, 2, 1]);
    let flat: Vec<usize> = client_pipeline(5, 2, 3, 1, &mut r).concat();
    assert_eq!(flat, [0, 1, 2, 3, 4, 0, 1, 2, 3, 4]);
    assert!(client_pipeline(5, 0, 2, 4, &mut r).is_empty());
}

#[test]
fn full_buffer_shuffle_is_uniform() {
    let mut counts: HashMap<Vec<usize>, usize> = HashMap::new();
    let trials = 1000;
    for t in 0..trials {
        let mut r = rng::stream(10_000 + t);
        let b = client_pipeline(4, 1, 4, 4, &mut r);
        *counts.entry(b[0].clone()).or_default() += 1;
    }
    assert_eq!(counts.len(), 24);
    let p = 1.0 / 24.0;
    let expect = trials as f64 * p;
    let sigma = (trials as f64 * p * (1.0 - p)).sqrt();
    for (perm, &c) in &counts {
        assert!((c as f64 - expect).abs() <= 3.0 * sigma, "{perm:?}: {c}");
    }
    let table: Vec<usize> = counts.values().copied().collect();
    // 23 degrees of freedom; 99.9th percentile is about 49.7.
    assert!(chi_square_uniform(&table) < 49.7);
}

fn tiny_model() -> UNetModel {
    UNetModel::build(&UNetConfig {
        input_h: 16,
        input_w: 16,
        ..UNetConfig::desk()
    })
    .unwrap()
}

fn client(id: usize, seed: u64, samples: Vec<ImageSample>) -> ClientState {
    ClientState {
        client_id: id,
        seed,
        train: samples,
        validation: vec![],
    }
}

fn fl(local_epochs: usize) -> FLConfig {
    FLConfig {
        num_clients: 1,
        rounds: 1,
        local_epochs,
        batch_size: 4,
        shuffle_buffer: 8,
        log_wall_time: false,
        ..FLConfig::default()
    }
}

#[test]
fn zero_epochs_give_zero_delta() {
    let model = tiny_model();
    let c = client(0, 1, generate_synthetic(4, 16, 16, 1).unwrap());
    let r = local_train(&c, &model, &fl(0), 1, &MetricsConfig::default()).unwrap();
    assert!(r.update.delta.iter().all(|(_, t)| t.data().iter().all(|&v| v == 0.0)));
    assert_eq!(r.update.num_examples, 4);
}

#[test]
fn zero_learning_rate_leaves_trainable_weights() {
    let model = tiny_model();
    let before = model.weights().clone();
    let c = client(0, 1, generate_synthetic(4, 16, 16, 1).unwrap());
    let cfg = FLConfig {
        optimizer: AdamConfig {
            learning_rate: 0.0,
            ..AdamConfig::default()
        },
        ..fl(1)
    };
    let r = local_train(&c, &model, &cfg, 1, &MetricsConfig::default()).unwrap();
    for &i in model.trainable_indices() {
        assert!(r.update.delta.tensor(i).data().iter().all(|&v| v == 0.0), "{}", r.update.delta.name(i));
    }
    // Moving statistics are not governed by the learning rate.
    let moved = r.update.delta.get("batch_normalization/moving_mean").unwrap();
    assert!(moved.data().iter().any(|&v| v != 0.0));
    assert_eq!(model.weights(), &before);
}

#[test]
fn single_step_matches_centralized_step() {
    let model = tiny_model();
    let samples = generate_synthetic(4, 16, 16, 2).unwrap();
    let c = client(0, 55, samples.clone());
    let cfg = fl(1);
    let r = local_train(&c, &model, &cfg, 3, &MetricsConfig::default()).unwrap();
    assert_eq!(r.log.losses.len(), 1);

    let mut rng = rng::stream_at(55, &[3]);
    let batches = client_pipeline(4, 1, 4, 8, &mut rng);
    let (x, y) = stack(batches[0].iter().map(|&i| &samples[i])).unwrap();
    let mut t = Trainer::new(model.clone(), cfg.optimizer);
    let out = t.step(x, &y, &mut rng).unwrap();
    assert_eq!(out.loss, r.log.losses[0]);

    let mut applied = model.weights().clone();
    applied.add_assign(&r.update.delta).unwrap();
    for ((name, a), (_, b)) in applied.iter().zip(t.model().weights().iter()) {
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() <= 1e-6 * (1.0 + y.abs()), "{name}: {x} vs {y}");
        }
    }
}

#[test]
fn non_finite_input_is_a_divergence() {
    let model = tiny_model();
    let mut samples = generate_synthetic(4, 16, 16, 3).unwrap();
    samples[2].image.data_mut()[5] = f32::NAN;
    let c = client(7, 1, samples);
    match local_train(&c, &model, &fl(1), 1, &MetricsConfig::default()) {
        Err(Error::Divergence { client_id: 7, .. }) => {}
        other => panic!("{other:?}"),
    }
}

#[test]
fn identical_clients_equal_one_client() {
    let model = tiny_model();
    let samples = generate_synthetic(6, 16, 16, 4).unwrap();
    let cfg = fl(1);
    let mcfg = MetricsConfig::default();
    let single = [client(0, 9, samples.clone())];
    let many: Vec<ClientState> = (0..3).map(|id| client(id, 9, samples.clone())).collect();
    let mut agg1 = Aggregator::new(AggregatorSpec::default()).unwrap();
    let mut agg3 = Aggregator::new(AggregatorSpec::default()).unwrap();
    let a = run_round(&single, &model, &mut agg1, &cfg, 1, &mcfg).unwrap();
    let b = run_round(&many, &model, &mut agg3, &cfg, 1, &mcfg).unwrap();
    assert_eq!(a.global.weights(), b.global.weights());
}

#[test]
fn round_is_independent_of_worker_count() {
    let model = tiny_model();
    let samples = generate_synthetic(12, 16, 16, 5).unwrap();
    let clients: Vec<ClientState> = samples.chunks(3).enumerate().map(|(i, c)| client(i, i as u64, c.to_vec())).collect();
    let mcfg = MetricsConfig::default();
    let run = |workers| {
        let cfg = FLConfig {
            workers: Some(workers),
            ..fl(1)
        };
        let mut agg = Aggregator::new(AggregatorSpec::default()).unwrap();
        run_round(&clients, &model, &mut agg, &cfg, 1, &mcfg).unwrap()
    };
    let a = run(1);
    let b = run(4);
    assert_eq!(a.global.weights(), b.global.weights());
    // Only updates cross the client boundary: deltas in the global layout plus counts.
    assert_eq!(a.updates.iter().map(|u| u.client_id).collect::<Vec<_>>(), [0, 1, 2, 3]);
    for u in &a.updates {
        model.weights().check_layout(&u.delta).unwrap();
    }
    assert_eq!(a.updates.iter().map(|u| u.num_examples).sum::<usize>(), 12);
}

#[test]
fn diverging_client_fails_the_round() {
    let model = tiny_model();
    let mut bad = generate_synthetic(4, 16, 16, 6).unwrap();
    bad[0].image.data_mut()[0] = f32::INFINITY;
    let clients = [client(0, 0, generate_synthetic(4, 16, 16, 7).unwrap()), client(1, 0, bad)];
    let mut agg = Aggregator::new(AggregatorSpec::default()).unwrap();
    let r = run_round(&clients, &model, &mut agg, &fl(1), 1, &MetricsConfig::default());
    assert!(matches!(r, Err(Error::Divergence { client_id: 1, .. })));
}

#[test]
fn validation_split_reports_client_metrics() {
    let train = generate_synthetic(16, 16, 16, 8).unwrap();
    let cfg = FLConfig {
        num_clients: 2,
        validation_fraction: 0.25,
        ..fl(1)
    };
    let clients = make_clients(&train, &cfg).unwrap();
    assert!(clients.iter().all(|c| c.train.len() == 6 && c.validation.len() == 2));
    let r = local_train(&clients[0], &tiny_model(), &cfg, 1, &MetricsConfig::default()).unwrap();
    assert!(r.log.validation.is_some());
}

#[test]
fn zero_rounds_return_initial_model() {
    let model = tiny_model();
    let train = generate_synthetic(8, 16, 16, 9).unwrap();
    let test = generate_synthetic(2, 16, 16, 10).unwrap();
    let cfg = FLConfig {
        rounds: 0,
        num_clients: 2,
        ..fl(1)
    };
    let out = run_training(&cfg, model.clone(), &train, &test, &MetricsConfig::default(), None).unwrap();
    assert_eq!(out.model.weights(), model.weights());
    assert!(out.logs.is_empty());
    assert_eq!(out.report.samples, 2);
}

#[test]
fn training_log_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let train = generate_synthetic(16, 16, 16, 11).unwrap();
    let test = generate_synthetic(4, 16, 16, 12).unwrap();
    let cfg = FLConfig {
        rounds: 2,
        num_clients: 2,
        ..fl(1)
    };
    let run = |name: &str| {
        let p = dir.path().join(name);
        let out = run_training(&cfg, tiny_model(), &train, &test, &MetricsConfig::default(), Some(&p)).unwrap();
        (std::fs::read(&p).unwrap(), out)
    };
    let (a, out) = run("a.csv");
    let (b, _) = run("b.csv");
    assert_eq!(a, b);
    let text = String::from_utf8(a).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "round,client_id,loss,accuracy,auc,recall,precision,dice,iou,wall_ms");
    assert_eq!(lines.len(), 1 + 2 * 3);
    assert!(lines[3].starts_with("1,global,"));
    assert_eq!(out.logs.len(), 2);
}
