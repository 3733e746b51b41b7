//! Local training, rounds and the training loop.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use super::{client_pipeline, make_clients, ClientState, ClientUpdate, FLConfig};
use crate::aggregators::{Aggregate, Aggregator};
use crate::dataset::{stack, ImageSample};
use crate::error::{Error, Result};
use crate::fsio;
use crate::metrics::{evaluate, MetricsConfig, MetricsReport};
use crate::rng;
use crate::unet::{LossValue, Trainer, UNetModel};

/// Training trace of one client in one round.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientLog {
    pub client_id: usize,
    /// One entry per optimizer step.
    pub losses: Vec<LossValue>,
    /// Metrics of the locally trained model on the client's held-out samples.
    pub validation: Option<MetricsReport>,
    pub wall_ms: u64,
}

impl ClientLog {
    pub fn mean_loss(&self) -> Option<f64> {
        if self.losses.is_empty() {
            None
        } else {
            Some(self.losses.iter().map(|l| l.total).sum::<f64>() / self.losses.len() as f64)
        }
    }
}

#[derive(Clone, Debug)]
pub struct LocalResult {
    pub update: ClientUpdate,
    pub log: ClientLog,
}

fn elapsed_ms(t: Instant) -> u64 {
    t.elapsed().as_millis() as u64
}

/// Trains a copy of `global` on the client's batch stream for `round` and
/// returns the weight delta. `global` is not modified.
pub fn local_train(
    client: &ClientState,
    global: &UNetModel,
    config: &FLConfig,
    round: usize,
    metrics: &MetricsConfig,
) -> Result<LocalResult> {
    let start = Instant::now();
    let mut rng = rng::stream_at(client.seed, &[round as u64]);
    let batches = client_pipeline(
        client.train.len(),
        config.local_epochs,
        config.batch_size,
        config.shuffle_buffer,
        &mut rng,
    );
    let mut trainer = Trainer::new(global.clone(), config.optimizer);
    let mut losses = Vec::with_capacity(batches.len());
    for (step, batch) in batches.iter().enumerate() {
        let (x, y) = stack(batch.iter().map(|&i| &client.train[i]))?;
        let diverged = |loss: f64| Error::Divergence {
            client_id: client.client_id,
            step,
            loss,
        };
        let out = match trainer.step(x, &y, &mut rng) {
            Ok(o) => o,
            Err(Error::NonFinite { .. }) => return Err(diverged(f64::NAN)),
            Err(e) => return Err(e),
        };
        if !out.loss.total.is_finite() {
            return Err(diverged(out.loss.total));
        }
        losses.push(out.loss);
    }
    let local = trainer.into_model();
    let validation = if client.validation.is_empty() {
        None
    } else {
        Some(evaluate(&local, &client.validation, metrics)?)
    };
    let delta = local.weights().sub(global.weights())?;
    Ok(LocalResult {
        update: ClientUpdate {
            client_id: client.client_id,
            delta,
            num_examples: client.train.len(),
        },
        log: ClientLog {
            client_id: client.client_id,
            losses,
            validation,
            wall_ms: elapsed_ms(start),
        },
    })
}

#[derive(Clone, Debug)]
pub struct RoundOutput {
    pub global: UNetModel,
    /// Updates in ascending client id order.
    pub updates: Vec<ClientUpdate>,
    pub clients: Vec<ClientLog>,
    pub aggregate: Aggregate,
}

/// Broadcast, train every client (up to `config.workers` at a time),
/// aggregate in client id order and apply the combined delta.
pub fn run_round(
    clients: &[ClientState],
    global: &UNetModel,
    aggregator: &mut Aggregator,
    config: &FLConfig,
    round: usize,
    metrics: &MetricsConfig,
) -> Result<RoundOutput> {
    if clients.is_empty() {
        return Err(Error::Config("a round needs at least one client".into()));
    }
    let workers = config.workers.unwrap_or(clients.len()).clamp(1, clients.len());
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<LocalResult>>>> = Mutex::new((0..clients.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= clients.len() {
                    break;
                }
                let r = local_train(&clients[i], global, config, round, metrics);
                results.lock().expect("results lock")[i] = Some(r);
            });
        }
    });
    let mut done: Vec<LocalResult> = Vec::with_capacity(clients.len());
    for r in results.into_inner().expect("results lock") {
        done.push(r.expect("every client ran")?);
    }
    done.sort_by_key(|r| r.update.client_id);
    let (updates, logs): (Vec<ClientUpdate>, Vec<ClientLog>) = done.into_iter().map(|r| (r.update, r.log)).unzip();

    let aggregate = aggregator.aggregate(&updates)?;
    let mut weights = global.weights().clone();
    weights.add_assign(&aggregate.delta)?;
    for i in 0..weights.len() {
        if weights.name(i).ends_with("/moving_variance") {
            for v in weights.tensor_mut(i).data_mut() {
                *v = v.max(0.0);
            }
        }
    }
    if !weights.is_finite() {
        return Err(Error::NonFinite { op: "aggregated weights" });
    }
    Ok(RoundOutput {
        global: global.with_weights(weights)?,
        updates,
        clients: logs,
        aggregate,
    })
}

/// One completed round: client traces and the global model's test metrics.
#[derive(Clone, Debug)]
pub struct RoundLog {
    pub round: usize,
    pub clients: Vec<ClientLog>,
    pub global: MetricsReport,
    pub clip_norm: Option<f64>,
    pub wall_ms: u64,
}

pub const ROUND_LOG_COLUMNS: [&str; 10] = [
    "round",
    "client_id",
    "loss",
    "accuracy",
    "auc",
    "recall",
    "precision",
    "dice",
    "iou",
    "wall_ms",
];

fn metric_cells(r: Option<&MetricsReport>) -> [String; 6] {
    match r {
        Some(r) => [r.accuracy, r.auc, r.recall, r.precision, r.dice, r.iou].map(|v| v.to_string()),
        None => Default::default(),
    }
}

/// Writes the round log CSV. Client rows carry the mean training loss and,
/// when clients hold validation samples, their validation metrics; the
/// `global` row carries the test-split `bce_dice` and metrics.
pub fn write_round_log(path: &Path, logs: &[RoundLog], wall_time: bool) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(ROUND_LOG_COLUMNS)?;
    let ms = |v: u64| if wall_time { v.to_string() } else { "0".into() };
    for log in logs {
        for c in &log.clients {
            let mut rec = vec![
                log.round.to_string(),
                c.client_id.to_string(),
                c.mean_loss().map(|l| l.to_string()).unwrap_or_default(),
            ];
            rec.extend(metric_cells(c.validation.as_ref()));
            rec.push(ms(c.wall_ms));
            w.write_record(&rec)?;
        }
        let mut rec = vec![log.round.to_string(), "global".into(), log.global.bce_dice.to_string()];
        rec.extend(metric_cells(Some(&log.global)));
        rec.push(ms(log.wall_ms));
        w.write_record(&rec)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::io(path, e.into_error()))?;
    fsio::write_atomic(path, &bytes)
}

#[derive(Clone, Debug)]
pub struct TrainingOutcome {
    pub model: UNetModel,
    pub logs: Vec<RoundLog>,
    /// Test metrics of the final model.
    pub report: MetricsReport,
}

/// Partitions `train` across clients and runs `config.rounds` rounds,
/// evaluating the global model on `test` after each. When `log_path` is
/// given the round log is rewritten after every round, so a failed round
/// leaves the completed ones on disk.
pub fn run_training(
    config: &FLConfig,
    model: UNetModel,
    train: &[ImageSample],
    test: &[ImageSample],
    metrics: &MetricsConfig,
    log_path: Option<&Path>,
) -> Result<TrainingOutcome> {
    config.validate()?;
    metrics.validate()?;
    if test.is_empty() {
        return Err(Error::Config("the test split is empty".into()));
    }
    let clients = make_clients(train, config)?;
    let mut aggregator = Aggregator::new(config.aggregator.clone())?;
    let mut model = model;
    let mut logs = Vec::with_capacity(config.rounds);
    let mut report = None;
    for round in 1..=config.rounds {
        let start = Instant::now();
        let out = run_round(&clients, &model, &mut aggregator, config, round, metrics)?;
        model = out.global;
        let global = evaluate(&model, test, metrics)?;
        log::info!(
            "round {round}/{}: test dice {:.4}, bce_dice {:.4}{}",
            config.rounds,
            global.dice,
            global.bce_dice,
            out.aggregate
                .clip_norm
                .map(|c| format!(", clip {c:.4}"))
                .unwrap_or_default()
        );
        logs.push(RoundLog {
            round,
            clients: out.clients,
            global: global.clone(),
            clip_norm: out.aggregate.clip_norm,
            wall_ms: elapsed_ms(start),
        });
        if let Some(p) = log_path {
            write_round_log(p, &logs, config.log_wall_time)?;
        }
        report = Some(global);
    }
    let report = match report {
        Some(r) => r,
        None => {
            if let Some(p) = log_path {
                write_round_log(p, &logs, config.log_wall_time)?;
            }
            evaluate(&model, test, metrics)?
        }
    };
    Ok(TrainingOutcome { model, logs, report })
}
