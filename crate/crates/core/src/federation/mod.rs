//! Simulated federated training: partitioning, client batch streams, local
//! training and round orchestration.
//!
//! Only [`ClientUpdate`] values leave a client: a weight delta, an example
//! count and the client id.

mod round;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use round::{
    local_train, run_round, run_training, write_round_log, ClientLog, LocalResult, RoundLog, RoundOutput,
    TrainingOutcome, ROUND_LOG_COLUMNS,
};

use crate::aggregators::AggregatorSpec;
use crate::dataset::ImageSample;
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::AdamConfig;
use crate::weights::ModelWeights;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FLConfig {
    pub num_clients: usize,
    pub rounds: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub shuffle_buffer: usize,
    pub seed: u64,
    pub aggregator: AggregatorSpec,
    pub optimizer: AdamConfig,
    /// Concurrent client trainings; `None` means one per client.
    pub workers: Option<usize>,
    /// Fraction of each partition held out for per-client validation.
    pub validation_fraction: f64,
    /// Record elapsed milliseconds in the round log. Turn off for
    /// byte-reproducible logs.
    pub log_wall_time: bool,
}

impl Default for FLConfig {
    fn default() -> Self {
        FLConfig {
            num_clients: 4,
            rounds: 15,
            local_epochs: 2,
            batch_size: 16,
            shuffle_buffer: 64,
            seed: 0,
            aggregator: AggregatorSpec::default(),
            optimizer: AdamConfig::default(),
            workers: None,
            validation_fraction: 0.0,
            log_wall_time: true,
        }
    }
}

impl FLConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_clients == 0 {
            return Err(Error::Config("num_clients must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.shuffle_buffer < self.batch_size {
            return Err(Error::Config(format!(
                "shuffle_buffer {} must be at least batch_size {}",
                self.shuffle_buffer, self.batch_size
            )));
        }
        if self.workers == Some(0) {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::Config(format!(
                "validation_fraction {} outside [0, 1)",
                self.validation_fraction
            )));
        }
        let lr = self.optimizer.learning_rate;
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be non-negative, got {lr}")));
        }
        self.aggregator.validate()
    }
}

/// What a client sends back after local training.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientUpdate {
    pub client_id: usize,
    /// Local weights minus the broadcast global weights.
    pub delta: ModelWeights,
    pub num_examples: usize,
}

/// A simulated client: its private samples and its own seed.
#[derive(Clone, Debug)]
pub struct ClientState {
    pub client_id: usize,
    /// Drives shuffling and dropout; combined with the round index.
    pub seed: u64,
    pub train: Vec<ImageSample>,
    pub validation: Vec<ImageSample>,
}

/// Seeded shuffle of `0..n`, cut into `k` contiguous chunks of `⌊n/k⌋`
/// indices, the first `n mod k` chunks taking one extra.
pub fn partition_indices(n: usize, k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if n == 0 {
        return Err(Error::Config("cannot partition an empty dataset".into()));
    }
    if k == 0 || k > n {
        return Err(Error::Config(format!("cannot split {n} samples across {k} clients")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    let mut r = rng::stream_at(seed, &[0x9A87]);
    // Fisher–Yates, written out so the permutation is pinned to this crate.
    for i in (1..n).rev() {
        let j = r.random_range(0..=i);
        idx.swap(i, j);
    }
    let (base, extra) = (n / k, n % k);
    let mut out = Vec::with_capacity(k);
    let mut start = 0;
    for c in 0..k {
        let len = base + usize::from(c < extra);
        out.push(idx[start..start + len].to_vec());
        start += len;
    }
    Ok(out)
}

/// [`partition_indices`] applied to `items`.
pub fn partition<T: Clone>(items: &[T], k: usize, seed: u64) -> Result<Vec<Vec<T>>> {
    Ok(partition_indices(items.len(), k, seed)?
        .into_iter()
        .map(|p| p.into_iter().map(|i| items[i].clone()).collect())
        .collect())
}

/// Builds one client per partition, holding out the last
/// `⌊validation_fraction · len⌋` samples of each for validation. Client
/// seeds derive from `config.seed` and the client id.
pub fn make_clients(train: &[ImageSample], config: &FLConfig) -> Result<Vec<ClientState>> {
    config.validate()?;
    let parts = partition(train, config.num_clients, config.seed)?;
    Ok(parts
        .into_iter()
        .enumerate()
        .map(|(id, mut p)| {
            let hold = (config.validation_fraction * p.len() as f64).floor() as usize;
            let hold = hold.min(p.len().saturating_sub(1));
            let validation = p.split_off(p.len() - hold);
            ClientState {
                client_id: id,
                seed: rng::derive_seed(config.seed, 0xC11E_0000 + id as u64),
                train: p,
                validation,
            }
        })
        .collect())
}

/// Order of one epoch through a shuffle buffer of `buffer` elements: fill
/// the buffer, then repeatedly emit a uniformly chosen slot and refill it
/// from the input.
fn windowed_shuffle<R: Rng + ?Sized>(n: usize, buffer: usize, rng: &mut R) -> Vec<usize> {
    let mut out = Vec::with_capacity(n);
    let mut buf: Vec<usize> = (0..buffer.min(n)).collect();
    let mut next = buf.len();
    while !buf.is_empty() {
        let i = rng.random_range(0..buf.len());
        out.push(buf[i]);
        if next < n {
            buf[i] = next;
            next += 1;
        } else {
            buf.swap_remove(i);
        }
    }
    out
}

/// Index batches for one round of local training over `n` samples: each of
/// `epochs` passes is shuffled through the buffer, passes are concatenated,
/// and the stream is cut into `batch_size` batches with the last one
/// possibly short.
pub fn client_pipeline<R: Rng + ?Sized>(
    n: usize,
    epochs: usize,
    batch_size: usize,
    shuffle_buffer: usize,
    rng: &mut R,
) -> Vec<Vec<usize>> {
    let stream: Vec<usize> = (0..epochs)
        .flat_map(|_| windowed_shuffle(n, shuffle_buffer.max(1), rng))
        .collect();
    stream.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}
