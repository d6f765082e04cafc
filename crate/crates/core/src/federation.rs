//! FedAvg simulation with per-array upload compression and an exact bit ledger.
//!
//! Each round the server broadcasts the full-precision global model to `m`
//! randomly chosen clients. Each of them runs `E` SGD steps on its private shard,
//! compresses every parameter array and uploads it. The server decodes the
//! uploads, filling dropped positions with its own current value, and replaces
//! the global model with their plain mean.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec::{self, CodecError, LayerCompressionSpec};
use crate::data::{ClientPartition, LabeledDataset};
use crate::nn::{ModelParams, ModelSpec, NetError, TrainConfig};
use crate::scalar::Scalar;
use crate::seed::{derive_seed, stream};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FlError {
    #[error("{0}")]
    Argument(String),
    #[error("training failed: {0}")]
    Net(#[from] NetError),
    #[error("compression failed: {0}")]
    Codec(#[from] CodecError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlRunConfig {
    pub n_clients: usize,
    /// Clients selected per round, `m`.
    pub participants: usize,
    /// Local SGD steps between uploads, `E`.
    pub interval: usize,
    pub layers: Vec<LayerCompressionSpec>,
    pub train: TrainConfig,
    pub epochs: usize,
    /// Seed of the initial global model.
    pub init_seed: u64,
}

impl FlRunConfig {
    pub fn validate(&self, spec: &ModelSpec) -> Result<(), FlError> {
        if self.n_clients == 0 {
            return Err(FlError::Argument("need at least one client".into()));
        }
        if !(1..=self.n_clients).contains(&self.participants) {
            return Err(FlError::Argument(format!(
                "participants {} outside [1, {}]",
                self.participants, self.n_clients
            )));
        }
        if self.interval == 0 {
            return Err(FlError::Argument("communication interval must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(FlError::Argument("epoch budget must be at least 1".into()));
        }
        if self.layers.len() != spec.num_arrays() {
            return Err(FlError::Argument(format!(
                "{} compression specs for {} parameter arrays",
                self.layers.len(),
                spec.num_arrays()
            )));
        }
        for l in &self.layers {
            l.validate()?;
        }
        self.train.validate()?;
        Ok(())
    }
}

/// Bits moved over a run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommLedger {
    pub rounds_executed: u64,
    /// Client-to-server bits, including the 64 extrema bits per array.
    pub uplink_bits: u64,
    /// Portion of `uplink_bits` spent on extrema.
    pub extrema_bits: u64,
    /// Server-to-client bits.
    pub downlink_bits: u64,
    /// Rounds an uncompressed, every-step, all-client run would take for the same budget.
    pub baseline_rounds: u64,
    /// Bits such a run moves in each direction.
    pub baseline_bits: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlOutcome<T> {
    pub global_model: ModelParams<T>,
    pub ledger: CommLedger,
    pub accuracy: f64,
    pub correct: u64,
    pub evaluated: u64,
}

/// One line of the per-round trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: u64,
    pub selected: Vec<usize>,
    pub uplink_bits: u64,
    pub downlink_bits: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub global_accuracy: Option<f64>,
}

/// Receives a record after every aggregation.
pub trait RoundObserver {
    /// Whether to spend a test pass per round on `global_accuracy`.
    fn wants_accuracy(&self) -> bool {
        false
    }
    fn on_round(&mut self, record: &RoundRecord);
}

impl RoundObserver for () {
    fn on_round(&mut self, _: &RoundRecord) {}
}

impl RoundObserver for Vec<RoundRecord> {
    fn on_round(&mut self, record: &RoundRecord) {
        self.push(record.clone());
    }
}

/// `m` distinct client indices drawn uniformly, ascending.
pub fn select_clients<R: Rng>(n: usize, m: usize, rng: &mut R) -> Result<Vec<usize>, FlError> {
    if m == 0 || m > n {
        return Err(FlError::Argument(format!(
            "cannot select {m} of {n} clients"
        )));
    }
    let mut picked = rand::seq::index::sample(rng, n, m).into_vec();
    picked.sort_unstable();
    Ok(picked)
}

/// Element-wise arithmetic mean, accumulated in f64 in model order.
pub fn aggregate<T: Scalar>(models: &[ModelParams<T>]) -> Result<ModelParams<T>, FlError> {
    let first = models
        .first()
        .ok_or_else(|| FlError::Argument("nothing to aggregate".into()))?;
    if models.iter().any(|m| m.shapes().ne(first.shapes())) {
        return Err(FlError::Argument("models have different shapes".into()));
    }
    let inv = 1.0 / models.len() as f64;
    let arrays = (0..first.arrays.len())
        .map(|a| {
            (0..first.arrays[a].len())
                .map(|j| {
                    let s: f64 = models.iter().map(|m| m.arrays[a][j].as_f64()).sum();
                    T::of(s * inv)
                })
                .collect()
        })
        .collect();
    Ok(ModelParams { arrays })
}

/// Batches in one pass over a shard of `shard_len` examples.
pub fn batches_per_epoch(shard_len: usize, batch_size: usize) -> usize {
    shard_len.div_ceil(batch_size)
}

/// Number of communication rounds: `ceil(batches_per_epoch * epochs / E)`.
pub fn rounds_for(batches_per_epoch: usize, epochs: usize, interval: usize) -> usize {
    (batches_per_epoch * epochs).div_ceil(interval)
}

/// A client's private shuffled batch order; advances only while it trains.
struct ClientClock {
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl ClientClock {
    fn new(len: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(&mut rng);
        Self {
            order,
            cursor: 0,
            rng,
        }
    }

    fn next_batch(&mut self, batch_size: usize) -> &[usize] {
        if self.cursor >= self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let start = self.cursor;
        self.cursor = (start + batch_size).min(self.order.len());
        &self.order[start..self.cursor]
    }
}

pub fn run_federated_training<T: Scalar>(
    spec: &ModelSpec,
    cfg: &FlRunConfig,
    partition: &ClientPartition,
    test: &LabeledDataset,
    seed: u64,
) -> Result<FlOutcome<T>, FlError> {
    run_federated_training_observed(spec, cfg, partition, test, seed, &mut ())
}

pub fn run_federated_training_observed<T: Scalar>(
    spec: &ModelSpec,
    cfg: &FlRunConfig,
    partition: &ClientPartition,
    test: &LabeledDataset,
    seed: u64,
    observer: &mut dyn RoundObserver,
) -> Result<FlOutcome<T>, FlError> {
    cfg.validate(spec)?;
    if partition.n_clients() != cfg.n_clients {
        return Err(FlError::Argument(format!(
            "partition has {} shards for {} clients",
            partition.n_clients(),
            cfg.n_clients
        )));
    }
    if partition.shards.iter().any(LabeledDataset::is_empty) {
        return Err(FlError::Argument("every client needs a non-empty shard".into()));
    }
    if test.is_empty() {
        return Err(FlError::Argument("test set is empty".into()));
    }

    let shapes = spec.param_shapes();
    let model_bits = codec::full_model_bits(shapes);
    let upload_bits = codec::payload_bits(&cfg.layers, shapes);
    let extrema_per_upload = codec::EXTREMA_BITS * shapes.len() as u64;
    let largest_shard = partition.shards.iter().map(LabeledDataset::count).max().unwrap_or(0);
    let per_epoch = batches_per_epoch(largest_shard, cfg.train.batch_size);
    let rounds = rounds_for(per_epoch, cfg.epochs, cfg.interval);
    let baseline_rounds = (per_epoch * cfg.epochs) as u64;

    let mut ledger = CommLedger {
        baseline_rounds,
        baseline_bits: baseline_rounds * cfg.n_clients as u64 * model_bits,
        ..CommLedger::default()
    };
    let mut global: ModelParams<T> = spec.build_model(cfg.init_seed);
    let mut clocks: Vec<ClientClock> = partition
        .shards
        .iter()
        .enumerate()
        .map(|(k, s)| ClientClock::new(s.count(), derive_seed(seed, &[stream::CLIENT, k as u64])))
        .collect();
    let mut server_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[stream::SELECT]));

    for round in 1..=rounds as u64 {
        let selected = select_clients(cfg.n_clients, cfg.participants, &mut server_rng)?;
        // batch orders are drawn up front so client training can run in any order
        let batches: Vec<Vec<Vec<usize>>> = selected
            .iter()
            .map(|&k| {
                (0..cfg.interval)
                    .map(|_| clocks[k].next_batch(cfg.train.batch_size).to_vec())
                    .collect()
            })
            .collect();

        let uploads: Vec<ModelParams<T>> = selected
            .par_iter()
            .zip(&batches)
            .map(|(&k, steps)| -> Result<ModelParams<T>, FlError> {
                let shard = &partition.shards[k];
                let mut local = global.clone();
                for idx in steps {
                    let x = shard.batch_matrix::<T>(idx);
                    let y: Vec<u8> = idx.iter().map(|&i| shard.labels()[i]).collect();
                    spec.sgd_step(&mut local, x.view(), &y, &cfg.train)?;
                }
                // server side: decode on top of its own copy
                let mut received = global.clone();
                for ((layer, out), &ls) in local.arrays.iter().zip(&mut received.arrays).zip(&cfg.layers) {
                    codec::compress(layer, ls)?.dequantize_into(out)?;
                }
                Ok(received)
            })
            .collect::<Result<_, _>>()?;

        global = aggregate(&uploads)?;
        let m = selected.len() as u64;
        ledger.rounds_executed = round;
        ledger.uplink_bits += m * upload_bits;
        ledger.extrema_bits += m * extrema_per_upload;
        ledger.downlink_bits += m * model_bits;

        let global_accuracy = if observer.wants_accuracy() {
            Some(spec.evaluate_accuracy(&global, test)?)
        } else {
            None
        };
        observer.on_round(&RoundRecord {
            round,
            selected,
            uplink_bits: m * upload_bits,
            downlink_bits: m * model_bits,
            global_accuracy,
        });
    }

    let correct = spec.count_correct(&global, test)? as u64;
    let evaluated = test.count() as u64;
    Ok(FlOutcome {
        global_model: global,
        ledger,
        accuracy: correct as f64 / evaluated as f64,
        correct,
        evaluated,
    })
}
