//! The FL configuration problem: genome encoding, the closed-form communication
//! objective and the simulated accuracy objective.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{LayerCompressionSpec, MAX_BITS, MAX_DROP_PERCENT, MIN_BITS};
use crate::data::{ClientPartition, LabeledDataset};
use crate::federation::{self, CommLedger, FlError, FlRunConfig, RoundObserver};
use crate::nn::{ModelSpec, TrainConfig};
use crate::nsga2::{GeneBounds, Objectives, Problem};
use crate::scalar::Scalar;

/// Upper end of the communication-interval range.
pub const DEFAULT_E_MAX: u32 = 1000;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ObjectiveError {
    #[error("{0}")]
    Argument(String),
}

fn arg(msg: impl Into<String>) -> ObjectiveError {
    ObjectiveError::Argument(msg.into())
}

/// `{m, E, mu_1..mu_l, b_1..b_l}`; serialises as that flat integer array.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "Vec<i64>", try_from = "Vec<i64>")]
pub struct Genome {
    pub m: u32,
    pub e: u32,
    pub mu: Vec<u32>,
    pub bits: Vec<u32>,
}

impl Genome {
    /// Every client each step, nothing dropped, full precision.
    pub fn brute_force(n_clients: usize, layers: usize) -> Self {
        Self {
            m: n_clients as u32,
            e: 1,
            mu: vec![0; layers],
            bits: vec![MAX_BITS; layers],
        }
    }

    pub fn layers(&self) -> usize {
        self.mu.len()
    }

    pub fn len(&self) -> usize {
        2 * self.layers() + 2
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn to_genes(&self) -> Vec<i64> {
        let mut g = Vec::with_capacity(self.len());
        g.push(self.m as i64);
        g.push(self.e as i64);
        g.extend(self.mu.iter().map(|&v| v as i64));
        g.extend(self.bits.iter().map(|&v| v as i64));
        g
    }

    /// Checks the layout only (even length of at least 4, values fit `u32`).
    pub fn from_genes(genes: &[i64]) -> Result<Self, ObjectiveError> {
        if genes.len() < 4 || genes.len() % 2 != 0 {
            return Err(arg(format!(
                "genome needs 2*l + 2 entries with l >= 1, got {}",
                genes.len()
            )));
        }
        let mut v = Vec::with_capacity(genes.len());
        for (i, &g) in genes.iter().enumerate() {
            v.push(u32::try_from(g).map_err(|_| arg(format!("genome entry {i} = {g} out of range")))?);
        }
        let l = (v.len() - 2) / 2;
        Ok(Self {
            m: v[0],
            e: v[1],
            mu: v[2..2 + l].to_vec(),
            bits: v[2 + l..].to_vec(),
        })
    }

    pub fn layer_specs(&self) -> Vec<LayerCompressionSpec> {
        self.mu
            .iter()
            .zip(&self.bits)
            .map(|(&mu, &b)| LayerCompressionSpec { bits: b, drop_percent: mu })
            .collect()
    }

    pub fn run_config(&self, n_clients: usize, train: TrainConfig, epochs: usize, init_seed: u64) -> FlRunConfig {
        FlRunConfig {
            n_clients,
            participants: self.m as usize,
            interval: self.e as usize,
            layers: self.layer_specs(),
            train,
            epochs,
            init_seed,
        }
    }
}

impl From<Genome> for Vec<i64> {
    fn from(g: Genome) -> Self {
        g.to_genes()
    }
}

impl TryFrom<Vec<i64>> for Genome {
    type Error = ObjectiveError;

    fn try_from(v: Vec<i64>) -> Result<Self, Self::Error> {
        Genome::from_genes(&v)
    }
}

impl fmt::Display for Genome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let genes: Vec<String> = self.to_genes().iter().map(i64::to_string).collect();
        write!(f, "[{}]", genes.join(","))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoundsPreset {
    /// `E` in `[1, 1000]`, `m` in `[1, N]`.
    #[default]
    Default,
    /// `E` in `[1, 100]`, `m` in `[1, min(4, N)]`.
    MutationNarrow,
}

impl FromStr for BoundsPreset {
    type Err = ObjectiveError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "default" => Ok(Self::Default),
            "mutation-narrow" => Ok(Self::MutationNarrow),
            _ => Err(arg(format!(
                "unknown bounds preset '{s}' (expected default or mutation-narrow)"
            ))),
        }
    }
}

impl fmt::Display for BoundsPreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Default => "default",
            Self::MutationNarrow => "mutation-narrow",
        })
    }
}

/// Box constraints of the genome.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bounds {
    pub layers: usize,
    pub m: GeneBounds,
    pub e: GeneBounds,
    pub mu: GeneBounds,
    pub bits: GeneBounds,
}

impl Bounds {
    pub fn preset(preset: BoundsPreset, n_clients: usize, layers: usize) -> Result<Self, ObjectiveError> {
        if n_clients == 0 || layers == 0 {
            return Err(arg("bounds need at least one client and one layer"));
        }
        let (m_hi, e_hi) = match preset {
            BoundsPreset::Default => (n_clients, DEFAULT_E_MAX),
            BoundsPreset::MutationNarrow => (n_clients.min(4), 100),
        };
        Ok(Self {
            layers,
            m: GeneBounds::new(1, m_hi as i64),
            e: GeneBounds::new(1, e_hi as i64),
            mu: GeneBounds::new(0, MAX_DROP_PERCENT as i64),
            bits: GeneBounds::new(MIN_BITS as i64, MAX_BITS as i64),
        })
    }

    /// Per-coordinate ranges in genome order.
    pub fn genes(&self) -> Vec<GeneBounds> {
        let mut g = vec![self.m, self.e];
        g.extend(std::iter::repeat(self.mu).take(self.layers));
        g.extend(std::iter::repeat(self.bits).take(self.layers));
        g
    }

    pub fn check(&self, g: &Genome) -> Result<(), ObjectiveError> {
        if g.mu.len() != self.layers || g.bits.len() != self.layers {
            return Err(arg(format!(
                "genome has {}+{} layer entries, model has {} arrays",
                g.mu.len(),
                g.bits.len(),
                self.layers
            )));
        }
        let names = |i: usize| match i {
            0 => "m".to_string(),
            1 => "E".to_string(),
            i if i < 2 + self.layers => format!("mu_{}", i - 1),
            i => format!("b_{}", i - 1 - self.layers),
        };
        for (i, (v, b)) in g.to_genes().into_iter().zip(self.genes()).enumerate() {
            if !b.contains(v) {
                return Err(arg(format!("{} = {v} outside [{}, {}]", names(i), b.lo, b.hi)));
            }
        }
        Ok(())
    }
}

pub fn random_genome<R: Rng>(bounds: &Bounds, rng: &mut R) -> Genome {
    let genes: Vec<i64> = bounds.genes().iter().map(|b| b.sample(rng)).collect();
    Genome::from_genes(&genes).expect("bounds are non-negative")
}

/// Projects every coordinate onto its range.
pub fn clamp(g: &Genome, bounds: &Bounds) -> Result<Genome, ObjectiveError> {
    if g.layers() != bounds.layers {
        return Err(arg(format!("genome has {} layers, bounds {}", g.layers(), bounds.layers)));
    }
    let genes: Vec<i64> = g
        .to_genes()
        .into_iter()
        .zip(bounds.genes())
        .map(|(v, b)| b.clamp(v))
        .collect();
    Genome::from_genes(&genes)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CommFraction {
    pub alpha: f64,
    pub beta: f64,
    pub f1: f64,
}

/// Downlink share `alpha`, uplink share `beta` and `f1 = (alpha + beta) / 2`
/// relative to every client exchanging the full model after every step.
///
/// `beta` is formed from one exact integer ratio, so the brute-force genome
/// gives exactly 1.
pub fn comm_fraction(g: &Genome, shapes: &[usize], n_clients: usize) -> CommFraction {
    debug_assert_eq!(g.layers(), shapes.len());
    let (m, e, n) = (g.m as u128, g.e as u128, n_clients as u128);
    let total: u128 = shapes.iter().map(|&s| s as u128).sum();
    let kept_bits: u128 = shapes
        .iter()
        .zip(g.mu.iter().zip(&g.bits))
        .map(|(&s, (&mu, &b))| b as u128 * (100 - mu as u128) * s as u128)
        .sum();
    let alpha = m as f64 / (n * e) as f64;
    let beta = (m * kept_bits) as f64 / (n * e * 32 * 100 * total) as f64;
    CommFraction {
        alpha,
        beta,
        f1: (alpha + beta) / 2.0,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveVector {
    pub f1_comm: f64,
    pub f2_acc: f64,
    pub alpha: f64,
    pub beta: f64,
    /// Correctly classified test images.
    pub lambda: u64,
    /// Test images evaluated.
    pub nu: u64,
}

impl ObjectiveVector {
    pub fn objectives(&self) -> Objectives {
        Objectives::new(self.f1_comm, self.f2_acc)
    }
}

/// Everything fixed across evaluations of one campaign.
#[derive(Debug, Clone, Copy)]
pub struct EvalEnv<'a> {
    pub spec: &'a ModelSpec,
    pub partition: &'a ClientPartition,
    pub test: &'a LabeledDataset,
    pub train: TrainConfig,
    pub epochs: usize,
    pub init_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub genome: Genome,
    pub objectives: ObjectiveVector,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ledger: Option<CommLedger>,
    /// Set when training broke down; `f2_acc` is then 0.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

/// Simulates the configuration and scores it. Numeric breakdowns during training
/// yield a failed evaluation with zero accuracy instead of an error.
pub fn evaluate_genome<T: Scalar>(g: &Genome, env: &EvalEnv<'_>, seed: u64) -> Result<Evaluation, ObjectiveError> {
    evaluate_genome_observed::<T>(g, env, seed, &mut ())
}

/// [`evaluate_genome`] with a per-round trace.
pub fn evaluate_genome_observed<T: Scalar>(
    g: &Genome,
    env: &EvalEnv<'_>,
    seed: u64,
    observer: &mut dyn RoundObserver,
) -> Result<Evaluation, ObjectiveError> {
    let n = env.partition.n_clients();
    Bounds::preset(BoundsPreset::Default, n, env.spec.num_arrays())?.check(g)?;
    let cf = comm_fraction(g, env.spec.param_shapes(), n);
    let cfg = g.run_config(n, env.train, env.epochs, env.init_seed);
    let mut obj = ObjectiveVector {
        f1_comm: cf.f1,
        f2_acc: 0.0,
        alpha: cf.alpha,
        beta: cf.beta,
        lambda: 0,
        nu: env.test.count() as u64,
    };
    match federation::run_federated_training_observed::<T>(env.spec, &cfg, env.partition, env.test, seed, observer) {
        Ok(out) => {
            obj.lambda = out.correct;
            obj.nu = out.evaluated;
            obj.f2_acc = out.accuracy;
            Ok(Evaluation {
                genome: g.clone(),
                objectives: obj,
                ledger: Some(out.ledger),
                failure: None,
            })
        }
        Err(FlError::Argument(msg)) => Err(arg(msg)),
        Err(e) => {
            log::warn!("evaluation of {g} failed: {e}");
            Ok(Evaluation {
                genome: g.clone(),
                objectives: obj,
                ledger: None,
                failure: Some(e.to_string()),
            })
        }
    }
}

/// The search problem handed to the NSGA-II engine.
pub struct FlcopProblem<'a> {
    env: EvalEnv<'a>,
    bounds: Bounds,
    genes: Vec<GeneBounds>,
}

impl<'a> FlcopProblem<'a> {
    pub fn new(env: EvalEnv<'a>, bounds: Bounds) -> Result<Self, ObjectiveError> {
        if bounds.layers != env.spec.num_arrays() {
            return Err(arg(format!(
                "bounds cover {} layers, model has {}",
                bounds.layers,
                env.spec.num_arrays()
            )));
        }
        if bounds.m.hi as usize > env.partition.n_clients() {
            return Err(arg("participant bound exceeds the client count"));
        }
        let genes = bounds.genes();
        Ok(Self { env, bounds, genes })
    }

    pub fn bounds_spec(&self) -> &Bounds {
        &self.bounds
    }
}

impl Problem for FlcopProblem<'_> {
    type Output = Evaluation;

    fn bounds(&self) -> &[GeneBounds] {
        &self.genes
    }

    fn evaluate(&self, genes: &[i64], seed: u64) -> Evaluation {
        let genome = Genome::from_genes(genes).expect("operators stay within bounds");
        evaluate_genome::<f32>(&genome, &self.env, seed).unwrap_or_else(|e| {
            let cf = comm_fraction(&genome, self.env.spec.param_shapes(), self.env.partition.n_clients());
            Evaluation {
                objectives: ObjectiveVector {
                    f1_comm: cf.f1,
                    f2_acc: 0.0,
                    alpha: cf.alpha,
                    beta: cf.beta,
                    lambda: 0,
                    nu: self.env.test.count() as u64,
                },
                genome,
                ledger: None,
                failure: Some(e.to_string()),
            }
        })
    }

    fn objectives(output: &Evaluation) -> Objectives {
        output.objectives.objectives()
    }
}
