//! Multi-run optimisation campaigns.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{self, ClientPartition, DataError, LabeledDataset};
use crate::metrics;
use crate::nn::{ArchKind, ModelSpec, TrainConfig};
use crate::nsga2::{self, GenerationRecord, SearchError, SearchParams};
use crate::objectives::{Bounds, BoundsPreset, EvalEnv, FlcopProblem, ObjectiveError};
use crate::report::{self, Manifest, ReportError, Summary};
use crate::seed::{derive_seed, stream};

#[derive(Debug, thiserror::Error)]
pub enum CampaignError {
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Search(#[from] SearchError),
    #[error(transparent)]
    Report(#[from] ReportError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignConfig {
    pub model: ArchKind,
    pub pop_size: usize,
    pub generations: usize,
    pub runs: usize,
    pub seed: u64,
    pub bounds: BoundsPreset,
    pub n_clients: usize,
    /// Training images kept, `None` for all.
    pub train_limit: Option<usize>,
    pub test_limit: Option<usize>,
    pub train: TrainConfig,
    pub epochs: usize,
    pub p_c: f64,
    pub p_m: Option<f64>,
    /// Evaluation threads; 0 means one per core.
    pub workers: usize,
}

impl CampaignConfig {
    pub fn new(model: ArchKind) -> Self {
        Self {
            model,
            pop_size: 100,
            generations: default_generations(model),
            runs: 30,
            seed: 1,
            bounds: BoundsPreset::Default,
            n_clients: 4,
            train_limit: None,
            test_limit: None,
            train: TrainConfig::default(),
            epochs: 1,
            p_c: 0.9,
            p_m: None,
            workers: 0,
        }
    }

    pub fn validate(&self) -> Result<(), CampaignError> {
        let bad = |m: String| Err(CampaignError::Config(m));
        if self.pop_size < 4 || self.pop_size % 2 != 0 {
            return bad(format!(
                "population size must be even and at least 4, got {}",
                self.pop_size
            ));
        }
        if self.runs == 0 {
            return bad("runs must be at least 1".into());
        }
        if self.n_clients == 0 {
            return bad("need at least one client".into());
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if matches!(self.train_limit, Some(0)) || matches!(self.test_limit, Some(0)) {
            return bad("data limits must be positive".into());
        }
        self.train
            .validate()
            .map_err(|e| CampaignError::Config(e.to_string()))?;
        self.search_params(0).validate()?;
        Ok(())
    }

    pub fn spec(&self) -> ModelSpec {
        ModelSpec::preset(self.model)
    }

    pub fn genome_bounds(&self) -> Result<Bounds, CampaignError> {
        Ok(Bounds::preset(self.bounds, self.n_clients, self.spec().num_arrays())?)
    }

    /// Seed of the initial global model, shared by every evaluation.
    pub fn init_seed(&self) -> u64 {
        derive_seed(self.seed, &[stream::INIT])
    }

    /// NSGA-II settings of run `k` (from 1).
    pub fn search_params(&self, run: usize) -> SearchParams {
        SearchParams {
            pop_size: self.pop_size,
            generations: self.generations,
            p_c: self.p_c,
            p_m: self.p_m,
            seed: derive_seed(self.seed, &[stream::RUN, run as u64]),
            reference: metrics::REFERENCE,
        }
    }
}

pub fn default_generations(model: ArchKind) -> usize {
    match model {
        ArchKind::FullyConnected => 300,
        ArchKind::Convolutional => 120,
    }
}

/// Applies the configured limits and splits the training set across clients.
pub fn prepare_data(
    cfg: &CampaignConfig,
    train: &LabeledDataset,
    test: &LabeledDataset,
) -> Result<(ClientPartition, LabeledDataset), CampaignError> {
    let limit = |ds: &LabeledDataset, lim: Option<usize>, tag: u64| match lim {
        Some(k) if k < ds.count() => ds.subsample(k, derive_seed(cfg.seed, &[tag])),
        _ => ds.clone(),
    };
    let train = limit(train, cfg.train_limit, stream::SUBSAMPLE_TRAIN);
    let test = limit(test, cfg.test_limit, stream::SUBSAMPLE_TEST);
    let parts = data::partition(&train, cfg.n_clients, derive_seed(cfg.seed, &[stream::PARTITION]))?;
    Ok((parts, test))
}

pub fn thread_pool(workers: usize) -> Result<rayon::ThreadPool, CampaignError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| CampaignError::Config(format!("cannot start {workers} workers: {e}")))
}

/// Runs every search, writes the per-run files and the manifest to `out`, then
/// regenerates the merged report. `on_generation` gets `(run, record)`.
pub fn run_campaign(
    cfg: &CampaignConfig,
    train: &LabeledDataset,
    test: &LabeledDataset,
    out: &Path,
    on_generation: &mut dyn FnMut(usize, &GenerationRecord),
) -> Result<Summary, CampaignError> {
    cfg.validate()?;
    let spec = cfg.spec();
    if train.features() != spec.input_len() {
        return Err(CampaignError::Config(format!(
            "images have {} features, model expects {}",
            train.features(),
            spec.input_len()
        )));
    }
    let bounds = cfg.genome_bounds()?;
    let (parts, test) = prepare_data(cfg, train, test)?;
    let env = EvalEnv {
        spec: &spec,
        partition: &parts,
        test: &test,
        train: cfg.train,
        epochs: cfg.epochs,
        init_seed: cfg.init_seed(),
    };
    let problem = FlcopProblem::new(env, bounds.clone())?;
    std::fs::create_dir_all(out).map_err(|source| ReportError::Io {
        path: out.to_path_buf(),
        source,
    })?;
    Manifest {
        runs: cfg.runs,
        bounds: bounds.clone(),
        reference: metrics::REFERENCE,
        // worker count only affects wall time, keep it out of the outputs
        config: serde_json::to_value(CampaignConfig { workers: 0, ..cfg.clone() }).expect("config serialises"),
    }
    .write(out)?;

    let pool = thread_pool(cfg.workers)?;
    for run in 1..=cfg.runs {
        let params = cfg.search_params(run);
        let result = nsga2::run_in(&problem, &params, Some(&pool), &mut |rec| on_generation(run, rec))?;
        report::write_run(out, run, bounds.layers, &result.history)?;
    }
    Ok(report::regenerate(out)?)
}
