//! Layered settings: flags over config file over preset over defaults.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use clap::ValueEnum;
use serde::Deserialize;

use flcop::campaign::{default_generations, CampaignConfig};
use flcop::nn::{ArchKind, TrainConfig};
use flcop::objectives::BoundsPreset;

pub const DEFAULT_MNIST_DIR: &str = "data/mnist";
pub const DEFAULT_OUT: &str = "results";

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Model {
    Fc,
    Conv,
}

impl From<Model> for ArchKind {
    fn from(m: Model) -> Self {
        match m {
            Model::Fc => ArchKind::FullyConnected,
            Model::Conv => ArchKind::Convolutional,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    DeskFc,
    DeskConv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoundsArg {
    Default,
    MutationNarrow,
}

impl From<BoundsArg> for BoundsPreset {
    fn from(b: BoundsArg) -> Self {
        match b {
            BoundsArg::Default => BoundsPreset::Default,
            BoundsArg::MutationNarrow => BoundsPreset::MutationNarrow,
        }
    }
}

/// Every tunable; `None` means "not set at this layer".
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct Settings {
    pub preset: Option<Preset>,
    pub mnist_dir: Option<PathBuf>,
    pub model: Option<Model>,
    pub train_limit: Option<usize>,
    pub test_limit: Option<usize>,
    pub clients: Option<usize>,
    pub pop: Option<usize>,
    pub generations: Option<usize>,
    pub runs: Option<usize>,
    pub seed: Option<u64>,
    pub bounds: Option<BoundsArg>,
    pub lr: Option<f64>,
    pub batch: Option<usize>,
    pub epochs: Option<usize>,
    pub out: Option<PathBuf>,
    pub workers: Option<usize>,
}

#[derive(Debug)]
pub struct SettingsError(pub String);

impl fmt::Display for SettingsError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

macro_rules! overlay {
    ($top:expr, $base:expr, $($field:ident),*) => {
        Settings { $($field: $top.$field.clone().or_else(|| $base.$field.clone()),)* }
    };
}

impl Settings {
    /// `self` wins wherever it is set.
    pub fn over(&self, base: &Settings) -> Settings {
        overlay!(
            self, base, preset, mnist_dir, model, train_limit, test_limit, clients, pop, generations,
            runs, seed, bounds, lr, batch, epochs, out, workers
        )
    }

    pub fn preset(p: Preset) -> Settings {
        let (model, train, test) = match p {
            Preset::DeskFc => (Model::Fc, 8000, 2000),
            Preset::DeskConv => (Model::Conv, 4000, 1000),
        };
        Settings {
            model: Some(model),
            train_limit: Some(train),
            test_limit: Some(test),
            clients: Some(4),
            pop: Some(20),
            generations: Some(if p == Preset::DeskFc { 20 } else { 10 }),
            runs: Some(1),
            seed: Some(1),
            ..Settings::default()
        }
    }

    /// Reads a JSON object or `key = value` lines (`#` starts a comment).
    /// Keys use flag spelling; underscores are accepted for dashes.
    pub fn from_file(path: &Path) -> Result<Settings, SettingsError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| SettingsError(format!("{}: {e}", path.display())))?;
        Settings::parse(&text).map_err(|e| SettingsError(format!("{}: {}", path.display(), e.0)))
    }

    pub fn parse(text: &str) -> Result<Settings, SettingsError> {
        let value = if text.trim_start().starts_with('{') {
            serde_json::from_str::<serde_json::Value>(text).map_err(|e| SettingsError(e.to_string()))?
        } else {
            let mut map = BTreeMap::new();
            for (i, line) in text.lines().enumerate() {
                let line = line.split('#').next().unwrap_or("").trim();
                if line.is_empty() {
                    continue;
                }
                let (k, v) = line
                    .split_once('=')
                    .ok_or_else(|| SettingsError(format!("line {}: expected key = value", i + 1)))?;
                let v = v.trim();
                let json = serde_json::from_str::<serde_json::Value>(v)
                    .ok()
                    .filter(|j| j.is_number())
                    .unwrap_or_else(|| serde_json::Value::String(v.to_string()));
                map.insert(k.trim().to_string(), json);
            }
            serde_json::Value::Object(map.into_iter().collect())
        };
        let serde_json::Value::Object(obj) = value else {
            return Err(SettingsError("config must be an object".into()));
        };
        let obj: serde_json::Map<String, serde_json::Value> =
            obj.into_iter().map(|(k, v)| (k.replace('_', "-"), v)).collect();
        serde_json::from_value(serde_json::Value::Object(obj)).map_err(|e| SettingsError(e.to_string()))
    }

    /// Stacks flags over the config file over the preset named by either.
    pub fn resolve(flags: &Settings, config: Option<&Path>) -> Result<Settings, SettingsError> {
        let file = match config {
            Some(p) => Settings::from_file(p)?,
            None => Settings::default(),
        };
        let top = flags.over(&file);
        Ok(match top.preset {
            Some(p) => top.over(&Settings::preset(p)),
            None => top,
        })
    }

    pub fn mnist_dir(&self) -> PathBuf {
        self.mnist_dir.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_MNIST_DIR))
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
    }

    pub fn campaign(&self) -> CampaignConfig {
        let model: ArchKind = self.model.unwrap_or(Model::Fc).into();
        let mut c = CampaignConfig::new(model);
        let d = TrainConfig::default();
        c.pop_size = self.pop.unwrap_or(c.pop_size);
        c.generations = self.generations.unwrap_or(default_generations(model));
        c.runs = self.runs.unwrap_or(c.runs);
        c.seed = self.seed.unwrap_or(c.seed);
        c.bounds = self.bounds.map_or(c.bounds, Into::into);
        c.n_clients = self.clients.unwrap_or(c.n_clients);
        c.train_limit = self.train_limit;
        c.test_limit = self.test_limit;
        c.train = TrainConfig {
            learning_rate: self.lr.unwrap_or(d.learning_rate),
            batch_size: self.batch.unwrap_or(d.batch_size),
        };
        c.epochs = self.epochs.unwrap_or(c.epochs);
        c.workers = self.workers.unwrap_or(0);
        c
    }
}
