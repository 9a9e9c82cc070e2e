//! TOML run configurations.
//!
//! Every command reads one file. Top-level keys shared by all commands:
//!
//! | key       | type    | default   |                                        |
//! |-----------|---------|-----------|----------------------------------------|
//! | `seed`    | integer | 0         | root seed for every random stream      |
//! | `workers` | integer | all cores | cap on parallel evaluations            |
//! | `out_dir` | path    | `runs`    | parent of the per-run directory        |
//!
//! A `[data]` table picks the corpus. `source = "idx"` reads Fashion-MNIST
//! style files from `dir`; `source = "cifar"` reads CIFAR-10 binary batches
//! from `dir`; `source = "synthetic"` generates `n` points of `kind`
//! (`two_gaussians`, `xor_blobs`, `spiral`) with Gaussian `noise` and holds
//! back `reserve` of them as the benchmark test reserve. For file sources
//! the directory comes from `--data-dir`, then `LRFORGE_DATA_DIR`, then
//! `dir`, then `data/fashion-mnist`.
//!
//! `[train]` holds `batch_size`, `max_epochs`, `early_stop` (bool) and
//! `patience`. `[network]` holds `hidden`, the hidden layer widths.
//!
//! `evolve` and `dlr-evolve` add `grammar` (path to a BNF file; the built-in
//! grammar when absent), `[split]` (`train_total`, `per_trial`,
//! `trial_count`, `validation`, `test`) and `[evolution]`
//! (`population_size`, `generations`, `tournament_size`, `mutation_rate`,
//! `crossover_rate`, `elitism`, `max_depth`, `threshold`, `trial_number`).
//!
//! `benchmark` adds one or more `[[scenario]]` tables: `name`, `steppers`,
//! `repetitions`, `train_size`, `validation`, `test`, `hidden`, an optional
//! `[scenario.train]` and optional `[scenario.hyperparams.<optimizer>]`
//! overrides. A stepper is a built-in optimizer name or `label=path` naming
//! an evolved optimizer or schedule file (relative to the config file).
//!
//! `tune` adds `families`, `budget`, `random_search`, `train_size`,
//! `validation` and `test`.

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use lrforge::data::{SplitPlan, SyntheticKind};
use lrforge::dsge::EvoParams;
use lrforge::nn::{EarlyStop, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DataConfig {
    Idx {
        #[serde(default)]
        dir: Option<PathBuf>,
    },
    Cifar {
        #[serde(default)]
        dir: Option<PathBuf>,
    },
    Synthetic {
        kind: SyntheticKind,
        n: usize,
        #[serde(default = "default_noise")]
        noise: f64,
        reserve: usize,
    },
}

fn default_noise() -> f64 {
    0.5
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig::Idx { dir: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub early_stop: bool,
    pub patience: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            batch_size: t.batch_size,
            max_epochs: t.max_epochs,
            early_stop: t.early_stop.enabled,
            patience: t.early_stop.patience,
        }
    }
}

impl TrainSection {
    pub fn to_config(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            early_stop: EarlyStop {
                enabled: self.early_stop,
                patience: self.patience,
            },
            shuffle_seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkSection {
    pub hidden: Vec<usize>,
}

impl Default for NetworkSection {
    fn default() -> Self {
        Self { hidden: vec![64] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSection {
    pub train_total: usize,
    pub per_trial: usize,
    pub trial_count: usize,
    pub validation: usize,
    pub test: usize,
}

impl SplitSection {
    pub fn to_plan(&self, seed: u64) -> SplitPlan {
        SplitPlan {
            train_total: self.train_total,
            per_trial: self.per_trial,
            trial_count: self.trial_count,
            validation: self.validation,
            test: self.test,
            seed,
        }
    }
}

impl From<SplitPlan> for SplitSection {
    fn from(p: SplitPlan) -> Self {
        Self {
            train_total: p.train_total,
            per_trial: p.per_trial,
            trial_count: p.trial_count,
            validation: p.validation,
            test: p.test,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvolutionSection {
    pub population_size: usize,
    pub generations: usize,
    pub tournament_size: usize,
    pub mutation_rate: f64,
    pub crossover_rate: f64,
    pub elitism: usize,
    pub max_depth: usize,
    pub threshold: f64,
    pub trial_number: usize,
}

impl Default for EvolutionSection {
    fn default() -> Self {
        let p = EvoParams::default();
        Self {
            population_size: p.population_size,
            generations: p.generations,
            tournament_size: p.tournament_size,
            mutation_rate: p.mutation_rate,
            crossover_rate: p.crossover_rate,
            elitism: p.elitism,
            max_depth: p.max_depth,
            threshold: 0.8,
            trial_number: 5,
        }
    }
}

impl EvolutionSection {
    pub fn to_params(&self, seed: u64) -> EvoParams {
        EvoParams {
            population_size: self.population_size,
            generations: self.generations,
            tournament_size: self.tournament_size,
            mutation_rate: self.mutation_rate,
            crossover_rate: self.crossover_rate,
            elitism: self.elitism,
            max_depth: self.max_depth,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvolveConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub workers: Option<usize>,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub grammar: Option<PathBuf>,
    #[serde(default)]
    pub data: DataConfig,
    /// Defaults depend on the command.
    #[serde(default)]
    pub split: Option<SplitSection>,
    #[serde(default)]
    pub network: NetworkSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub evolution: EvolutionSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSection {
    pub name: String,
    pub steppers: Vec<String>,
    #[serde(default = "default_repetitions")]
    pub repetitions: usize,
    pub train_size: usize,
    pub validation: usize,
    pub test: usize,
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub hyperparams: BTreeMap<String, BTreeMap<String, f64>>,
}

fn default_repetitions() -> usize {
    lrforge::bench::BenchmarkScenario::DEFAULT_REPETITIONS
}

fn default_hidden() -> Vec<usize> {
    NetworkSection::default().hidden
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub workers: Option<usize>,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default, rename = "scenario")]
    pub scenarios: Vec<ScenarioSection>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TuneConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub workers: Option<usize>,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub data: DataConfig,
    pub families: Vec<String>,
    #[serde(default = "default_budget")]
    pub budget: usize,
    #[serde(default)]
    pub random_search: bool,
    pub train_size: usize,
    pub validation: usize,
    pub test: usize,
    #[serde(default)]
    pub network: NetworkSection,
    #[serde(default)]
    pub train: TrainSection,
}

fn default_budget() -> usize {
    25
}
