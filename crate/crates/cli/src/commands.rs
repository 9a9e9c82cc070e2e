use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

use lrforge::bench::{run_benchmark, summarize_csv, summarize_table, BenchError, BenchmarkScenario, Stepper};
use lrforge::data::{load_cifar, synthetic, Corpus, DataError, SplitPlan};
use lrforge::evolve::{evolve, AlrProblem, Checkpoint, DlrProblem, EvolveError, RunOptions, Task};
use lrforge::grammar::{parse_grammar, Grammar};
use lrforge::hyperopt::{history_csv, report_best, tune_optimizer, SearchSpace, TuneError, TuneOptions};
use lrforge::optim::{builtin, HyperParams, Optimizer, OptimizerSpec};
use lrforge::sched::{PolicyTree, ScheduledSgd};
use lrforge::standard::grammar_checks;

use crate::config::{BenchmarkConfig, DataConfig, EvolveConfig, ScenarioSection, SplitSection, TuneConfig};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("{0}")]
    Check(String),
    #[error("run failed: {0}")]
    Run(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Check(_) | CliError::Run(_) => 1,
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::PlanTooLarge { .. } | DataError::BadPlan(_) => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<EvolveError> for CliError {
    fn from(e: EvolveError) -> Self {
        match e {
            EvolveError::Params(_) | EvolveError::CheckpointMismatch | EvolveError::Checkpoint { .. } => CliError::Config(e.to_string()),
            _ => CliError::Run(e.to_string()),
        }
    }
}

impl From<BenchError> for CliError {
    fn from(e: BenchError) -> Self {
        match e {
            BenchError::Nn(_) => CliError::Run(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<TuneError> for CliError {
    fn from(e: TuneError) -> Self {
        CliError::Config(e.to_string())
    }
}

type Result<T> = std::result::Result<T, CliError>;

/// Flags shared by the compute commands; each overrides its config field.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub out_dir: Option<PathBuf>,
    pub data_dir: Option<PathBuf>,
}

fn read_config<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn config_dir(path: &Path) -> PathBuf {
    path.parent().map_or_else(PathBuf::new, Path::to_path_buf)
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| CliError::Run(format!("{}: {e}", path.display())))
}

fn write_toml<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = toml::to_string_pretty(value).map_err(|e| CliError::Run(e.to_string()))?;
    write(path, &text)
}

/// `<out>/<cmd>-<timestamp>-s<seed>`, with a numeric suffix if taken.
fn create_run_dir(out: Option<&Path>, cmd: &str, seed: u64) -> Result<PathBuf> {
    let out = out.unwrap_or(Path::new("runs"));
    let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
    let base = out.join(format!("{cmd}-{stamp}-s{seed}"));
    let mut dir = base.clone();
    let mut k = 2;
    while dir.exists() {
        dir = PathBuf::from(format!("{}-{k}", base.display()));
        k += 1;
    }
    fs::create_dir_all(&dir).map_err(|e| CliError::Run(format!("{}: {e}", dir.display())))?;
    Ok(dir)
}

fn configure_workers(workers: Option<usize>) -> Result<()> {
    if workers == Some(0) {
        return Err(CliError::Config("workers must be at least 1".into()));
    }
    #[cfg(feature = "parallel")]
    if let Some(n) = workers {
        // Only the first call in a process takes effect.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

fn resolve_data_dir(flag: Option<&Path>, configured: Option<&Path>) -> PathBuf {
    flag.or(configured).map_or_else(|| PathBuf::from("data/fashion-mnist"), Path::to_path_buf)
}

fn load_corpus(data: &DataConfig, data_dir: Option<&Path>, seed: u64) -> Result<Corpus> {
    match data {
        DataConfig::Idx { dir } => {
            let dir = resolve_data_dir(data_dir, dir.as_deref());
            log::info!("loading IDX data from {}", dir.display());
            Ok(Corpus::from_idx_dir(&dir)?)
        }
        DataConfig::Cifar { dir } => {
            let dir = resolve_data_dir(data_dir, dir.as_deref());
            log::info!("loading CIFAR-10 batches from {}", dir.display());
            let train: Vec<PathBuf> = (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect();
            let test = vec![dir.join("test_batch.bin")];
            Ok(Corpus::new(load_cifar(&train)?, load_cifar(&test)?))
        }
        DataConfig::Synthetic { kind, n, noise, reserve } => {
            if !noise.is_finite() || *noise < 0.0 {
                return Err(CliError::Config("noise must be a non-negative number".into()));
            }
            Ok(Corpus::carve(&synthetic(*kind, *n, *noise, seed), *reserve, seed)?)
        }
    }
}

fn network_dims(corpus: &Corpus, hidden: &[usize]) -> Result<Vec<usize>> {
    if hidden.contains(&0) {
        return Err(CliError::Config("hidden layer widths must be positive".into()));
    }
    let mut dims = vec![corpus.pool.features()];
    dims.extend_from_slice(hidden);
    dims.push(corpus.pool.classes);
    Ok(dims)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvolveKind {
    Optimizer,
    Schedule,
}

impl EvolveKind {
    fn command(self) -> &'static str {
        match self {
            EvolveKind::Optimizer => "evolve",
            EvolveKind::Schedule => "dlr-evolve",
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct EvolveFlags {
    pub common: Overrides,
    pub generations: Option<usize>,
    pub stop_after: Option<usize>,
    pub resume: Option<PathBuf>,
}

/// Run an evolution; returns the run directory.
pub fn cmd_evolve(config_path: &Path, kind: EvolveKind, flags: &EvolveFlags) -> Result<PathBuf> {
    let mut cfg: EvolveConfig = read_config(config_path)?;
    let o = &flags.common;
    cfg.seed = o.seed.unwrap_or(cfg.seed);
    cfg.workers = o.workers.or(cfg.workers);
    cfg.out_dir = o.out_dir.clone().or(cfg.out_dir);
    if let Some(g) = flags.generations {
        cfg.evolution.generations = g;
    }
    configure_workers(cfg.workers)?;

    let grammar = match &cfg.grammar {
        Some(p) => {
            let p = config_dir(config_path).join(p);
            let text = fs::read_to_string(&p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
            parse_grammar(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
        }
        None if kind == EvolveKind::Optimizer => Grammar::alr(),
        None => Grammar::dlr(),
    };
    let params = cfg.evolution.to_params(cfg.seed);
    params.validate().map_err(CliError::Config)?;
    let train = cfg.train.to_config();
    train.validate().map_err(CliError::Config)?;
    if !(0.0..=1.0).contains(&cfg.evolution.threshold) || cfg.evolution.trial_number == 0 {
        return Err(CliError::Config("threshold must lie in [0, 1] and trial_number be at least 1".into()));
    }
    let split = cfg.split.clone().unwrap_or_else(|| match kind {
        EvolveKind::Optimizer => SplitSection::from(SplitPlan::alr(0)),
        EvolveKind::Schedule => SplitSection::from(SplitPlan::dlr(0)),
    });
    let plan = split.to_plan(cfg.seed);
    plan.validate()?;
    let resume = flags.resume.as_deref().map(Checkpoint::load).transpose()?;
    if let Some(cp) = &resume {
        if cp.params != params {
            return Err(EvolveError::CheckpointMismatch.into());
        }
    }

    let corpus = load_corpus(&cfg.data, o.data_dir.as_deref(), cfg.seed)?;
    let task = Task {
        splits: corpus.evolution_splits(&plan)?,
        dims: network_dims(&corpus, &cfg.network.hidden)?,
        train,
        threshold: cfg.evolution.threshold,
        trial_number: match kind {
            EvolveKind::Optimizer => cfg.evolution.trial_number,
            EvolveKind::Schedule => 1,
        },
    };

    let dir = create_run_dir(cfg.out_dir.as_deref(), kind.command(), cfg.seed)?;
    write_toml(&dir.join("config.toml"), &cfg)?;
    let opts = RunOptions {
        workers: cfg.workers,
        checkpoint: Some(dir.join("checkpoint.json")),
        resume,
        stop_after: flags.stop_after,
    };
    let outcome = match kind {
        EvolveKind::Optimizer => evolve(&params, &AlrProblem { grammar, task }, &opts)?,
        EvolveKind::Schedule => evolve(&params, &DlrProblem { grammar, task }, &opts)?,
    };

    write(&dir.join("log.csv"), &outcome.log.to_csv())?;
    let log_json = serde_json::to_string_pretty(&outcome.log).map_err(|e| CliError::Run(e.to_string()))?;
    write(&dir.join("log.json"), &log_json)?;
    let best_json = serde_json::to_string_pretty(&outcome.best).map_err(|e| CliError::Run(e.to_string()))?;
    write(&dir.join("best.json"), &best_json)?;
    let phenotype = outcome.best.phenotype.clone().unwrap_or_default();
    let best_text = match kind {
        EvolveKind::Optimizer => OptimizerSpec::parse(&phenotype).map_or_else(|_| phenotype.clone() + "\n", |s| s.to_text()),
        EvolveKind::Schedule => phenotype.clone() + "\n",
    };
    write(&dir.join("best.txt"), &best_text)?;

    let fitness = outcome.best.fitness.unwrap_or(0.0);
    println!("run directory: {}", dir.display());
    if !outcome.finished {
        println!("stopped after generation {}", outcome.log.records.last().map_or(0, |r| r.generation));
    }
    println!("best fitness: {fitness:.4}");
    println!("best: {phenotype}");
    Ok(dir)
}

fn load_stepper(entry: &str, base: &Path, hyper: &std::collections::BTreeMap<String, std::collections::BTreeMap<String, f64>>) -> Result<Stepper> {
    if let Some((label, path)) = entry.split_once('=') {
        let path = base.join(path.trim());
        let text = fs::read_to_string(&path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let optimizer = match OptimizerSpec::parse(&text) {
            Ok(spec) => Optimizer::Interpreted(spec),
            Err(spec_err) => match PolicyTree::parse(text.trim()) {
                Ok(policy) => Optimizer::Scheduled(ScheduledSgd::new(policy)),
                Err(_) => return Err(CliError::Config(format!("{}: {spec_err}", path.display()))),
            },
        };
        return Ok(Stepper {
            label: label.trim().to_string(),
            optimizer,
        });
    }
    let name = entry.trim();
    let mut hp = HyperParams::defaults(name).map_err(|e| CliError::Config(e.to_string()))?;
    for (k, v) in hyper.get(name).into_iter().flatten() {
        if !hp.0.contains_key(k) {
            return Err(CliError::Config(format!("`{name}` has no hyperparameter `{k}`")));
        }
        hp.set(k, *v);
    }
    let optimizer = builtin(name, &hp).map_err(|e| CliError::Config(e.to_string()))?;
    Ok(Stepper {
        label: name.to_string(),
        optimizer,
    })
}

fn build_scenario(s: &ScenarioSection, base: &Path, corpus_dims: impl Fn(&[usize]) -> Result<Vec<usize>>) -> Result<BenchmarkScenario> {
    if s.name.is_empty() || s.name.contains(['/', '\\']) {
        return Err(CliError::Config(format!("invalid scenario name `{}`", s.name)));
    }
    for key in s.hyperparams.keys() {
        if !s.steppers.iter().any(|e| e.trim() == key) {
            return Err(CliError::Config(format!("scenario `{}`: hyperparameters given for `{key}`, which is not a stepper", s.name)));
        }
    }
    let steppers = s.steppers.iter().map(|e| load_stepper(e, base, &s.hyperparams)).collect::<Result<Vec<_>>>()?;
    let train = s.train.to_config();
    train.validate().map_err(CliError::Config)?;
    let scenario = BenchmarkScenario {
        name: s.name.clone(),
        steppers,
        dims: corpus_dims(&s.hidden)?,
        train,
        repetitions: s.repetitions,
    };
    scenario.validate()?;
    Ok(scenario)
}

pub fn cmd_benchmark(config_path: &Path, o: &Overrides) -> Result<PathBuf> {
    let mut cfg: BenchmarkConfig = read_config(config_path)?;
    cfg.seed = o.seed.unwrap_or(cfg.seed);
    cfg.workers = o.workers.or(cfg.workers);
    cfg.out_dir = o.out_dir.clone().or(cfg.out_dir);
    configure_workers(cfg.workers)?;
    if cfg.scenarios.is_empty() {
        return Err(CliError::Config("no [[scenario]] tables".into()));
    }
    let base = config_dir(config_path);
    // Resolve steppers before touching data so naming mistakes fail fast.
    for s in &cfg.scenarios {
        build_scenario(s, &base, |h| Ok(h.to_vec()))?;
    }

    let corpus = load_corpus(&cfg.data, o.data_dir.as_deref(), cfg.seed)?;
    let scenarios = cfg
        .scenarios
        .iter()
        .map(|s| build_scenario(s, &base, |h| network_dims(&corpus, h)))
        .collect::<Result<Vec<_>>>()?;
    let splits = cfg
        .scenarios
        .iter()
        .map(|s| corpus.benchmark_splits(s.train_size, s.validation, s.test, cfg.seed))
        .collect::<std::result::Result<Vec<_>, _>>()?;

    let dir = create_run_dir(cfg.out_dir.as_deref(), "benchmark", cfg.seed)?;
    write_toml(&dir.join("config.toml"), &cfg)?;
    println!("run directory: {}", dir.display());
    for (scenario, splits) in scenarios.iter().zip(&splits) {
        log::info!("benchmark `{}`: {} steppers x {} repetitions", scenario.name, scenario.steppers.len(), scenario.repetitions);
        let report = run_benchmark(scenario, splits, cfg.seed)?;
        write(&dir.join(format!("bench_{}.csv", scenario.name)), &summarize_csv(&report.results))?;
        let table = summarize_table(&report.results);
        write(&dir.join(format!("bench_{}.txt", scenario.name)), &table)?;
        println!("\nscenario {}\n{table}", scenario.name);
    }
    Ok(dir)
}

pub fn cmd_tune(config_path: &Path, o: &Overrides) -> Result<PathBuf> {
    let mut cfg: TuneConfig = read_config(config_path)?;
    cfg.seed = o.seed.unwrap_or(cfg.seed);
    cfg.workers = o.workers.or(cfg.workers);
    cfg.out_dir = o.out_dir.clone().or(cfg.out_dir);
    configure_workers(cfg.workers)?;
    if cfg.families.is_empty() {
        return Err(CliError::Config("families is empty".into()));
    }
    if cfg.budget < 5 {
        return Err(TuneError::Budget(cfg.budget).into());
    }
    let spaces = cfg.families.iter().map(|f| SearchSpace::for_family(f)).collect::<std::result::Result<Vec<_>, _>>()?;
    let train = cfg.train.to_config();
    train.validate().map_err(CliError::Config)?;

    let corpus = load_corpus(&cfg.data, o.data_dir.as_deref(), cfg.seed)?;
    let task = Task {
        splits: corpus.benchmark_splits(cfg.train_size, cfg.validation, cfg.test, cfg.seed)?,
        dims: network_dims(&corpus, &cfg.network.hidden)?,
        train,
        threshold: 0.0,
        trial_number: 1,
    };
    let options = TuneOptions {
        random_search: cfg.random_search,
    };

    let dir = create_run_dir(cfg.out_dir.as_deref(), "tune", cfg.seed)?;
    write_toml(&dir.join("config.toml"), &cfg)?;
    println!("run directory: {}", dir.display());
    let mut summary = String::from("Optimizer | Parameters | Test Accuracy\n");
    for (family, space) in cfg.families.iter().zip(&spaces) {
        log::info!("tuning {family} with {} evaluations", cfg.budget);
        let out = tune_optimizer(family, space, cfg.budget, &task, cfg.seed, options)?;
        write(&dir.join(format!("tune_{family}.csv")), &history_csv(&out.history))?;
        let row = report_best(family, &out.history)?;
        let _ = writeln!(summary, "{row}");
    }
    write(&dir.join("tune_best.txt"), &summary)?;
    print!("{summary}");
    Ok(dir)
}

/// Check a grammar file, or the built-in optimizer grammar when `path` is
/// `None`.
pub fn cmd_grammar_check(path: Option<&Path>) -> Result<()> {
    let grammar = match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
            parse_grammar(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
        }
        None => Grammar::alr(),
    };
    let checks = grammar_checks(&grammar);
    let mut failed = 0;
    for c in &checks {
        println!("{}  {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
        failed += usize::from(!c.passed);
    }
    if failed > 0 {
        return Err(CliError::Check(format!("{failed} of {} grammar checks failed", checks.len())));
    }
    Ok(())
}
