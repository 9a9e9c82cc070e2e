//! Evolutionary driver: fitness functions for optimizer and schedule
//! evolution plus the generation loop with its checkpoints.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Splits;
use crate::dsge::{better, crossover, map_genotype, mutate, random_genotype, tournament_select, EvoParams, Individual, MappingError};
use crate::grammar::Grammar;
use crate::nn::{evaluate, train, Network, TrainConfig};
use crate::optim::{Optimizer, OptimizerSpec};
use crate::rng::{key_of, Rng};
use crate::sched::{PolicyTree, ScheduledSgd};

#[derive(Debug, Error)]
pub enum EvolveError {
    #[error("invalid parameters: {0}")]
    Params(String),
    #[error(transparent)]
    Mapping(#[from] MappingError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint {path}: {source}")]
    Checkpoint {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("checkpoint was written for different parameters")]
    CheckpointMismatch,
    #[error("thread pool: {0}")]
    Pool(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> EvolveError + '_ {
    move |source| EvolveError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Outcome of one training trial.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Trial {
    pub accuracy: f64,
    pub failed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitnessReport {
    pub trial_scores: Vec<f64>,
    pub fitness: f64,
    pub trials_run: usize,
    /// A trial scored below the threshold and ended the evaluation.
    pub cancelled_early: bool,
    /// At least one trial diverged.
    pub failed: bool,
}

/// Run up to `trial_number` trials in order, keeping the running minimum.
/// The first score below `threshold` ends the evaluation.
pub fn alr_fitness(trial_number: usize, threshold: f64, mut run_trial: impl FnMut(usize) -> Trial) -> FitnessReport {
    let mut report = FitnessReport {
        trial_scores: Vec::new(),
        fitness: 1.0,
        trials_run: 0,
        cancelled_early: false,
        failed: false,
    };
    for i in 0..trial_number {
        let t = run_trial(i);
        let score = if t.failed || !t.accuracy.is_finite() { 0.0 } else { t.accuracy };
        report.failed |= t.failed;
        report.trial_scores.push(score);
        report.trials_run += 1;
        report.fitness = report.fitness.min(score);
        if score < threshold {
            report.cancelled_early = true;
            break;
        }
    }
    report
}

/// Data and training settings shared by every fitness evaluation.
#[derive(Clone, Debug)]
pub struct Task {
    pub splits: Splits,
    /// Layer widths, input first.
    pub dims: Vec<usize>,
    pub train: TrainConfig,
    pub threshold: f64,
    pub trial_number: usize,
}

impl Task {
    /// Train a fresh network on trial group `i` and score it on the test
    /// partition.
    pub fn run_trial(&self, opt: &Optimizer, i: usize, rng: &Rng) -> Trial {
        let group = &self.splits.trials[i % self.splits.trials.len()];
        let trial_rng = rng.child(i as u64);
        let Ok(mut net) = Network::new(&self.dims, trial_rng.child_named("net").seed()) else {
            return Trial {
                accuracy: 0.0,
                failed: true,
            };
        };
        let cfg = TrainConfig {
            shuffle_seed: trial_rng.child_named("shuffle").seed(),
            ..self.train.clone()
        };
        match train(&mut net, opt, group, &self.splits.validation, &cfg) {
            Ok(h) if !h.failed => Trial {
                accuracy: evaluate(&net, &self.splits.test).unwrap_or(0.0),
                failed: false,
            },
            _ => Trial {
                accuracy: 0.0,
                failed: true,
            },
        }
    }
}

/// Multi-trial fitness of an optimizer.
pub fn fitness_alr(opt: &Optimizer, task: &Task, rng: &Rng) -> FitnessReport {
    alr_fitness(task.trial_number, task.threshold, |i| task.run_trial(opt, i, rng))
}

/// Single-training fitness of a schedule: test accuracy, 0 on divergence.
pub fn fitness_dlr(policy: &PolicyTree, task: &Task, rng: &Rng) -> f64 {
    let opt = Optimizer::Scheduled(ScheduledSgd::new(policy.clone()));
    let t = task.run_trial(&opt, 0, rng);
    if t.failed {
        0.0
    } else {
        t.accuracy
    }
}

/// What the evolutionary loop needs from a problem.
pub trait Problem: Sync {
    fn grammar(&self) -> &Grammar;

    /// Cache key for a mapped phenotype; phenotypes with equal keys must have
    /// equal fitness distributions.
    fn canonical(&self, phenotype: &str) -> String {
        phenotype.split_whitespace().collect::<Vec<_>>().join(" ")
    }

    /// Fitness of a phenotype; undecodable or diverging candidates score 0.
    fn fitness(&self, phenotype: &str, rng: &Rng) -> f64;
}

/// Optimizer evolution over the adaptive grammar.
pub struct AlrProblem {
    pub grammar: Grammar,
    pub task: Task,
}

impl Problem for AlrProblem {
    fn grammar(&self) -> &Grammar {
        &self.grammar
    }

    fn canonical(&self, phenotype: &str) -> String {
        OptimizerSpec::parse(phenotype).map_or_else(|_| phenotype.to_string(), |s| s.canonical())
    }

    fn fitness(&self, phenotype: &str, rng: &Rng) -> f64 {
        match OptimizerSpec::parse(phenotype) {
            Ok(spec) => fitness_alr(&Optimizer::Interpreted(spec), &self.task, rng).fitness,
            Err(_) => 0.0,
        }
    }
}

/// Schedule evolution over the policy grammar.
pub struct DlrProblem {
    pub grammar: Grammar,
    pub task: Task,
}

impl Problem for DlrProblem {
    fn grammar(&self) -> &Grammar {
        &self.grammar
    }

    fn canonical(&self, phenotype: &str) -> String {
        PolicyTree::parse(phenotype).map_or_else(|_| phenotype.to_string(), |p| p.to_string())
    }

    fn fitness(&self, phenotype: &str, rng: &Rng) -> f64 {
        match PolicyTree::parse(phenotype) {
            Ok(p) => fitness_dlr(&p, &self.task, rng),
            Err(_) => 0.0,
        }
    }
}

/// A problem from a closure; handy for tests and toy objectives.
pub struct FnProblem<F> {
    pub grammar: Grammar,
    pub f: F,
}

impl<F: Fn(&str, &Rng) -> f64 + Sync> Problem for FnProblem<F> {
    fn grammar(&self) -> &Grammar {
        &self.grammar
    }

    fn fitness(&self, phenotype: &str, rng: &Rng) -> f64 {
        (self.f)(phenotype, rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub generation: usize,
    /// Best fitness in this generation.
    pub best: f64,
    pub best_ever: f64,
    pub mean: f64,
    pub median: f64,
    /// Individuals assessed this generation (elites excluded).
    pub evaluations: usize,
    /// Assessments that were not answered from the fitness cache.
    pub new_evaluations: usize,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct EvolveRunLog {
    pub seed: u64,
    pub records: Vec<GenerationRecord>,
    pub best: Option<Individual>,
}

impl EvolveRunLog {
    pub fn best_ever_curve(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.best_ever).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("generation,best,best_ever,mean,median,evaluations,new_evaluations,seconds\n");
        for r in &self.records {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{:.3}",
                r.generation, r.best, r.best_ever, r.mean, r.median, r.evaluations, r.new_evaluations, r.seconds
            );
        }
        s
    }

    /// Equal up to wall-clock timings.
    pub fn same_trajectory(&self, other: &EvolveRunLog) -> bool {
        let strip = |l: &EvolveRunLog| -> Vec<GenerationRecord> {
            l.records
                .iter()
                .map(|r| GenerationRecord {
                    seconds: 0.0,
                    ..r.clone()
                })
                .collect()
        };
        let best = |l: &EvolveRunLog| l.best.as_ref().map(|b| (b.id, b.phenotype.clone(), b.fitness));
        self.seed == other.seed && strip(self) == strip(other) && best(self) == best(other)
    }
}

/// Resumable state, written after every generation.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub params: EvoParams,
    /// Last generation whose evaluation finished.
    pub generation: usize,
    pub population: Vec<Individual>,
    pub next_id: u64,
    pub cache: BTreeMap<String, f64>,
    pub log: EvolveRunLog,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<(), EvolveError> {
        let text = serde_json::to_string(self).map_err(|source| EvolveError::Checkpoint {
            path: path.to_path_buf(),
            source,
        })?;
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, text).map_err(io_err(&tmp))?;
        std::fs::rename(&tmp, path).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Checkpoint, EvolveError> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|source| EvolveError::Checkpoint {
            path: path.to_path_buf(),
            source,
        })
    }
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Thread cap for evaluation waves; `None` uses all cores.
    pub workers: Option<usize>,
    /// Written after each generation when set.
    pub checkpoint: Option<PathBuf>,
    /// Continue from this checkpoint.
    pub resume: Option<Checkpoint>,
    /// Stop after this generation, as if interrupted.
    pub stop_after: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct EvolveOutcome {
    pub best: Individual,
    pub log: EvolveRunLog,
    /// False when `stop_after` ended the run before the last generation.
    pub finished: bool,
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Score every individual that lacks a fitness, mapping it first. Returns
/// `(assessed, newly evaluated)`.
fn evaluate_population<P: Problem>(
    problem: &P,
    params: &EvoParams,
    root: &Rng,
    population: &mut [Individual],
    cache: &mut BTreeMap<String, f64>,
    workers: Option<usize>,
) -> Result<(usize, usize), EvolveError> {
    let grammar = problem.grammar();
    let mut pending: Vec<usize> = Vec::new();
    for ind in population.iter_mut().filter(|i| i.fitness.is_none()) {
        let mut map_rng = root.child_named("map").child(ind.id);
        match map_genotype(grammar, &ind.genotype, grammar.start(), params.max_depth, &mut map_rng) {
            Ok(m) => {
                ind.genotype = m.genotype;
                ind.phenotype = Some(problem.canonical(&m.tree.text()));
            }
            Err(_) => {
                ind.phenotype = None;
                ind.fitness = Some(0.0);
            }
        }
    }
    let mut wave: Vec<String> = Vec::new();
    for (i, ind) in population.iter().enumerate() {
        if ind.fitness.is_some() {
            continue;
        }
        pending.push(i);
        let key = ind.phenotype.clone().expect("mapped");
        if !cache.contains_key(&key) && !wave.contains(&key) {
            wave.push(key);
        }
    }
    let scores = score_phenotypes(problem, &wave, root, workers)?;
    let new = wave.len();
    cache.extend(wave.into_iter().zip(scores));
    for &i in &pending {
        let key = population[i].phenotype.as_ref().expect("mapped");
        population[i].fitness = Some(cache[key]);
    }
    Ok((pending.len(), new))
}

fn score_one<P: Problem>(problem: &P, key: &str, root: &Rng) -> f64 {
    let f = problem.fitness(key, &root.child_named("fitness").child(key_of(key.as_bytes())));
    if f.is_finite() {
        f
    } else {
        0.0
    }
}

/// Fitness of each phenotype, on the rng streams `evolve` derives from
/// `root`. Runs on the rayon pool when the `parallel` feature is on;
/// `workers` caps the thread count.
pub fn score_phenotypes<P: Problem>(problem: &P, phenotypes: &[String], root: &Rng, workers: Option<usize>) -> Result<Vec<f64>, EvolveError> {
    run_wave(phenotypes, |k| score_one(problem, k, root), workers)
}

/// Same scores as [`score_phenotypes`], one after another on this thread.
pub fn score_phenotypes_sequential<P: Problem>(problem: &P, phenotypes: &[String], root: &Rng) -> Vec<f64> {
    phenotypes.iter().map(|k| score_one(problem, k, root)).collect()
}

#[cfg(feature = "parallel")]
fn run_wave<F: Fn(&String) -> f64 + Sync>(keys: &[String], f: F, workers: Option<usize>) -> Result<Vec<f64>, EvolveError> {
    use rayon::prelude::*;
    match workers {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build()
                .map_err(|e| EvolveError::Pool(e.to_string()))?;
            Ok(pool.install(|| keys.par_iter().map(&f).collect()))
        }
        None => Ok(keys.par_iter().map(&f).collect()),
    }
}

#[cfg(not(feature = "parallel"))]
fn run_wave<F: Fn(&String) -> f64 + Sync>(keys: &[String], f: F, _workers: Option<usize>) -> Result<Vec<f64>, EvolveError> {
    Ok(keys.iter().map(f).collect())
}

fn record(generation: usize, population: &[Individual], best_ever: f64, counts: (usize, usize), seconds: f64) -> GenerationRecord {
    let mut f: Vec<f64> = population.iter().map(Individual::fitness_or_floor).collect();
    f.sort_by(f64::total_cmp);
    GenerationRecord {
        generation,
        best: *f.last().expect("non-empty population"),
        best_ever,
        mean: f.iter().sum::<f64>() / f.len() as f64,
        median: median(&f),
        evaluations: counts.0,
        new_evaluations: counts.1,
        seconds,
    }
}

/// Generational loop with elitism, tournament selection, per-nonterminal
/// crossover and gene mutation. Generation 0 is the random population;
/// `params.generations` further generations are bred.
pub fn evolve<P: Problem>(params: &EvoParams, problem: &P, opts: &RunOptions) -> Result<EvolveOutcome, EvolveError> {
    params.validate().map_err(EvolveError::Params)?;
    let root = Rng::new(params.seed);
    let grammar = problem.grammar();

    let mut state = match &opts.resume {
        Some(cp) => {
            if cp.params != *params {
                return Err(EvolveError::CheckpointMismatch);
            }
            cp.clone()
        }
        None => {
            let t0 = Instant::now();
            let init = root.child_named("init");
            let mut population = (0..params.population_size as u64)
                .map(|i| Ok(Individual::new(i, random_genotype(grammar, params.max_depth, &mut init.child(i))?)))
                .collect::<Result<Vec<_>, MappingError>>()?;
            let mut cache = BTreeMap::new();
            let counts = evaluate_population(problem, params, &root, &mut population, &mut cache, opts.workers)?;
            let best = population.iter().fold(&population[0], |b, i| if better(i, b) { i } else { b }).clone();
            let log = EvolveRunLog {
                seed: params.seed,
                records: vec![record(0, &population, best.fitness_or_floor(), counts, t0.elapsed().as_secs_f64())],
                best: Some(best),
            };
            let cp = Checkpoint {
                params: params.clone(),
                generation: 0,
                next_id: params.population_size as u64,
                population,
                cache,
                log,
            };
            if let Some(p) = &opts.checkpoint {
                cp.save(p)?;
            }
            cp
        }
    };

    while state.generation < params.generations {
        if opts.stop_after.is_some_and(|s| state.generation >= s) {
            let best = state.log.best.clone().expect("set after generation 0");
            return Ok(EvolveOutcome {
                best,
                log: state.log,
                finished: false,
            });
        }
        let t0 = Instant::now();
        let g = state.generation + 1;
        let mut rng = root.child_named("breed").child(g as u64);
        let mut ranked = state.population.clone();
        ranked.sort_by(|a, b| {
            if better(a, b) {
                std::cmp::Ordering::Less
            } else if better(b, a) {
                std::cmp::Ordering::Greater
            } else {
                std::cmp::Ordering::Equal
            }
        });
        let mut next: Vec<Individual> = ranked[..params.elitism].to_vec();
        while next.len() < params.population_size {
            let p1 = tournament_select(&state.population, params.tournament_size, &mut rng);
            let child = if rng_bool(&mut rng, params.crossover_rate) {
                let p2 = tournament_select(&state.population, params.tournament_size, &mut rng);
                crossover(&p1.genotype, &p2.genotype, &mut rng)
            } else {
                p1.genotype.clone()
            };
            let child = mutate(&child, params.mutation_rate, grammar, &mut rng);
            next.push(Individual::new(state.next_id, child));
            state.next_id += 1;
        }
        let counts = evaluate_population(problem, params, &root, &mut next, &mut state.cache, opts.workers)?;
        let gen_best = next.iter().fold(&next[0], |b, i| if better(i, b) { i } else { b });
        let prev = state.log.best.as_ref().expect("set after generation 0");
        if gen_best.fitness_or_floor() > prev.fitness_or_floor() {
            state.log.best = Some(gen_best.clone());
        }
        let best_ever = state.log.best.as_ref().map_or(f64::NEG_INFINITY, Individual::fitness_or_floor);
        state.log.records.push(record(g, &next, best_ever, counts, t0.elapsed().as_secs_f64()));
        state.population = next;
        state.generation = g;
        if let Some(p) = &opts.checkpoint {
            state.save(p)?;
        }
        log::info!("generation {g}: best {:.4} best-ever {best_ever:.4}", state.log.records.last().map_or(0.0, |r| r.best));
    }

    let best = state.log.best.clone().expect("set after generation 0");
    Ok(EvolveOutcome {
        best,
        log: state.log,
        finished: true,
    })
}

fn rng_bool(rng: &mut Rng, p: f64) -> bool {
    use rand::Rng as _;
    rng.random::<f64>() < p
}
