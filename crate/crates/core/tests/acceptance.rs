//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line;
//! the test fails if any criterion fails.
//!
//! The Fashion-MNIST criteria read IDX files from `$LRFORGE_DATA_DIR`
//! (default: `data/fashion-mnist` at the workspace root).

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::time::{Duration, Instant};

use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestRng, TestRunner};

use lrforge::bench::{generalization_rate, mean_std, run_benchmark, BenchResult, BenchmarkScenario, RunRecord, Stepper};
use lrforge::data::{load_idx_dir, split, synthetic, Corpus, SplitPlan, SyntheticKind};
use lrforge::dsge::{map_genotype, EvoParams};
use lrforge::evolve::{alr_fitness, evolve, AlrProblem, RunOptions, Task, Trial};
use lrforge::grammar::{sigmoidal_constants, Grammar, Symbol};
use lrforge::hyperopt::{tune, SearchSpace, TuneOptions};
use lrforge::nn::{EarlyStop, Network, TrainConfig};
use lrforge::optim::{builtin, HyperParams, OptState, Optimizer, OptimizerSpec, StepCtx};
use lrforge::rng::Rng;
use lrforge::standard::{shipped_standard, STANDARD_MAX_DEPTH};
use lrforge::tensor::Tensor;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn data_dir() -> PathBuf {
    std::env::var_os("LRFORGE_DATA_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/fashion-mnist"))
}

fn within(elapsed: Duration, limit: Duration, detail: String) -> Outcome {
    if elapsed <= limit {
        Ok(format!("{detail} [{:.2}s]", elapsed.as_secs_f64()))
    } else {
        Err(format!("{detail} but took {:.2}s (limit {:.0}s)", elapsed.as_secs_f64(), limit.as_secs_f64()))
    }
}

// ---------------------------------------------------------------------------
// 1. interpreter and native steppers against direct recurrences

/// `(x, y, w)` state of a scalar trajectory.
type Scalar3 = (f64, f64, f64);

fn recurrence(name: &str, hp: &HyperParams, s: Scalar3, g: f64, t: i32) -> Scalar3 {
    let p = |k: &str| hp.get(k).unwrap();
    let (x, y, w) = s;
    match name {
        "sgd" => (x, y, w - p("lr") * g),
        "momentum" => {
            let v = p("mom") * x - p("lr") * g;
            (v, y, w + v)
        }
        "rmsprop" => {
            let a = p("rho") * x + (1.0 - p("rho")) * g * g;
            (a, y, w - p("lr") * g / (a.sqrt() + p("epsilon")))
        }
        "adam" => {
            let (b1, b2) = (p("beta1"), p("beta2"));
            let m = b1 * x + (1.0 - b1) * g;
            let v = b2 * y + (1.0 - b2) * g * g;
            let step = p("lr") * (1.0 - b2.powi(t)).sqrt() / (1.0 - b1.powi(t));
            (m, v, w - step * m / (v.sqrt() + p("epsilon")))
        }
        "ades" => {
            let (c1, c2) = (p("c1"), p("c2"));
            let v = (1.0 - c1) * y - (c1 * y * y + c2 * y * g + c2 * g);
            (x, v, w + v)
        }
        "sign" => {
            let sg = if g > 0.0 {
                1.0
            } else if g < 0.0 {
                -1.0
            } else {
                0.0
            };
            (x, y, w - p("lr") * sg)
        }
        _ => unreachable!(),
    }
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let names = ["sgd", "momentum", "rmsprop", "adam", "ades", "sign"];
    let worst = std::cell::Cell::new(0.0f64);
    for name in names {
        let mut runner = TestRunner::new_with_rng(
            Config {
                cases: 50,
                failure_persistence: None,
                ..Config::default()
            },
            TestRng::deterministic_rng(RngAlgorithm::ChaCha),
        );
        let strategy = (-2.0f64..2.0, prop::collection::vec(-3.0f64..3.0, 20), 1e-4f64..0.3);
        let result = runner.run(&strategy, |(w0, grads, lr)| {
            let mut hp = HyperParams::defaults(name).unwrap();
            if hp.0.contains_key("lr") {
                hp.set("lr", lr);
            }
            let opt = builtin(name, &hp).unwrap();
            let mut state = OptState::zeros(&[1]);
            let mut w = Tensor::from_vec(vec![w0]);
            let mut s: Scalar3 = (0.0, 0.0, w0);
            for (t, &g) in grads.iter().enumerate() {
                s = recurrence(name, &hp, s, g, t as i32 + 1);
                let ctx = StepCtx { t: t as u64 + 1, lr: f64::NAN };
                opt.step_in_place(&mut state, &mut w, &Tensor::from_vec(vec![g]), ctx).unwrap();
                let d = (w.data()[0] - s.2).abs();
                worst.set(worst.get().max(d));
                prop_assert!(d <= 1e-10, "{name} step {t}: |dw| = {d:e}");
            }
            Ok(())
        });
        if let Err(e) = result {
            return Err(e.to_string());
        }
    }
    within(start.elapsed(), Duration::from_secs(1), format!("6 optimizers x 50 trajectories x 20 steps, max |dw| {:.2e}", worst.get()))
}

// ---------------------------------------------------------------------------
// 2. backprop against central differences

fn criterion_2() -> Outcome {
    use rand::Rng as _;
    let start = Instant::now();
    let mut rng = Rng::new(2024);
    let mut net = Network::new(&[2, 16, 3], 5).unwrap();
    let x = Tensor::new(vec![8, 2], (0..16).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let labels = [0, 1, 2, 0, 1, 2, 1, 0];
    let (_, grads) = net.loss_and_grads(&x, &labels).unwrap();
    let h = 1e-5;
    let mut worst = 0.0f64;
    let sizes: Vec<usize> = net.params().iter().map(|p| p.len()).collect();
    for _ in 0..10 {
        let p = rng.random_range(0..sizes.len());
        let i = rng.random_range(0..sizes[p]);
        let orig = net.params()[p].data()[i];
        net.params_mut()[p].data_mut()[i] = orig + h;
        let up = net.loss(&x, &labels).unwrap();
        net.params_mut()[p].data_mut()[i] = orig - h;
        let down = net.loss(&x, &labels).unwrap();
        net.params_mut()[p].data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let analytic = grads[p].data()[i];
        let scale = numeric.abs().max(analytic.abs());
        let rel = if scale < 1e-10 { 0.0 } else { (numeric - analytic).abs() / scale };
        if rel >= 1e-4 {
            return Err(format!("param {p}[{i}]: analytic {analytic:e} vs numeric {numeric:e} (rel {rel:e})"));
        }
        worst = worst.max(rel);
    }
    within(start.elapsed(), Duration::from_secs(1), format!("10 parameters, max relative error {worst:.2e}"))
}

// ---------------------------------------------------------------------------
// 3. shipped genotypes reproduce standard optimizers

fn grammar_const(g: &Grammar, k: f64) -> f64 {
    let idx = ((k + 10.0) * 2.0).round() as usize;
    match g.expansions("x_const").unwrap()[idx].symbols.as_slice() {
        [Symbol::Terminal(t)] => t.parse().unwrap(),
        other => panic!("unexpected constant alternative {other:?}"),
    }
}

/// `(x, y, z, w)` after one step of the named optimizer with grammar
/// constants.
fn standard_step(name: &str, g: &Grammar, s: [f64; 4], grad: f64) -> [f64; 4] {
    let c = |k| grammar_const(g, k);
    let [x, y, z, w] = s;
    match name {
        "sgd" => [c(-4.5) * grad, y, z, w - c(-4.5) * grad],
        "momentum" => {
            let v = c(2.5) * x - c(-4.5) * grad;
            [v, y, z, w + v]
        }
        "rmsprop" => {
            let a = c(2.5) * x + c(-2.5) * grad * grad;
            let b = c(-7.0) * grad;
            [a, b, z, w - b / (a.sqrt() + c(-10.0))]
        }
        "adam_core" => {
            let m = c(2.0) * x + c(-2.0) * grad;
            let v = c(7.0) * y + c(-7.0) * grad * grad;
            let u = c(-7.0) * (m / (v.sqrt() + c(-10.0)));
            [m, v, u, w - u]
        }
        _ => unreachable!(),
    }
}

fn criterion_3() -> Outcome {
    use rand::Rng as _;
    let start = Instant::now();
    let g = Grammar::alr();
    let entries = shipped_standard();
    let names: BTreeSet<&str> = entries.iter().map(|e| e.name.as_str()).collect();
    for want in ["sgd", "momentum", "rmsprop", "adam_core"] {
        if !names.contains(want) {
            return Err(format!("no shipped genotype for {want}"));
        }
    }
    let mut worst = 0.0f64;
    for e in &entries {
        let m = map_genotype(&g, &e.genotype, g.start(), STANDARD_MAX_DEPTH, &mut Rng::new(0)).map_err(|err| err.to_string())?;
        if m.repaired {
            return Err(format!("{} genotype needed repair", e.name));
        }
        let spec = OptimizerSpec::parse(&m.text()).map_err(|err| format!("{}: {err}", e.name))?;
        let mut rng = Rng::new(3);
        for _ in 0..100 {
            let mut s = [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-2.0..2.0)];
            let mut state = OptState {
                x: Tensor::from_vec(vec![s[0]]),
                y: Tensor::from_vec(vec![s[1]]),
                z: Tensor::from_vec(vec![s[2]]),
            };
            let mut w = Tensor::from_vec(vec![s[3]]);
            for _ in 0..5 {
                let grad: f64 = rng.random_range(-3.0..3.0);
                let out = lrforge::optim::step(&spec, &state, &w, &Tensor::from_vec(vec![grad])).unwrap();
                s = standard_step(&e.name, &g, s, grad);
                let got = [out.state.x.data()[0], out.state.y.data()[0], out.state.z.data()[0], out.weights.data()[0]];
                for (a, b) in got.iter().zip(&s) {
                    let d = (a - b).abs();
                    if d.is_nan() || d > 1e-9 {
                        return Err(format!("{}: |delta| {d:e} ({a} vs {b})", e.name));
                    }
                    worst = worst.max(d);
                }
                (state, w) = (out.state, out.weights);
            }
        }
    }
    within(
        start.elapsed(),
        Duration::from_secs(5),
        format!("sgd, momentum, rmsprop, adam_core over 100 environments x 5 steps, max |delta| {worst:.2e}"),
    )
}

// ---------------------------------------------------------------------------
// 4. multi-trial fitness rules

fn criterion_4() -> Outcome {
    let start = Instant::now();
    let scripted = |scores: Vec<f64>| {
        let mut calls = 0usize;
        let r = alr_fitness(5, 0.8, |i| {
            calls += 1;
            Trial {
                accuracy: scores[i],
                failed: false,
            }
        });
        (r, calls)
    };
    let cases: Vec<(Vec<f64>, f64, usize)> = vec![
        (vec![0.85, 0.9, 0.82, 0.88, 0.84], 0.82, 5),
        (vec![0.3, 0.99, 0.99, 0.99, 0.99], 0.3, 1),
        (vec![0.95, 0.81, 0.7, 0.99, 0.99], 0.7, 3),
        (vec![0.8, 0.8, 0.8, 0.8, 0.8], 0.8, 5),
        (vec![0.9, 0.9, 0.9, 0.9, 0.79999], 0.79999, 5),
    ];
    for (scores, fitness, trials) in cases {
        let (r, calls) = scripted(scores.clone());
        if r.fitness != fitness || r.trials_run != trials || calls != trials || calls > 5 {
            return Err(format!("{scores:?}: fitness {} after {} trials", r.fitness, r.trials_run));
        }
        let below = scores[..trials].iter().any(|&s| s < 0.8);
        if r.cancelled_early != below {
            return Err(format!("{scores:?}: cancellation flag {}", r.cancelled_early));
        }
    }
    within(start.elapsed(), Duration::from_secs(1), "threshold, minimum and trial-count rules hold on 5 scripted cases".into())
}

// ---------------------------------------------------------------------------
// 5. evolution smoke run

fn smoke_task(seed: u64) -> Task {
    let d = synthetic(SyntheticKind::TwoGaussians, 800, 0.5, seed);
    let plan = SplitPlan {
        train_total: 500,
        per_trial: 100,
        trial_count: 5,
        validation: 150,
        test: 150,
        seed,
    };
    Task {
        splits: split(&d, &plan).unwrap(),
        dims: vec![2, 16, 2],
        train: TrainConfig {
            batch_size: 20,
            max_epochs: 10,
            early_stop: EarlyStop {
                enabled: true,
                patience: 5,
            },
            shuffle_seed: 0,
        },
        threshold: 0.8,
        trial_number: 5,
    }
}

fn criterion_5() -> Outcome {
    let start = Instant::now();
    let params = EvoParams {
        population_size: 20,
        generations: 30,
        tournament_size: 5,
        mutation_rate: 0.15,
        seed: 11,
        ..EvoParams::default()
    };
    let problem = AlrProblem {
        grammar: Grammar::alr(),
        task: smoke_task(11),
    };
    let out = evolve(&params, &problem, &RunOptions::default()).map_err(|e| e.to_string())?;
    let curve = out.log.best_ever_curve();
    if !curve.windows(2).all(|w| w[1] >= w[0]) {
        return Err(format!("best-ever curve not monotone: {curve:?}"));
    }
    let best = out.best.fitness.unwrap_or(0.0);
    if best < 0.8 {
        return Err(format!("best fitness {best:.4} < 0.8"));
    }
    within(
        start.elapsed(),
        Duration::from_secs(600),
        format!("best fitness {best:.4} after 30 generations; best: {}", out.best.phenotype.unwrap_or_default()),
    )
}

// ---------------------------------------------------------------------------
// 6. desk-scale Fashion-MNIST comparison

fn criterion_6() -> Outcome {
    let start = Instant::now();
    let pool = load_idx_dir(&data_dir(), "train").map_err(|e| format!("data unavailable: {e}"))?;
    if pool.len() != 60_000 || pool.features() != 784 {
        return Err(format!("unexpected training file shape {} x {}", pool.len(), pool.features()));
    }
    let splits = split(&pool, &SplitPlan::single(5000, 1000, 1000, 0)).map_err(|e| e.to_string())?;
    let steppers = ["ades", "adam", "sign"]
        .iter()
        .map(|n| Stepper {
            label: n.to_string(),
            optimizer: lrforge::optim::builtin_default(n).unwrap(),
        })
        .collect();
    let scenario = BenchmarkScenario {
        name: "fashion-desk".into(),
        steppers,
        dims: vec![784, 64, 10],
        train: TrainConfig {
            batch_size: 1000,
            max_epochs: 20,
            early_stop: EarlyStop {
                enabled: false,
                patience: 5,
            },
            shuffle_seed: 0,
        },
        repetitions: 5,
    };
    let report = run_benchmark(&scenario, &splits, 1).map_err(|e| e.to_string())?;
    let mean = |label: &str| report.results.iter().find(|r| r.stepper == label).unwrap().test_stats().0 * 100.0;
    let (ades, adam, sign) = (mean("ades"), mean("adam"), mean("sign"));
    let detail = format!("test accuracy ADES {ades:.2}%, Adam {adam:.2}%, Sign {sign:.2}%");
    if (ades - adam).abs() > 2.0 {
        return Err(format!("{detail}: ADES-Adam gap {:.2}pp > 2", (ades - adam).abs()));
    }
    if !(sign < ades && sign < adam) {
        return Err(format!("{detail}: Sign not strictly below both"));
    }
    within(start.elapsed(), Duration::from_secs(900), detail)
}

// ---------------------------------------------------------------------------
// 7. generalization rate

fn criterion_7() -> Outcome {
    let rate = generalization_rate(93.05, 92.45);
    let text = format!("{:.2}%", rate * 100.0);
    let runs = |v: f64, t: f64| RunRecord {
        repetition: 0,
        val_acc: v,
        test_acc: t,
        epochs_run: 1,
        failed: false,
    };
    // means of 93.05 / 92.45 reached from unequal runs: ratio of means, not
    // mean of ratios
    let r = BenchResult {
        stepper: "ades".into(),
        runs: vec![runs(0.9405, 0.9145), runs(0.9205, 0.9345)],
    };
    let via_result = format!("{:.2}%", r.generalization_rate() * 100.0);
    let (mv, _) = mean_std(&r.val());
    if text == "99.36%" && via_result == "99.36%" && (mv - 0.9305).abs() < 1e-12 {
        Ok(format!("93.05 / 92.45 -> {text}"))
    } else {
        Err(format!("got {text} and {via_result}"))
    }
}

// ---------------------------------------------------------------------------
// 8. sigmoid constant endpoints

fn criterion_8() -> Outcome {
    let c = sigmoidal_constants(-10.0, 10.0, 41);
    let lo = format!("{:.8e}", c[0]);
    let hi = format!("{:.8e}", c[40]);
    let g = Grammar::alr();
    let first = grammar_const(&g, -10.0);
    let last = grammar_const(&g, 10.0);
    let ok = lo == "4.53978687e-5" && hi == "9.99954602e-1" && first == 4.53978687e-05 && last == 9.99954602e-01;
    if ok {
        Ok(format!("sigma(-10) = {lo}, sigma(10) = {hi}; grammar agrees"))
    } else {
        Err(format!("got {lo}, {hi}; grammar {first:e}, {last:e}"))
    }
}

// ---------------------------------------------------------------------------
// 9. benchmark never tests on evolution data

fn criterion_9() -> Outcome {
    let start = Instant::now();
    let corpus = Corpus::from_idx_dir(&data_dir()).map_err(|e| format!("data unavailable: {e}"))?;
    let plan = SplitPlan {
        train_total: 2500,
        per_trial: 500,
        trial_count: 5,
        validation: 500,
        test: 500,
        seed: 9,
    };
    let evo_splits = corpus.evolution_splits(&plan).map_err(|e| e.to_string())?;
    let evolution_indices = evo_splits.all_indices();
    let train = TrainConfig {
        batch_size: 100,
        max_epochs: 2,
        early_stop: EarlyStop {
            enabled: false,
            patience: 5,
        },
        shuffle_seed: 0,
    };
    let problem = AlrProblem {
        grammar: Grammar::alr(),
        task: Task {
            splits: evo_splits,
            dims: vec![784, 16, 10],
            train: train.clone(),
            threshold: 0.5,
            trial_number: 5,
        },
    };
    let params = EvoParams {
        population_size: 6,
        generations: 2,
        tournament_size: 3,
        seed: 9,
        ..EvoParams::default()
    };
    let evolved = evolve(&params, &problem, &RunOptions::default()).map_err(|e| e.to_string())?;
    let spec = OptimizerSpec::parse(evolved.best.phenotype.as_deref().unwrap_or_default()).map_err(|e| e.to_string())?;
    let bench_splits = corpus.benchmark_splits(2000, 500, 2000, 10).map_err(|e| e.to_string())?;
    let scenario = BenchmarkScenario {
        name: "hygiene".into(),
        steppers: vec![
            Stepper {
                label: "evolved".into(),
                optimizer: Optimizer::Interpreted(spec),
            },
            Stepper {
                label: "adam".into(),
                optimizer: lrforge::optim::builtin_default("adam").unwrap(),
            },
        ],
        dims: vec![784, 16, 10],
        train,
        repetitions: 2,
    };
    let report = run_benchmark(&scenario, &bench_splits, 10).map_err(|e| e.to_string())?;
    let overlap = report.test_indices.intersection(&evolution_indices).count();
    if report.test_indices.is_empty() || evolution_indices.is_empty() {
        return Err("empty index record".into());
    }
    if overlap != 0 {
        return Err(format!("{overlap} benchmark test examples were used during evolution"));
    }
    Ok(format!(
        "{} benchmark test indices, {} evolution indices, intersection empty [{:.2}s]",
        report.test_indices.len(),
        evolution_indices.len(),
        start.elapsed().as_secs_f64()
    ))
}

// ---------------------------------------------------------------------------
// 10. tuner on a closed-form objective

fn criterion_10() -> Outcome {
    let start = Instant::now();
    let space = SearchSpace::for_family("sgd").unwrap();
    let mut found = Vec::new();
    for seed in 0..10 {
        let out = tune(&space, 25, seed, TuneOptions::default(), |v, _| -(v[0].log10() + 2.0).powi(2)).map_err(|e| e.to_string())?;
        if out.history.len() != 25 {
            return Err(format!("seed {seed}: {} evaluations", out.history.len()));
        }
        let lr = out.best.params[0].1;
        if !(lr / 0.01 <= 1.5 && 0.01 / lr <= 1.5) {
            return Err(format!("seed {seed}: best lr {lr:e} not within x1.5 of 1e-2"));
        }
        found.push(lr);
    }
    let spread = found.iter().map(|lr| (lr / 0.01).log10().abs()).fold(0.0f64, f64::max);
    within(
        start.elapsed(),
        Duration::from_secs(60),
        format!("10/10 seeds within x1.5 of 1e-2 (worst factor {:.3})", 10f64.powf(spread)),
    )
}

#[test]
fn acceptance_suite() {
    let criteria: [Criterion; 10] = [
        ("1 optimizer-oracle equivalence", criterion_1),
        ("2 gradient correctness", criterion_2),
        ("3 grammar reproducibility", criterion_3),
        ("4 fitness semantics", criterion_4),
        ("5 evolution smoke", criterion_5),
        ("6 desk-scale ADES vs Adam", criterion_6),
        ("7 generalization rate", criterion_7),
        ("8 sigmoid constant endpoints", criterion_8),
        ("9 benchmark data hygiene", criterion_9),
        ("10 tuner sanity", criterion_10),
    ];
    let mut failures = Vec::new();
    for (name, f) in criteria {
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("PASS  criterion {name}: {detail}"),
            Err(detail) => {
                println!("FAIL  criterion {name}: {detail}");
                failures.push(name);
            }
        }
    }
    assert!(failures.is_empty(), "failed criteria: {failures:?}");
}
