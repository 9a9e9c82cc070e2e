//! Parallel versus sequential scoring of one evolution wave.
//!
//! Build with `--no-default-features` to confirm the fallback path compiles;
//! with the default `parallel` feature both variants are measured here.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use lrforge::data::{split, synthetic, SplitPlan, SyntheticKind};
use lrforge::dsge::{map_genotype, random_genotype};
use lrforge::evolve::{score_phenotypes, score_phenotypes_sequential, AlrProblem, Problem, Task};
use lrforge::grammar::Grammar;
use lrforge::nn::{EarlyStop, TrainConfig};
use lrforge::rng::Rng;

fn problem() -> AlrProblem {
    let d = synthetic(SyntheticKind::TwoGaussians, 600, 0.5, 3);
    let plan = SplitPlan {
        train_total: 400,
        per_trial: 80,
        trial_count: 5,
        validation: 100,
        test: 100,
        seed: 3,
    };
    AlrProblem {
        grammar: Grammar::alr(),
        task: Task {
            splits: split(&d, &plan).unwrap(),
            dims: vec![2, 16, 2],
            train: TrainConfig {
                batch_size: 20,
                max_epochs: 5,
                early_stop: EarlyStop {
                    enabled: false,
                    patience: 1,
                },
                shuffle_seed: 0,
            },
            threshold: 0.0,
            trial_number: 5,
        },
    }
}

fn wave(p: &AlrProblem, n: u64) -> Vec<String> {
    let g = p.grammar();
    let root = Rng::new(17);
    (0..n)
        .map(|i| {
            let geno = random_genotype(g, 6, &mut root.child(i)).unwrap();
            let m = map_genotype(g, &geno, g.start(), 6, &mut root.child(i)).unwrap();
            p.canonical(&m.tree.text())
        })
        .collect()
}

fn bench_wave(c: &mut Criterion) {
    let p = problem();
    let root = Rng::new(0);
    let mut group = c.benchmark_group("evolution_wave");
    group.sample_size(10);
    for n in [8u64, 20] {
        let keys = wave(&p, n);
        group.bench_with_input(BenchmarkId::new("sequential", n), &keys, |b, k| {
            b.iter(|| score_phenotypes_sequential(&p, k, &root))
        });
        group.bench_with_input(BenchmarkId::new("parallel", n), &keys, |b, k| {
            b.iter(|| score_phenotypes(&p, k, &root, None).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, bench_wave);
criterion_main!(benches);
