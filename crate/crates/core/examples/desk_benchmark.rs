//! Fashion-MNIST desk benchmark: 784-64-10 network, 5000/1000/1000 examples
//! from the training file, 20 epochs, five repetitions.
//!
//! `cargo run --release -p lrforge --example desk_benchmark -- [data_dir] [batch_size]`

use std::path::PathBuf;

use lrforge::bench::{run_benchmark, summarize_table, BenchmarkScenario, Stepper};
use lrforge::data::{load_idx_dir, split, SplitPlan};
use lrforge::nn::{EarlyStop, TrainConfig};
use lrforge::optim::builtin_default;

fn main() {
    let mut args = std::env::args().skip(1);
    let dir = PathBuf::from(args.next().unwrap_or_else(|| "data/fashion-mnist".into()));
    let batch: usize = args.next().map_or(100, |b| b.parse().expect("batch size"));
    let pool = load_idx_dir(&dir, "train").expect("training file");
    let splits = split(&pool, &SplitPlan::single(5000, 1000, 1000, 0)).expect("split");
    let steppers = ["ades", "adam", "sign"]
        .iter()
        .map(|n| Stepper {
            label: n.to_string(),
            optimizer: builtin_default(n).expect("built-in"),
        })
        .collect();
    let scenario = BenchmarkScenario {
        name: "desk".into(),
        steppers,
        dims: vec![784, 64, 10],
        train: TrainConfig {
            batch_size: batch,
            max_epochs: 20,
            early_stop: EarlyStop {
                enabled: false,
                patience: 5,
            },
            shuffle_seed: 0,
        },
        repetitions: 5,
    };
    let t = std::time::Instant::now();
    let report = run_benchmark(&scenario, &splits, 1).expect("benchmark");
    print!("{}", summarize_table(&report.results));
    println!("batch {batch}: {:.1}s", t.elapsed().as_secs_f64());
}
