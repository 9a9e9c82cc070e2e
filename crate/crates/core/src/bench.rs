//! Benchmark harness: repeated independent trainings of each optimizer on
//! held-out data, with summary statistics and report tables.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Splits;
use crate::nn::{evaluate, train, Network, NnError, TrainConfig};
use crate::optim::Optimizer;
use crate::rng::Rng;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("scenario `{0}` has no optimizers")]
    NoSteppers(String),
    #[error("repetitions must be at least 1")]
    NoRepetitions,
    #[error("scenario needs a training group")]
    NoTrainingData,
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// A labelled optimizer under test.
#[derive(Clone, Debug)]
pub struct Stepper {
    pub label: String,
    pub optimizer: Optimizer,
}

#[derive(Clone, Debug)]
pub struct BenchmarkScenario {
    pub name: String,
    pub steppers: Vec<Stepper>,
    /// Layer widths, input first.
    pub dims: Vec<usize>,
    pub train: TrainConfig,
    pub repetitions: usize,
}

impl BenchmarkScenario {
    pub const DEFAULT_REPETITIONS: usize = 5;

    pub fn validate(&self) -> Result<(), BenchError> {
        if self.steppers.is_empty() {
            return Err(BenchError::NoSteppers(self.name.clone()));
        }
        if self.repetitions == 0 {
            return Err(BenchError::NoRepetitions);
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub repetition: usize,
    pub val_acc: f64,
    pub test_acc: f64,
    pub epochs_run: usize,
    pub failed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub stepper: String,
    pub runs: Vec<RunRecord>,
}

/// Mean and sample standard deviation (`n - 1`; zero for one value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

/// Ratio of mean test accuracy to mean validation accuracy.
pub fn generalization_rate(mean_val: f64, mean_test: f64) -> f64 {
    mean_test / mean_val
}

impl BenchResult {
    pub fn val(&self) -> Vec<f64> {
        self.runs.iter().map(|r| r.val_acc).collect()
    }

    pub fn test(&self) -> Vec<f64> {
        self.runs.iter().map(|r| r.test_acc).collect()
    }

    pub fn val_stats(&self) -> (f64, f64) {
        mean_std(&self.val())
    }

    pub fn test_stats(&self) -> (f64, f64) {
        mean_std(&self.test())
    }

    pub fn generalization_rate(&self) -> f64 {
        generalization_rate(self.val_stats().0, self.test_stats().0)
    }
}

#[derive(Clone, Debug)]
pub struct BenchReport {
    pub scenario: String,
    pub results: Vec<BenchResult>,
    /// Origin indices of every example the benchmark tested on.
    pub test_indices: BTreeSet<usize>,
}

fn one_run(s: &BenchmarkScenario, stepper: &Stepper, rep: usize, splits: &Splits, root: &Rng) -> Result<RunRecord, BenchError> {
    // Every optimizer sees the same initial weights and batch order in a
    // given repetition.
    let rng = root.child(rep as u64);
    let mut net = Network::new(&s.dims, rng.child_named("net").seed())?;
    let cfg = TrainConfig {
        shuffle_seed: rng.child_named("shuffle").seed(),
        ..s.train.clone()
    };
    let h = train(&mut net, &stepper.optimizer, &splits.trials[0], &splits.validation, &cfg)?;
    if h.failed {
        return Ok(RunRecord {
            repetition: rep,
            val_acc: 0.0,
            test_acc: 0.0,
            epochs_run: h.epochs_run,
            failed: true,
        });
    }
    Ok(RunRecord {
        repetition: rep,
        val_acc: evaluate(&net, &splits.validation)?,
        test_acc: evaluate(&net, &splits.test)?,
        epochs_run: h.epochs_run,
        failed: false,
    })
}

/// Train every stepper `repetitions` times on `splits.trials[0]` and score
/// on the validation and test partitions.
pub fn run_benchmark(s: &BenchmarkScenario, splits: &Splits, seed: u64) -> Result<BenchReport, BenchError> {
    s.validate()?;
    if splits.trials.is_empty() {
        return Err(BenchError::NoTrainingData);
    }
    let root = Rng::new(seed).child_named("benchmark");
    let jobs: Vec<(usize, usize)> = (0..s.steppers.len()).flat_map(|i| (0..s.repetitions).map(move |r| (i, r))).collect();
    let run = |&(i, r): &(usize, usize)| one_run(s, &s.steppers[i], r, splits, &root);
    #[cfg(feature = "parallel")]
    let records: Vec<Result<RunRecord, BenchError>> = {
        use rayon::prelude::*;
        jobs.par_iter().map(run).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let records: Vec<Result<RunRecord, BenchError>> = jobs.iter().map(run).collect();

    let mut results: Vec<BenchResult> = s
        .steppers
        .iter()
        .map(|st| BenchResult {
            stepper: st.label.clone(),
            runs: Vec::with_capacity(s.repetitions),
        })
        .collect();
    for ((i, _), rec) in jobs.iter().zip(records) {
        results[*i].runs.push(rec?);
    }
    Ok(BenchReport {
        scenario: s.name.clone(),
        results,
        test_indices: splits.test.index_set(),
    })
}

fn pct(v: f64) -> String {
    format!("{:.2}", v * 100.0)
}

/// CSV with one row per optimizer, columns in report-table order.
pub fn summarize_csv(results: &[BenchResult]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    let header = [
        "optimizer",
        "validation_mean",
        "validation_std",
        "test_mean",
        "test_std",
        "generalization_rate",
        "runs",
        "failed_runs",
    ];
    w.write_record(header).expect("in-memory write");
    for r in results {
        let (vm, vs) = r.val_stats();
        let (tm, ts) = r.test_stats();
        let failed = r.runs.iter().filter(|x| x.failed).count();
        let row = [
            r.stepper.clone(),
            vm.to_string(),
            vs.to_string(),
            tm.to_string(),
            ts.to_string(),
            r.generalization_rate().to_string(),
            r.runs.len().to_string(),
            failed.to_string(),
        ];
        w.write_record(&row).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 input")
}

/// Aligned text table: Optimizer, Validation Accuracy, Test Accuracy,
/// Generalization Rate.
pub fn summarize_table(results: &[BenchResult]) -> String {
    let header = ["Optimizer", "Validation Accuracy", "Test Accuracy", "Generalization Rate"];
    let rows: Vec<[String; 4]> = results
        .iter()
        .map(|r| {
            let (vm, vs) = r.val_stats();
            let (tm, ts) = r.test_stats();
            [
                r.stepper.clone(),
                format!("{} ± {}%", pct(vm), pct(vs)),
                format!("{} ± {}%", pct(tm), pct(ts)),
                format!("{}%", pct(r.generalization_rate())),
            ]
        })
        .collect();
    let mut widths = header.map(|h| h.chars().count());
    for row in &rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let line = |cells: &[String]| -> String {
        let padded: Vec<String> = cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c}{}", " ".repeat(w - c.chars().count())))
            .collect();
        padded.join(" | ").trim_end().to_string()
    };
    let mut out = line(&header.map(String::from)) + "\n";
    out += &widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("-+-");
    out.push('\n');
    for row in &rows {
        out += &line(row);
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{split, synthetic, SplitPlan, SyntheticKind};
    use crate::nn::EarlyStop;
    use crate::optim::builtin_default;

    fn result(name: &str, val: &[f64], test: &[f64]) -> BenchResult {
        BenchResult {
            stepper: name.into(),
            runs: val
                .iter()
                .zip(test)
                .enumerate()
                .map(|(i, (&v, &t))| RunRecord {
                    repetition: i,
                    val_acc: v,
                    test_acc: t,
                    epochs_run: 1,
                    failed: false,
                })
                .collect(),
        }
    }

    #[test]
    fn stats() {
        assert_eq!(mean_std(&[0.5, 0.5]), (0.5, 0.0));
        let (m, s) = mean_std(&[0.4, 0.6]);
        assert!((m - 0.5).abs() < 1e-15 && (s - 0.1414213562).abs() < 1e-9);
        assert_eq!(mean_std(&[0.7]).1, 0.0);
    }

    #[test]
    fn ratio_of_means() {
        let r = generalization_rate(93.05, 92.45);
        assert_eq!(format!("{:.2}", r * 100.0), "99.36");
        let br = result("x", &[0.9, 0.8], &[0.8, 0.8]);
        assert!((br.generalization_rate() - 0.8 / 0.85).abs() < 1e-15);
    }

    #[test]
    fn table_layout() {
        let t = summarize_table(&[result("ADES", &[0.9305, 0.9305], &[0.9245, 0.9245])]);
        let lines: Vec<&str> = t.lines().collect();
        assert!(lines[0].starts_with("Optimizer | Validation Accuracy | Test Accuracy | Generalization Rate"));
        assert!(lines[2].contains("93.05 ± 0.00%"));
        assert!(lines[2].ends_with("99.36%"));
        let csv = summarize_csv(&[result("a", &[0.5], &[0.5])]);
        assert!(csv.starts_with("optimizer,validation_mean,validation_std,test_mean,test_std,generalization_rate"));
        let quoted = summarize_csv(&[result("lr=0.1, tuned", &[0.5], &[0.5])]);
        assert!(quoted.lines().nth(1).unwrap().starts_with("\"lr=0.1, tuned\",0.5,0,"));
    }

    #[test]
    fn single_repetition_deterministic() {
        let d = synthetic(SyntheticKind::TwoGaussians, 300, 0.2, 0);
        let splits = split(&d, &SplitPlan::single(200, 50, 50, 1)).unwrap();
        let s = BenchmarkScenario {
            name: "t".into(),
            steppers: vec![Stepper {
                label: "adam".into(),
                optimizer: builtin_default("adam").unwrap(),
            }],
            dims: vec![2, 8, 2],
            train: TrainConfig {
                batch_size: 20,
                max_epochs: 3,
                early_stop: EarlyStop {
                    enabled: false,
                    patience: 1,
                },
                shuffle_seed: 0,
            },
            repetitions: 1,
        };
        let a = run_benchmark(&s, &splits, 7).unwrap();
        let b = run_benchmark(&s, &splits, 7).unwrap();
        assert_eq!(a.results, b.results);
        assert_eq!(a.results[0].test_stats().1, 0.0);
        assert_eq!(a.test_indices, splits.test.index_set());
    }

    #[test]
    fn empty_scenario_rejected() {
        let s = BenchmarkScenario {
            name: "none".into(),
            steppers: vec![],
            dims: vec![2, 2],
            train: TrainConfig::default(),
            repetitions: 5,
        };
        assert!(matches!(s.validate(), Err(BenchError::NoSteppers(_))));
    }
}
