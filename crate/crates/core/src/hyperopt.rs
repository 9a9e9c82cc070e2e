//! Bayesian optimization of optimizer constants: a Gaussian-process
//! surrogate with a squared-exponential kernel and expected-improvement
//! proposals, seeded by a rotated Halton design.

use std::fmt;
use std::fmt::Write as _;

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};
use thiserror::Error;

use crate::evolve::Task;
use crate::optim::{builtin, HyperParams, OptimError};
use crate::rng::Rng;

#[derive(Debug, Error)]
pub enum TuneError {
    #[error("budget must be at least 5, got {0}")]
    Budget(usize),
    #[error("parameter `{0}` has invalid bounds")]
    Bounds(String),
    #[error("unknown optimizer family `{0}`")]
    Family(String),
    #[error("history is empty")]
    EmptyHistory,
    #[error(transparent)]
    Optim(#[from] OptimError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub lower: f64,
    pub upper: f64,
    /// Search uniformly in log space.
    pub log: bool,
}

impl ParamSpec {
    pub fn linear(name: &str, lower: f64, upper: f64) -> Self {
        Self {
            name: name.into(),
            lower,
            upper,
            log: false,
        }
    }

    pub fn log(name: &str, lower: f64, upper: f64) -> Self {
        Self {
            name: name.into(),
            lower,
            upper,
            log: true,
        }
    }

    /// Map `u` in `[0, 1]` to a parameter value.
    pub fn from_unit(&self, u: f64) -> f64 {
        let u = u.clamp(0.0, 1.0);
        if self.log {
            (self.lower.ln() + u * (self.upper.ln() - self.lower.ln())).exp().clamp(self.lower, self.upper)
        } else {
            self.lower + u * (self.upper - self.lower)
        }
    }

    pub fn to_unit(&self, v: f64) -> f64 {
        if self.log {
            (v.ln() - self.lower.ln()) / (self.upper.ln() - self.lower.ln())
        } else {
            (v - self.lower) / (self.upper - self.lower)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub params: Vec<ParamSpec>,
}

pub const LR_RANGE: (f64, f64) = (1e-5, 1.0);
pub const DECAY_RANGE: (f64, f64) = (0.5, 0.9999);

impl SearchSpace {
    pub fn validate(&self) -> Result<(), TuneError> {
        for p in &self.params {
            let ok = p.lower.is_finite() && p.upper.is_finite() && p.lower < p.upper && (!p.log || p.lower > 0.0);
            if !ok {
                return Err(TuneError::Bounds(p.name.clone()));
            }
        }
        Ok(())
    }

    pub fn dims(&self) -> usize {
        self.params.len()
    }

    pub fn from_unit(&self, u: &[f64]) -> Vec<f64> {
        self.params.iter().zip(u).map(|(p, &x)| p.from_unit(x)).collect()
    }

    /// Default space for an optimizer family.
    pub fn for_family(family: &str) -> Result<SearchSpace, TuneError> {
        let lr = || ParamSpec::log("lr", LR_RANGE.0, LR_RANGE.1);
        let decay = |n: &str| ParamSpec::linear(n, DECAY_RANGE.0, DECAY_RANGE.1);
        let params = match family {
            "sgd" => vec![lr()],
            "momentum" | "nesterov" => vec![lr(), decay("mom")],
            "rmsprop" => vec![lr(), decay("rho")],
            "adam" => vec![lr(), decay("beta1"), decay("beta2")],
            "ades" => vec![decay("beta1"), decay("beta2")],
            other => return Err(TuneError::Family(other.to_string())),
        };
        Ok(SearchSpace { params })
    }
}

/// Constants for `builtin(family, ..)` from searched values. The ADES
/// constants are reached through decay rates: `c1 = 1 - beta2`,
/// `c2 = 1 - beta1`.
pub fn family_hyperparams(family: &str, space: &SearchSpace, values: &[f64]) -> Result<HyperParams, TuneError> {
    let mut hp = HyperParams::defaults(family)?;
    for (p, &v) in space.params.iter().zip(values) {
        match (family, p.name.as_str()) {
            ("ades", "beta1") => hp.set("c2", 1.0 - v),
            ("ades", "beta2") => hp.set("c1", 1.0 - v),
            _ => hp.set(&p.name, v),
        }
    }
    Ok(hp)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TuneTrial {
    pub iteration: usize,
    pub params: Vec<(String, f64)>,
    pub objective: f64,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct TuneOptions {
    /// Skip the surrogate and sample uniformly (in unit space) throughout.
    pub random_search: bool,
}

#[derive(Clone, Debug)]
pub struct TuneOutcome {
    pub best: TuneTrial,
    pub history: Vec<TuneTrial>,
}

fn first_primes(n: usize) -> Vec<u64> {
    let mut out = Vec::new();
    let mut k = 2u64;
    while out.len() < n {
        if (2..k).take_while(|d| d * d <= k).all(|d| !k.is_multiple_of(d)) {
            out.push(k);
        }
        k += 1;
    }
    out
}

fn radical_inverse(mut i: u64, base: u64) -> f64 {
    let mut f = 1.0;
    let mut r = 0.0;
    while i > 0 {
        f /= base as f64;
        r += f * (i % base) as f64;
        i /= base;
    }
    r
}

/// First `n` Halton points in `[0, 1)^d` with a random toroidal shift.
pub fn halton(n: usize, d: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    let bases = first_primes(d);
    let shift: Vec<f64> = (0..d).map(|_| rng.random::<f64>()).collect();
    (1..=n as u64)
        .map(|i| bases.iter().zip(&shift).map(|(&b, s)| (radical_inverse(i, b) + s).fract()).collect())
        .collect()
}

/// Lower-triangular Cholesky factor of a symmetric positive-definite matrix
/// stored row-major; `None` if not positive definite.
fn cholesky(a: &[f64], n: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i * n + k] * l[j * n + k]).sum();
            if i == j {
                let d = a[i * n + i] - s;
                if d <= 0.0 || !d.is_finite() {
                    return None;
                }
                l[i * n + i] = d.sqrt();
            } else {
                l[i * n + j] = (a[i * n + j] - s) / l[j * n + j];
            }
        }
    }
    Some(l)
}

fn solve_lower(l: &[f64], n: usize, b: &[f64]) -> Vec<f64> {
    let mut x = vec![0.0; n];
    for i in 0..n {
        let s: f64 = (0..i).map(|k| l[i * n + k] * x[k]).sum();
        x[i] = (b[i] - s) / l[i * n + i];
    }
    x
}

fn solve_upper_t(l: &[f64], n: usize, b: &[f64]) -> Vec<f64> {
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|k| l[k * n + i] * x[k]).sum();
        x[i] = (b[i] - s) / l[i * n + i];
    }
    x
}

/// Gaussian process on standardized targets with unit signal variance.
struct Gp {
    xs: Vec<Vec<f64>>,
    l: Vec<f64>,
    alpha: Vec<f64>,
    length: f64,
    y_mean: f64,
    y_std: f64,
}

fn se_kernel(a: &[f64], b: &[f64], length: f64) -> f64 {
    let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
    (-0.5 * d2 / (length * length)).exp()
}

impl Gp {
    const LENGTHS: [f64; 6] = [0.05, 0.1, 0.2, 0.3, 0.5, 1.0];
    const NOISES: [f64; 3] = [1e-6, 1e-3, 1e-1];

    /// Fit, choosing length scale and noise by marginal likelihood.
    fn fit(xs: &[Vec<f64>], ys: &[f64]) -> Option<Gp> {
        let n = xs.len();
        let y_mean = ys.iter().sum::<f64>() / n as f64;
        let y_std = (ys.iter().map(|y| (y - y_mean).powi(2)).sum::<f64>() / n as f64).sqrt().max(1e-12);
        let y: Vec<f64> = ys.iter().map(|v| (v - y_mean) / y_std).collect();
        let mut best: Option<(f64, Gp)> = None;
        for &length in &Self::LENGTHS {
            for &noise in &Self::NOISES {
                let mut k = vec![0.0; n * n];
                for i in 0..n {
                    for j in 0..n {
                        k[i * n + j] = se_kernel(&xs[i], &xs[j], length) + if i == j { noise } else { 0.0 };
                    }
                }
                let Some(l) = cholesky(&k, n) else { continue };
                let alpha = solve_upper_t(&l, n, &solve_lower(&l, n, &y));
                let fit: f64 = y.iter().zip(&alpha).map(|(a, b)| a * b).sum();
                let log_det: f64 = (0..n).map(|i| l[i * n + i].ln()).sum();
                let lml = -0.5 * fit - log_det;
                if best.as_ref().is_none_or(|(b, _)| lml > *b) {
                    best = Some((
                        lml,
                        Gp {
                            xs: xs.to_vec(),
                            l,
                            alpha,
                            length,
                            y_mean,
                            y_std,
                        },
                    ));
                }
            }
        }
        best.map(|(_, gp)| gp)
    }

    /// Posterior mean and standard deviation in standardized units.
    fn predict(&self, x: &[f64]) -> (f64, f64) {
        let n = self.xs.len();
        let ks: Vec<f64> = self.xs.iter().map(|xi| se_kernel(xi, x, self.length)).collect();
        let mu: f64 = ks.iter().zip(&self.alpha).map(|(a, b)| a * b).sum();
        let v = solve_lower(&self.l, n, &ks);
        let var = (1.0 - v.iter().map(|t| t * t).sum::<f64>()).max(1e-12);
        (mu, var.sqrt())
    }

    fn expected_improvement(&self, x: &[f64], best: f64, normal: &Normal) -> f64 {
        let (mu, sd) = self.predict(x);
        let best = (best - self.y_mean) / self.y_std;
        let imp = mu - best - 0.01;
        let z = imp / sd;
        imp * normal.cdf(z) + sd * normal.pdf(z)
    }
}

/// Maximize expected improvement: random candidates, then pattern search
/// from the most promising few.
fn propose(gp: &Gp, d: usize, best: f64, rng: &mut Rng) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    let ei = |x: &[f64]| gp.expected_improvement(x, best, &normal);
    let mut pool: Vec<(f64, Vec<f64>)> = (0..512 * d.max(1))
        .map(|_| {
            let x: Vec<f64> = (0..d).map(|_| rng.random::<f64>()).collect();
            (ei(&x), x)
        })
        .collect();
    for xi in &gp.xs {
        pool.push((ei(xi), xi.clone()));
    }
    pool.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut winner = pool[0].clone();
    for (mut val, mut x) in pool.into_iter().take(8) {
        let mut step = 0.05;
        while step > 1e-4 {
            let mut moved = false;
            for k in 0..d {
                for dir in [-1.0, 1.0] {
                    let mut y = x.clone();
                    y[k] = (y[k] + dir * step).clamp(0.0, 1.0);
                    let v = ei(&y);
                    if v > val {
                        (val, x, moved) = (v, y, true);
                    }
                }
            }
            if !moved {
                step *= 0.5;
            }
        }
        if val > winner.0 {
            winner = (val, x);
        }
    }
    winner.1
}

/// Sequential model-based search maximizing `objective` (non-finite values
/// count as 0). Points are proposed in the unit cube and mapped through
/// `space`; `objective` receives values in `space` order.
pub fn tune(
    space: &SearchSpace,
    budget: usize,
    seed: u64,
    options: TuneOptions,
    mut objective: impl FnMut(&[f64], u64) -> f64,
) -> Result<TuneOutcome, TuneError> {
    space.validate()?;
    if budget < 5 {
        return Err(TuneError::Budget(budget));
    }
    let d = space.dims();
    let root = Rng::new(seed).child_named("tune");
    let n_init = if options.random_search { budget } else { 5.max(budget / 5) };
    let init = if options.random_search {
        let mut r = root.child_named("random");
        (0..budget).map(|_| (0..d).map(|_| r.random::<f64>()).collect()).collect()
    } else {
        halton(n_init, d, &mut root.child_named("design"))
    };
    let mut xs: Vec<Vec<f64>> = Vec::with_capacity(budget);
    let mut ys: Vec<f64> = Vec::with_capacity(budget);
    let mut history = Vec::with_capacity(budget);
    for it in 0..budget {
        let x = if let Some(point) = init.get(it) {
            point.clone()
        } else {
            let best = ys.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut prng = root.child_named("propose").child(it as u64);
            match Gp::fit(&xs, &ys) {
                Some(gp) => propose(&gp, d, best, &mut prng),
                None => (0..d).map(|_| prng.random::<f64>()).collect(),
            }
        };
        let values = space.from_unit(&x);
        let trial_seed = root.child(it as u64).seed();
        let y = objective(&values, trial_seed);
        let y = if y.is_finite() { y } else { 0.0 };
        history.push(TuneTrial {
            iteration: it,
            params: space.params.iter().map(|p| p.name.clone()).zip(values).collect(),
            objective: y,
            seed: trial_seed,
        });
        xs.push(x);
        ys.push(y);
    }
    let best = best_trial(&history)?.clone();
    Ok(TuneOutcome { best, history })
}

/// Highest objective; ties go to the earliest trial.
pub fn best_trial(history: &[TuneTrial]) -> Result<&TuneTrial, TuneError> {
    let mut it = history.iter();
    let mut best = it.next().ok_or(TuneError::EmptyHistory)?;
    for t in it {
        if t.objective > best.objective {
            best = t;
        }
    }
    Ok(best)
}

/// Tune a built-in optimizer family on a training task; the objective is
/// the test accuracy of one training run.
pub fn tune_optimizer(family: &str, space: &SearchSpace, budget: usize, task: &Task, seed: u64, options: TuneOptions) -> Result<TuneOutcome, TuneError> {
    HyperParams::defaults(family).map_err(|_| TuneError::Family(family.to_string()))?;
    tune(space, budget, seed, options, |values, s| {
        let Ok(hp) = family_hyperparams(family, space, values) else { return 0.0 };
        match builtin(family, &hp) {
            Ok(opt) => {
                let t = task.run_trial(&opt, 0, &Rng::new(s));
                if t.failed {
                    0.0
                } else {
                    t.accuracy
                }
            }
            Err(_) => 0.0,
        }
    })
}

/// One line of a tuning summary table.
#[derive(Clone, Debug, PartialEq)]
pub struct BestRow {
    pub optimizer: String,
    pub parameters: String,
    pub test_accuracy: f64,
}

impl fmt::Display for BestRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} | {} | {:.2}%", self.optimizer, self.parameters, self.test_accuracy * 100.0)
    }
}

/// Summary row (Optimizer, Parameters, Test Accuracy) for the best trial.
pub fn report_best(optimizer: &str, history: &[TuneTrial]) -> Result<BestRow, TuneError> {
    let best = best_trial(history)?;
    let parameters = best.params.iter().map(|(k, v)| format!("{k}={v:.10}")).collect::<Vec<_>>().join(", ");
    Ok(BestRow {
        optimizer: optimizer.to_string(),
        parameters,
        test_accuracy: best.objective,
    })
}

/// `iteration,<param...>,objective`
pub fn history_csv(history: &[TuneTrial]) -> String {
    let mut s = String::from("iteration");
    if let Some(first) = history.first() {
        for (k, _) in &first.params {
            s.push(',');
            s.push_str(k);
        }
    }
    s.push_str(",objective\n");
    for t in history {
        let _ = write!(s, "{}", t.iteration);
        for (_, v) in &t.params {
            let _ = write!(s, ",{v}");
        }
        let _ = writeln!(s, ",{}", t.objective);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadratic(values: &[f64], _: u64) -> f64 {
        -(values[0].log10() + 2.0).powi(2)
    }

    #[test]
    fn cholesky_solves() {
        let a = [4.0, 2.0, 2.0, 3.0];
        let l = cholesky(&a, 2).unwrap();
        let x = solve_upper_t(&l, 2, &solve_lower(&l, 2, &[1.0, 2.0]));
        assert!((4.0 * x[0] + 2.0 * x[1] - 1.0).abs() < 1e-12);
        assert!((2.0 * x[0] + 3.0 * x[1] - 2.0).abs() < 1e-12);
        assert!(cholesky(&[1.0, 2.0, 2.0, 1.0], 2).is_none());
    }

    #[test]
    fn halton_in_unit_cube() {
        let pts = halton(50, 3, &mut Rng::new(1));
        assert!(pts.iter().flatten().all(|v| (0.0..1.0).contains(v)));
        assert_ne!(pts, halton(50, 3, &mut Rng::new(2)));
    }

    #[test]
    fn budget_five_is_initial_design_only() {
        let space = SearchSpace::for_family("sgd").unwrap();
        let out = tune(&space, 5, 3, TuneOptions::default(), quadratic).unwrap();
        let design = halton(5, 1, &mut Rng::new(3).child_named("tune").child_named("design"));
        for (t, u) in out.history.iter().zip(design) {
            assert!((t.params[0].1 - space.params[0].from_unit(u[0])).abs() < 1e-15);
        }
        assert!(tune(&space, 4, 3, TuneOptions::default(), quadratic).is_err());
    }

    #[test]
    fn finds_analytic_optimum() {
        let space = SearchSpace::for_family("sgd").unwrap();
        for seed in 0..3 {
            let out = tune(&space, 25, seed, TuneOptions::default(), quadratic).unwrap();
            let lr = out.best.params[0].1;
            assert!(lr / 0.01 < 1.5 && 0.01 / lr < 1.5, "seed {seed}: {lr}");
        }
    }

    #[test]
    fn proposals_respect_bounds() {
        let space = SearchSpace::for_family("adam").unwrap();
        let out = tune(&space, 12, 9, TuneOptions::default(), |v, _| v[1] - v[2]).unwrap();
        for t in &out.history {
            for ((_, v), p) in t.params.iter().zip(&space.params) {
                assert!(*v >= p.lower && *v <= p.upper);
            }
        }
        let best = out.history.iter().map(|t| t.objective).fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(out.best.objective, best);
    }

    #[test]
    fn ades_decay_mapping() {
        let space = SearchSpace::for_family("ades").unwrap();
        let hp = family_hyperparams("ades", &space, &[0.9800744569, 0.9968261576]).unwrap();
        assert!((hp.get("c2").unwrap() - (1.0 - 0.9800744569)).abs() < 1e-15);
        assert!((hp.get("c1").unwrap() - (1.0 - 0.9968261576)).abs() < 1e-15);
    }

    #[test]
    fn ties_go_to_earliest() {
        let mk = |i, o| TuneTrial {
            iteration: i,
            params: vec![("lr".into(), 0.1 * (i + 1) as f64)],
            objective: o,
            seed: 0,
        };
        let h = vec![mk(0, 0.5), mk(1, 0.9), mk(2, 0.9)];
        assert_eq!(best_trial(&h).unwrap().iteration, 1);
        let row = report_best("adam", &h[..1]).unwrap();
        assert_eq!(row.to_string(), "adam | lr=0.1000000000 | 50.00%");
        assert!(matches!(report_best("adam", &[]), Err(TuneError::EmptyHistory)));
    }

    #[test]
    fn deterministic() {
        let space = SearchSpace::for_family("rmsprop").unwrap();
        let f = |v: &[f64], _: u64| -(v[0].log10() + 3.0).powi(2) - (v[1] - 0.9).powi(2);
        let a = tune(&space, 10, 4, TuneOptions::default(), f).unwrap();
        let b = tune(&space, 10, 4, TuneOptions::default(), f).unwrap();
        assert_eq!(a.history, b.history);
        assert!(history_csv(&a.history).starts_with("iteration,lr,rho,objective\n"));
    }
}
