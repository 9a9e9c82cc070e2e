//! Standard optimizers written in the adaptive grammar, their genotypes and
//! the structural checks a grammar must pass.

use std::collections::BTreeMap;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::dsge::{encode, map_genotype, Genotype};
use crate::grammar::{Grammar, Symbol};
use crate::optim::{step, OptState, OptimizerSpec};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Genotypes shipped with the adaptive grammar.
pub const STANDARD_GENOTYPES_JSON: &str = include_str!("../grammars/alr_standard_genotypes.json");

/// Depth limit used when encoding and mapping the standard genotypes.
pub const STANDARD_MAX_DEPTH: usize = 6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StandardEntry {
    pub name: String,
    pub genotype: Genotype,
}

/// Plain scalar recurrences for the optimizers the grammar can spell.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Oracle {
    Sgd { lr: f64 },
    Momentum { lr: f64, mom: f64 },
    /// `c` is the grammar's constant for `1 - rho`.
    Rmsprop { lr: f64, rho: f64, c: f64, eps: f64 },
    /// Adam without bias correction; `c1`, `c2` stand for `1 - b1`, `1 - b2`.
    AdamCore { lr: f64, b1: f64, c1: f64, b2: f64, c2: f64, eps: f64 },
}

impl Oracle {
    /// One step on `(x, y, z, w)` with gradient `g`.
    pub fn step(&self, s: [f64; 4], g: f64) -> [f64; 4] {
        let [x, y, z, w] = s;
        match *self {
            Oracle::Sgd { lr } => {
                let x = lr * g;
                [x, y, z, w - x]
            }
            Oracle::Momentum { lr, mom } => {
                let x = mom * x - lr * g;
                [x, y, z, w + x]
            }
            Oracle::Rmsprop { lr, rho, c, eps } => {
                let x = rho * x + c * g * g;
                let y = lr * g;
                [x, y, z, w - y / (x.sqrt() + eps)]
            }
            Oracle::AdamCore { lr, b1, c1, b2, c2, eps } => {
                let x = b1 * x + c1 * g;
                let y = b2 * y + c2 * g * g;
                let z = lr * (x / (y.sqrt() + eps));
                [x, y, z, w - z]
            }
        }
    }
}

/// Sigmoid constant `sigma(k)` as spelled in the grammar's constant list
/// (`k = -10, -9.5, ..., 10`).
fn const_text(grammar: &Grammar, k: f64) -> Option<String> {
    let alts = grammar.expansions("x_const").ok()?;
    let idx = ((k + 10.0) * 2.0).round() as usize;
    match alts.get(idx)?.symbols.as_slice() {
        [Symbol::Terminal(t)] => Some(t.clone()),
        _ => None,
    }
}

/// `(name, phenotype text, oracle)` for each standard optimizer.
pub fn standard_targets(grammar: &Grammar) -> Option<Vec<(&'static str, String, Oracle)>> {
    let c = |k: f64| const_text(grammar, k);
    let v = |t: &str| t.parse::<f64>().ok();
    let (lr, mom, rho, one_m_rho, lr_small, eps) = (c(-4.5)?, c(2.5)?, c(2.5)?, c(-2.5)?, c(-7.0)?, c(-10.0)?);
    let (b1, one_m_b1, b2, one_m_b2) = (c(2.0)?, c(-2.0)?, c(7.0)?, c(-7.0)?);
    let head = "x_func, y_func, z_func, weight_func =";
    Some(vec![
        (
            "sgd",
            format!("{head} multiply( {lr} , grad ) , y , z , subtract( alpha , x )"),
            Oracle::Sgd { lr: v(&lr)? },
        ),
        (
            "momentum",
            format!("{head} subtract( multiply( {mom} , x ) , multiply( {lr} , grad ) ) , y , z , add( alpha , x )"),
            Oracle::Momentum {
                lr: v(&lr)?,
                mom: v(&mom)?,
            },
        ),
        (
            "rmsprop",
            format!(
                "{head} add( multiply( {rho} , x ) , multiply( {one_m_rho} , square( grad ) ) ) , multiply( {lr_small} , grad ) , z , \
                 subtract( alpha , divide_no_nan( y , add( sqrt( x ) , {eps} ) ) )"
            ),
            Oracle::Rmsprop {
                lr: v(&lr_small)?,
                rho: v(&rho)?,
                c: v(&one_m_rho)?,
                eps: v(&eps)?,
            },
        ),
        (
            "adam_core",
            format!(
                "{head} add( multiply( {b1} , x ) , multiply( {one_m_b1} , grad ) ) , \
                 add( multiply( {b2} , y ) , multiply( {one_m_b2} , square( grad ) ) ) , \
                 multiply( {lr_small} , divide_no_nan( x , add( sqrt( y ) , {eps} ) ) ) , subtract( alpha , z )"
            ),
            Oracle::AdamCore {
                lr: v(&lr_small)?,
                b1: v(&b1)?,
                c1: v(&one_m_b1)?,
                b2: v(&b2)?,
                c2: v(&one_m_b2)?,
                eps: v(&eps)?,
            },
        ),
    ])
}

/// Encode every standard optimizer through `grammar`.
pub fn encode_standard(grammar: &Grammar) -> Option<Vec<StandardEntry>> {
    standard_targets(grammar)?
        .into_iter()
        .map(|(name, text, _)| {
            encode(grammar, &text, STANDARD_MAX_DEPTH).map(|g| StandardEntry {
                name: name.to_string(),
                genotype: g,
            })
        })
        .collect()
}

pub fn shipped_standard() -> Vec<StandardEntry> {
    serde_json::from_str(STANDARD_GENOTYPES_JSON).expect("shipped genotypes parse")
}

/// Largest deviation between the mapped phenotype and the oracle over
/// `environments` random states, each stepped `steps` times.
pub fn max_oracle_deviation(spec: &OptimizerSpec, oracle: &Oracle, environments: usize, steps: usize, seed: u64) -> f64 {
    let mut rng = Rng::new(seed);
    let mut worst = 0.0f64;
    for _ in 0..environments {
        let mut s = [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-2.0..2.0)];
        let mut st = OptState {
            x: Tensor::from_vec(vec![s[0]]),
            y: Tensor::from_vec(vec![s[1]]),
            z: Tensor::from_vec(vec![s[2]]),
        };
        let mut w = Tensor::from_vec(vec![s[3]]);
        for _ in 0..steps {
            let g: f64 = rng.random_range(-3.0..3.0);
            s = oracle.step(s, g);
            let Ok(out) = step(spec, &st, &w, &Tensor::from_vec(vec![g])) else {
                return f64::INFINITY;
            };
            let got = [out.state.x.data()[0], out.state.y.data()[0], out.state.z.data()[0], out.weights.data()[0]];
            for (a, b) in got.iter().zip(&s) {
                let d = (a - b).abs();
                worst = if d.is_nan() { f64::INFINITY } else { worst.max(d) };
            }
            (st, w) = (out.state, out.weights);
        }
    }
    worst
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &str, passed: bool, detail: impl Into<String>) -> CheckResult {
    CheckResult {
        name: name.to_string(),
        passed,
        detail: detail.into(),
    }
}

/// Structural checks for an adaptive-optimizer grammar.
pub fn grammar_checks(grammar: &Grammar) -> Vec<CheckResult> {
    let mut out = Vec::new();
    let required = ["x_expr", "y_expr", "z_expr", "weight_expr"];
    let missing: Vec<&str> = required.iter().copied().filter(|n| !grammar.contains(n)).collect();
    out.push(check(
        "function rules present",
        missing.is_empty(),
        if missing.is_empty() {
            "x, y, z and weight expressions defined".to_string()
        } else {
            format!("missing: {}", missing.join(", "))
        },
    ));
    if !missing.is_empty() {
        return out;
    }

    let weight_words = grammar.reachable_words("weight_expr");
    out.push(check(
        "weight gradient barrier",
        !weight_words.contains("grad"),
        if weight_words.contains("grad") {
            "grad is reachable from the weight expression"
        } else {
            "grad unreachable from the weight expression"
        },
    ));

    let mut bad = Vec::new();
    for (nt, forbidden) in [("x_expr", &["y", "z"][..]), ("y_expr", &["z"][..])] {
        let words = grammar.reachable_words(nt);
        for f in forbidden {
            if words.contains(*f) {
                bad.push(format!("{nt} reaches {f}"));
            }
        }
    }
    out.push(check(
        "auxiliary ordering",
        bad.is_empty(),
        if bad.is_empty() {
            "x reads neither y nor z; y does not read z".to_string()
        } else {
            bad.join("; ")
        },
    ));

    let Some(targets) = standard_targets(grammar) else {
        out.push(check("standard optimizers", false, "grammar lacks the sigmoid constant list"));
        return out;
    };
    let shipped: BTreeMap<String, Genotype> = shipped_standard().into_iter().map(|e| (e.name, e.genotype)).collect();
    for (name, _, oracle) in targets {
        let label = format!("standard genotype: {name}");
        let Some(geno) = shipped.get(name) else {
            out.push(check(&label, false, "no shipped genotype"));
            continue;
        };
        let mapped = map_genotype(grammar, geno, grammar.start(), STANDARD_MAX_DEPTH, &mut Rng::new(0));
        let result = match mapped {
            Err(e) => check(&label, false, format!("mapping failed: {e}")),
            Ok(m) if m.repaired => check(&label, false, "genotype needed repair"),
            Ok(m) => match OptimizerSpec::parse(&m.text()) {
                Err(e) => check(&label, false, format!("phenotype rejected: {e}")),
                Ok(spec) => {
                    let dev = max_oracle_deviation(&spec, &oracle, 100, 5, 17);
                    check(&label, dev <= 1e-9, format!("max deviation {dev:.3e} over 100 environments"))
                }
            },
        };
        out.push(result);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grammar::parse_grammar;

    #[test]
    fn shipped_json_matches_encoder() {
        let g = Grammar::alr();
        assert_eq!(encode_standard(&g).unwrap(), shipped_standard());
    }

    #[test]
    fn shipped_grammar_passes() {
        for c in grammar_checks(&Grammar::alr()) {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
    }

    #[test]
    fn grad_in_weight_terminal_fails_barrier() {
        let text = crate::grammar::ALR_BNF.replace("<weight_terminal> ::= <weight_const> | x | y | z", "<weight_terminal> ::= <weight_const> | x | y | z | grad");
        assert_ne!(text, crate::grammar::ALR_BNF);
        let g = parse_grammar(&text).unwrap();
        let barrier = grammar_checks(&g).into_iter().find(|c| c.name == "weight gradient barrier").unwrap();
        assert!(!barrier.passed);
    }

    #[test]
    fn oracle_sgd_by_hand() {
        let s = Oracle::Sgd { lr: 0.5 }.step([0.0, 0.0, 0.0, 1.0], 2.0);
        assert_eq!(s, [1.0, 0.0, 0.0, 0.0]);
    }
}
