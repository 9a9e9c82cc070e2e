//! Learning-rate policies: decision trees over the epoch and the previous
//! learning rate, evaluated once per epoch before its first batch.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsge::{map_genotype, Genotype, MappingError};
use crate::grammar::Grammar;
use crate::rng::Rng;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("policy parse error at byte {pos}: {message}")]
    Parse { pos: usize, message: String },
    #[error("leaf learning rate {0} is not positive and finite")]
    BadLeaf(f64),
    #[error("threshold {0} is not finite")]
    BadThreshold(f64),
    #[error(transparent)]
    Mapping(#[from] MappingError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PolicyVar {
    Epoch,
    Lr,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Cmp {
    Lt,
    Le,
    Gt,
    Ge,
}

impl Cmp {
    pub fn symbol(self) -> &'static str {
        match self {
            Cmp::Lt => "<",
            Cmp::Le => "<=",
            Cmp::Gt => ">",
            Cmp::Ge => ">=",
        }
    }

    fn from_symbol(s: &str) -> Option<Cmp> {
        Some(match s {
            "<" => Cmp::Lt,
            "<=" => Cmp::Le,
            ">" => Cmp::Gt,
            ">=" => Cmp::Ge,
            _ => return None,
        })
    }

    pub fn holds(self, a: f64, b: f64) -> bool {
        match self {
            Cmp::Lt => a < b,
            Cmp::Le => a <= b,
            Cmp::Gt => a > b,
            Cmp::Ge => a >= b,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum PolicyTree {
    Leaf(f64),
    If {
        var: PolicyVar,
        cmp: Cmp,
        threshold: f64,
        then: Box<PolicyTree>,
        otherwise: Box<PolicyTree>,
    },
}

impl PolicyTree {
    pub fn leaf(lr: f64) -> PolicyTree {
        PolicyTree::Leaf(lr)
    }

    pub fn branch(var: PolicyVar, cmp: Cmp, threshold: f64, then: PolicyTree, otherwise: PolicyTree) -> PolicyTree {
        PolicyTree::If {
            var,
            cmp,
            threshold,
            then: Box::new(then),
            otherwise: Box::new(otherwise),
        }
    }

    /// Learning rate for `epoch` given the rate used in the previous epoch.
    pub fn eval(&self, epoch: usize, prev_lr: f64) -> f64 {
        let mut node = self;
        loop {
            match node {
                PolicyTree::Leaf(lr) => return *lr,
                PolicyTree::If {
                    var,
                    cmp,
                    threshold,
                    then,
                    otherwise,
                } => {
                    let lhs = match var {
                        PolicyVar::Epoch => epoch as f64,
                        PolicyVar::Lr => prev_lr,
                    };
                    node = if cmp.holds(lhs, *threshold) { then } else { otherwise };
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        match self {
            PolicyTree::Leaf(_) => 1,
            PolicyTree::If { then, otherwise, .. } => 1 + then.depth().max(otherwise.depth()),
        }
    }

    pub fn leaves(&self) -> Vec<f64> {
        match self {
            PolicyTree::Leaf(lr) => vec![*lr],
            PolicyTree::If { then, otherwise, .. } => {
                let mut v = then.leaves();
                v.extend(otherwise.leaves());
                v
            }
        }
    }

    /// Checks leaf positivity and finite thresholds.
    pub fn validate(&self) -> Result<(), PolicyError> {
        match self {
            PolicyTree::Leaf(lr) if !(lr.is_finite() && *lr > 0.0) => Err(PolicyError::BadLeaf(*lr)),
            PolicyTree::Leaf(_) => Ok(()),
            PolicyTree::If {
                threshold, then, otherwise, ..
            } => {
                if !threshold.is_finite() {
                    return Err(PolicyError::BadThreshold(*threshold));
                }
                then.validate()?;
                otherwise.validate()
            }
        }
    }

    /// Parse `if(epoch < 10, 0.1, 0.01)`; whitespace is free, so mapped
    /// grammar text parses as well.
    pub fn parse(text: &str) -> Result<PolicyTree, PolicyError> {
        let tokens = tokenize(text)?;
        let mut pos = 0;
        let tree = parse_node(&tokens, &mut pos)?;
        if pos != tokens.len() {
            return Err(PolicyError::Parse {
                pos: tokens[pos].0,
                message: "trailing input".into(),
            });
        }
        tree.validate()?;
        Ok(tree)
    }
}

impl fmt::Display for PolicyTree {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PolicyTree::Leaf(lr) => write!(f, "{lr}"),
            PolicyTree::If {
                var,
                cmp,
                threshold,
                then,
                otherwise,
            } => {
                let v = match var {
                    PolicyVar::Epoch => "epoch",
                    PolicyVar::Lr => "lr",
                };
                write!(f, "if({v} {} {threshold}, {then}, {otherwise})", cmp.symbol())
            }
        }
    }
}

fn tokenize(text: &str) -> Result<Vec<(usize, String)>, PolicyError> {
    let b = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < b.len() {
        let c = b[i];
        if c.is_ascii_whitespace() {
            i += 1;
        } else if c == b'(' || c == b')' || c == b',' {
            out.push((i, (c as char).to_string()));
            i += 1;
        } else if c == b'<' || c == b'>' {
            let len = if b.get(i + 1) == Some(&b'=') { 2 } else { 1 };
            out.push((i, text[i..i + len].to_string()));
            i += len;
        } else if c.is_ascii_alphanumeric() || c == b'.' || c == b'-' || c == b'+' || c == b'_' {
            let start = i;
            while i < b.len() {
                let d = b[i];
                let exp_sign = (d == b'-' || d == b'+') && i > start && matches!(b[i - 1], b'e' | b'E');
                if d.is_ascii_alphanumeric() || d == b'.' || d == b'_' || exp_sign || (i == start && (d == b'-' || d == b'+')) {
                    i += 1;
                } else {
                    break;
                }
            }
            out.push((start, text[start..i].to_string()));
        } else {
            return Err(PolicyError::Parse {
                pos: i,
                message: format!("unexpected character `{}`", c as char),
            });
        }
    }
    Ok(out)
}

fn parse_node(tokens: &[(usize, String)], pos: &mut usize) -> Result<PolicyTree, PolicyError> {
    let err = |p: usize, m: &str| PolicyError::Parse {
        pos: p,
        message: m.to_string(),
    };
    let end = tokens.last().map(|t| t.0 + t.1.len()).unwrap_or(0);
    let next = |pos: &mut usize| -> Result<(usize, String), PolicyError> {
        let t = tokens.get(*pos).cloned().ok_or_else(|| err(end, "unexpected end of input"))?;
        *pos += 1;
        Ok(t)
    };
    let expect = |pos: &mut usize, want: &str| -> Result<(), PolicyError> {
        let (p, t) = next(pos)?;
        if t == want {
            Ok(())
        } else {
            Err(err(p, &format!("expected `{want}`, found `{t}`")))
        }
    };
    let number = |pos: &mut usize| -> Result<f64, PolicyError> {
        let (p, t) = next(pos)?;
        t.parse::<f64>().map_err(|_| err(p, &format!("expected a number, found `{t}`")))
    };

    let (p, t) = next(pos)?;
    if t == "if" {
        expect(pos, "(")?;
        let (vp, v) = next(pos)?;
        let var = match v.as_str() {
            "epoch" => PolicyVar::Epoch,
            "lr" => PolicyVar::Lr,
            _ => return Err(err(vp, &format!("unknown variable `{v}`"))),
        };
        let (cp, c) = next(pos)?;
        let cmp = Cmp::from_symbol(&c).ok_or_else(|| err(cp, &format!("unknown comparison `{c}`")))?;
        let threshold = number(pos)?;
        expect(pos, ",")?;
        let then = parse_node(tokens, pos)?;
        expect(pos, ",")?;
        let otherwise = parse_node(tokens, pos)?;
        expect(pos, ")")?;
        Ok(PolicyTree::branch(var, cmp, threshold, then, otherwise))
    } else {
        t.parse::<f64>()
            .map(PolicyTree::Leaf)
            .map_err(|_| err(p, &format!("expected `if` or a number, found `{t}`")))
    }
}

/// Map a genotype through the policy grammar and build its tree.
pub fn policy_from_genotype(grammar: &Grammar, genotype: &Genotype, max_depth: usize, rng: &mut Rng) -> Result<(PolicyTree, Genotype), PolicyError> {
    let m = map_genotype(grammar, genotype, grammar.start(), max_depth, rng)?;
    let tree = PolicyTree::parse(&m.text())?;
    Ok((tree, m.genotype))
}

/// Plain SGD whose rate comes from a policy each epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduledSgd {
    pub policy: PolicyTree,
    /// Rate reported as "previous" when the policy runs at epoch 0.
    pub initial_lr: f64,
}

impl ScheduledSgd {
    pub const DEFAULT_INITIAL_LR: f64 = 0.01;

    pub fn new(policy: PolicyTree) -> Self {
        Self {
            policy,
            initial_lr: Self::DEFAULT_INITIAL_LR,
        }
    }

    /// The rates used for epochs `0..epochs`.
    pub fn trajectory(&self, epochs: usize) -> Vec<f64> {
        let mut lr = self.initial_lr;
        (0..epochs)
            .map(|e| {
                lr = self.policy.eval(e, lr);
                lr
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsge::random_genotype;
    use std::collections::BTreeMap;

    #[test]
    fn constant_leaf() {
        let p = PolicyTree::leaf(0.01);
        for e in [0, 7, 99] {
            assert_eq!(p.eval(e, 0.5), 0.01);
        }
    }

    #[test]
    fn step_schedule() {
        let p = PolicyTree::parse("if(epoch < 10, 0.1, 0.01)").unwrap();
        assert_eq!(p.eval(9, 0.1), 0.1);
        assert_eq!(p.eval(10, 0.1), 0.01);
    }

    #[test]
    fn three_value_cycler() {
        // lr -> next lr: 0.1 -> 0.01 -> 0.001 -> 0.1 ...
        let p = PolicyTree::parse("if(lr > 0.05, 0.01, if(lr > 0.005, 0.001, 0.1))").unwrap();
        let s = ScheduledSgd {
            policy: p,
            initial_lr: 0.001,
        };
        assert_eq!(s.trajectory(6), vec![0.1, 0.01, 0.001, 0.1, 0.01, 0.001]);
    }

    #[test]
    fn display_round_trip() {
        let text = "if(epoch >= 60, if(lr <= 0.01, 0.001, 0.01), 0.1)";
        let p = PolicyTree::parse(text).unwrap();
        assert_eq!(p.to_string(), text);
        assert_eq!(PolicyTree::parse(&p.to_string()).unwrap(), p);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(PolicyTree::parse("if(epoch << 3, 1, 2)").is_err());
        assert!(PolicyTree::parse("if(step < 3, 1, 2)").is_err());
        assert!(PolicyTree::parse("if(epoch < 3, 1)").is_err());
        assert!(matches!(PolicyTree::parse("0"), Err(PolicyError::BadLeaf(_))));
        assert!(matches!(PolicyTree::parse("-0.1"), Err(PolicyError::BadLeaf(_))));
    }

    #[test]
    fn smallest_derivation_is_constant() {
        let g = Grammar::dlr();
        let genes: BTreeMap<String, Vec<u32>> = [("node".to_string(), vec![1]), ("lr_const".to_string(), vec![12])]
            .into_iter()
            .collect();
        let (tree, _) = policy_from_genotype(&g, &Genotype::new(genes), 6, &mut Rng::new(0)).unwrap();
        assert_eq!(tree, PolicyTree::Leaf(0.01));
    }

    #[test]
    fn mapped_trees_valid_and_bounded() {
        let g = Grammar::dlr();
        let root = Rng::new(99);
        for s in 0..10_000u64 {
            let mut rng = root.child(s);
            let geno = random_genotype(&g, 4, &mut rng).unwrap();
            let (tree, _) = policy_from_genotype(&g, &geno, 4, &mut rng).unwrap();
            tree.validate().unwrap();
            assert!(tree.depth() <= 4, "{tree}");
            assert!(tree.leaves().iter().all(|&lr| lr > 0.0 && lr.is_finite()));
        }
    }

    #[test]
    fn eval_is_pure() {
        let p = PolicyTree::parse("if(lr < 0.5, if(epoch > 3, 0.2, 0.3), 0.4)").unwrap();
        for e in 0..10 {
            for lr in [0.1, 0.6] {
                assert_eq!(p.eval(e, lr), p.eval(e, lr));
            }
        }
    }
}
