//! Context-free grammars in a small BNF dialect.
//!
//! ```text
//! # comment
//! <expr> ::= add( <expr> , <expr> ) | <term>
//! <term> ::= x | grad | grad
//!     | 0.5
//! ```
//!
//! One rule per `<name> ::= ...` line. A rule continues on the next line when
//! the line ends with `|` or the next line starts with `|`. Nonterminals are
//! `<identifier>`; everything else is a terminal token, split on whitespace.
//! A `<` that does not open an `<identifier>` is an ordinary terminal
//! character, so comparison operators need no escaping. Alternative order and
//! duplicate alternatives are preserved: duplicates bias uniform choice.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use thiserror::Error;

pub const ALR_BNF: &str = include_str!("../grammars/alr.bnf");
pub const DLR_BNF: &str = include_str!("../grammars/dlr.bnf");

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GrammarError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("line {line}: empty alternative in <{rule}>")]
    EmptyAlternative { line: usize, rule: String },
    #[error("line {line}: <{name}> is used but never defined")]
    UndefinedNonterminal { line: usize, name: String },
    #[error("line {line}: <{name}> is defined twice")]
    DuplicateRule { line: usize, name: String },
    #[error("unknown nonterminal <{0}>")]
    UnknownNonterminal(String),
    #[error("grammar has no rules")]
    Empty,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Symbol {
    Terminal(String),
    NonTerminal(String),
}

impl Symbol {
    pub fn as_nonterminal(&self) -> Option<&str> {
        match self {
            Symbol::NonTerminal(n) => Some(n),
            Symbol::Terminal(_) => None,
        }
    }
}

impl fmt::Display for Symbol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Symbol::Terminal(t) => f.write_str(t),
            Symbol::NonTerminal(n) => write!(f, "<{n}>"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Alternative {
    pub symbols: Vec<Symbol>,
}

impl Alternative {
    pub fn nonterminals(&self) -> impl Iterator<Item = &str> {
        self.symbols.iter().filter_map(Symbol::as_nonterminal)
    }
}

impl fmt::Display for Alternative {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, s) in self.symbols.iter().enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            write!(f, "{s}")?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Grammar {
    nonterminals: Vec<String>,
    rules: BTreeMap<String, Vec<Alternative>>,
    start: String,
}

impl Grammar {
    /// The shipped adaptive-optimizer grammar.
    pub fn alr() -> Grammar {
        parse_grammar(ALR_BNF).expect("shipped alr.bnf parses")
    }

    /// The shipped learning-rate policy grammar.
    pub fn dlr() -> Grammar {
        parse_grammar(DLR_BNF).expect("shipped dlr.bnf parses")
    }

    pub fn start(&self) -> &str {
        &self.start
    }

    /// Nonterminals in definition order.
    pub fn nonterminals(&self) -> &[String] {
        &self.nonterminals
    }

    pub fn contains(&self, nt: &str) -> bool {
        self.rules.contains_key(nt)
    }

    pub fn expansions(&self, nt: &str) -> Result<&[Alternative], GrammarError> {
        self.rules
            .get(nt)
            .map(Vec::as_slice)
            .ok_or_else(|| GrammarError::UnknownNonterminal(nt.to_string()))
    }

    /// Replace the alternatives of an existing rule.
    pub fn set_expansions(&mut self, nt: &str, alts: Vec<Alternative>) -> Result<(), GrammarError> {
        match self.rules.get_mut(nt) {
            Some(slot) => {
                *slot = alts;
                Ok(())
            }
            None => Err(GrammarError::UnknownNonterminal(nt.to_string())),
        }
    }

    pub fn total_alternatives(&self) -> usize {
        self.rules.values().map(Vec::len).sum()
    }

    /// Nonterminals reachable from `nt` in one or more expansions.
    pub fn reachable_from(&self, nt: &str) -> BTreeSet<String> {
        let mut seen = BTreeSet::new();
        let mut stack = vec![nt.to_string()];
        while let Some(cur) = stack.pop() {
            for alt in self.rules.get(&cur).into_iter().flatten() {
                for child in alt.nonterminals() {
                    if seen.insert(child.to_string()) {
                        stack.push(child.to_string());
                    }
                }
            }
        }
        seen
    }

    /// Identifier words appearing in terminals of any derivation of `nt`.
    /// `add( x ,` contributes `add` and `x`.
    pub fn reachable_words(&self, nt: &str) -> BTreeSet<String> {
        let mut nts = self.reachable_from(nt);
        nts.insert(nt.to_string());
        let mut words = BTreeSet::new();
        for n in &nts {
            for alt in self.rules.get(n).into_iter().flatten() {
                for sym in &alt.symbols {
                    if let Symbol::Terminal(t) = sym {
                        words.extend(identifier_words(t));
                    }
                }
            }
        }
        words
    }

    /// Minimum derivation height of every nonterminal: the fewest nested
    /// expansions needed to reach a terminal-only string. `None` means the
    /// nonterminal can never terminate.
    pub fn min_heights(&self) -> BTreeMap<String, Option<usize>> {
        let mut h: BTreeMap<String, Option<usize>> =
            self.rules.keys().map(|k| (k.clone(), None)).collect();
        loop {
            let mut changed = false;
            for (nt, alts) in &self.rules {
                let best = alts.iter().filter_map(|a| alt_height(a, &h)).min();
                if best.is_some() && (h[nt].is_none() || best < h[nt]) {
                    h.insert(nt.clone(), best);
                    changed = true;
                }
            }
            if !changed {
                return h;
            }
        }
    }
}

/// Height of one alternative given nonterminal heights (1 + tallest child).
pub(crate) fn alt_height(alt: &Alternative, heights: &BTreeMap<String, Option<usize>>) -> Option<usize> {
    let mut tallest = 0;
    for nt in alt.nonterminals() {
        tallest = tallest.max(heights.get(nt).copied().flatten()?);
    }
    Some(1 + tallest)
}

pub(crate) fn identifier_words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !(c.is_ascii_alphanumeric() || c == '_'))
        .filter(|w| w.chars().next().is_some_and(|c| c.is_ascii_alphabetic() || c == '_'))
        .map(str::to_string)
}

impl fmt::Display for Grammar {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for nt in &self.nonterminals {
            write!(f, "<{nt}> ::=")?;
            for (i, alt) in self.rules[nt].iter().enumerate() {
                if i > 0 {
                    f.write_str(" |")?;
                }
                write!(f, " {alt}")?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

struct RawRule {
    line: usize,
    name: String,
    rhs: Vec<(usize, String)>,
}

fn strip_comment(line: &str) -> &str {
    match line.find('#') {
        Some(i) => &line[..i],
        None => line,
    }
}

fn nonterminal_at(chars: &[char], i: usize) -> Option<(String, usize)> {
    if chars.get(i) != Some(&'<') {
        return None;
    }
    let first = *chars.get(i + 1)?;
    if !(first.is_ascii_alphabetic() || first == '_') {
        return None;
    }
    let mut j = i + 1;
    while j < chars.len() && (chars[j].is_ascii_alphanumeric() || chars[j] == '_') {
        j += 1;
    }
    if chars.get(j) == Some(&'>') {
        Some((chars[i + 1..j].iter().collect(), j + 1))
    } else {
        None
    }
}

fn tokenize(text: &str) -> Vec<Symbol> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let mut term = String::new();
    let mut i = 0;
    while i < chars.len() {
        if let Some((name, next)) = nonterminal_at(&chars, i) {
            if !term.is_empty() {
                out.push(Symbol::Terminal(std::mem::take(&mut term)));
            }
            out.push(Symbol::NonTerminal(name));
            i = next;
        } else if chars[i].is_whitespace() {
            if !term.is_empty() {
                out.push(Symbol::Terminal(std::mem::take(&mut term)));
            }
            i += 1;
        } else {
            term.push(chars[i]);
            i += 1;
        }
    }
    if !term.is_empty() {
        out.push(Symbol::Terminal(term));
    }
    out
}

/// Parse grammar text.
pub fn parse_grammar(text: &str) -> Result<Grammar, GrammarError> {
    let mut raw: Vec<RawRule> = Vec::new();
    let mut open_continuation = false;
    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        let body = strip_comment(line).trim();
        if body.is_empty() {
            continue;
        }
        if let Some(pos) = body.find("::=") {
            let lhs = body[..pos].trim();
            let chars: Vec<char> = lhs.chars().collect();
            let name = match nonterminal_at(&chars, 0) {
                Some((name, end)) if end == chars.len() => name,
                _ => {
                    return Err(GrammarError::Syntax {
                        line: lineno,
                        message: format!("left-hand side `{lhs}` is not a <nonterminal>"),
                    })
                }
            };
            let rhs = body[pos + 3..].trim().to_string();
            open_continuation = rhs.ends_with('|');
            raw.push(RawRule {
                line: lineno,
                name,
                rhs: vec![(lineno, rhs)],
            });
        } else if open_continuation || body.starts_with('|') {
            let Some(rule) = raw.last_mut() else {
                return Err(GrammarError::Syntax {
                    line: lineno,
                    message: "continuation before any rule".into(),
                });
            };
            open_continuation = body.ends_with('|');
            rule.rhs.push((lineno, body.to_string()));
        } else {
            return Err(GrammarError::Syntax {
                line: lineno,
                message: format!("expected `<name> ::= ...`, found `{body}`"),
            });
        }
    }
    if raw.is_empty() {
        return Err(GrammarError::Empty);
    }

    let mut nonterminals = Vec::new();
    let mut rules = BTreeMap::new();
    let mut references: Vec<(usize, String)> = Vec::new();
    for rule in raw {
        if rules.contains_key(&rule.name) {
            return Err(GrammarError::DuplicateRule {
                line: rule.line,
                name: rule.name,
            });
        }
        // Rejoin the physical lines, remembering where each `|`-separated
        // piece came from for error messages.
        let mut pieces: Vec<(usize, String)> = vec![(rule.line, String::new())];
        for (lineno, text) in &rule.rhs {
            for (k, part) in text.split('|').enumerate() {
                if k > 0 {
                    pieces.push((*lineno, String::new()));
                }
                let last = pieces.last_mut().expect("non-empty");
                if last.1.trim().is_empty() {
                    last.0 = *lineno;
                }
                last.1.push(' ');
                last.1.push_str(part);
            }
        }
        let mut alts = Vec::new();
        for (lineno, piece) in pieces {
            let symbols = tokenize(&piece);
            if symbols.is_empty() {
                return Err(GrammarError::EmptyAlternative {
                    line: lineno,
                    rule: rule.name.clone(),
                });
            }
            for s in &symbols {
                if let Symbol::NonTerminal(n) = s {
                    references.push((lineno, n.clone()));
                }
            }
            alts.push(Alternative { symbols });
        }
        nonterminals.push(rule.name.clone());
        rules.insert(rule.name, alts);
    }
    for (line, name) in references {
        if !rules.contains_key(&name) {
            return Err(GrammarError::UndefinedNonterminal { line, name });
        }
    }
    let start = nonterminals[0].clone();
    Ok(Grammar {
        nonterminals,
        rules,
        start,
    })
}

/// `σ(k)` for `steps` values of `k` evenly spaced over `[k_min, k_max]`.
pub fn sigmoidal_constants(k_min: f64, k_max: f64, steps: usize) -> Vec<f64> {
    assert!(steps >= 2 && k_min < k_max, "need steps >= 2 and k_min < k_max");
    let width = (k_max - k_min) / (steps - 1) as f64;
    (0..steps)
        .map(|i| {
            let k = k_min + width * i as f64;
            1.0 / (1.0 + (-k).exp())
        })
        .collect()
}

/// The constant set used in the shipped optimizer grammar.
pub fn default_constants() -> Vec<f64> {
    sigmoidal_constants(-10.0, 10.0, 41)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn terms(alt: &Alternative) -> Vec<String> {
        alt.symbols.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn simple_rule() {
        let g = parse_grammar("<s> ::= a | b").unwrap();
        let alts = g.expansions("s").unwrap();
        assert_eq!(alts.len(), 2);
        assert_eq!(terms(&alts[0]), ["a"]);
        assert_eq!(terms(&alts[1]), ["b"]);
        assert_eq!(g.start(), "s");
    }

    #[test]
    fn duplicates_preserved() {
        let g = parse_grammar("<t> ::= g | g | c").unwrap();
        let alts = g.expansions("t").unwrap();
        assert_eq!(alts.len(), 3);
        assert_eq!(alts[0], alts[1]);
    }

    #[test]
    fn undefined_nonterminal_reports_line() {
        let err = parse_grammar("<s> ::= a\n<t> ::= <q> | b").unwrap_err();
        assert_eq!(
            err,
            GrammarError::UndefinedNonterminal {
                line: 2,
                name: "q".into()
            }
        );
    }

    #[test]
    fn empty_alternative_rejected() {
        let err = parse_grammar("<s> ::= a | | b").unwrap_err();
        assert!(matches!(err, GrammarError::EmptyAlternative { line: 1, .. }));
    }

    #[test]
    fn syntax_errors() {
        assert!(matches!(
            parse_grammar("<s> ::= a\nstray text").unwrap_err(),
            GrammarError::Syntax { line: 2, .. }
        ));
        assert!(matches!(
            parse_grammar("s ::= a").unwrap_err(),
            GrammarError::Syntax { line: 1, .. }
        ));
        assert_eq!(parse_grammar("# nothing\n").unwrap_err(), GrammarError::Empty);
    }

    #[test]
    fn continuation_lines() {
        let g = parse_grammar("<s> ::= a |\n  b\n  | c # trailing\n<t> ::= x").unwrap();
        assert_eq!(g.expansions("s").unwrap().len(), 3);
        assert_eq!(g.expansions("t").unwrap().len(), 1);
    }

    #[test]
    fn tokenizer_splits_calls_and_keeps_comparisons() {
        let g = parse_grammar("<s> ::= add(x, <t>) | if( e < 3 , <t> , <t> )\n<t> ::= 1").unwrap();
        let alts = g.expansions("s").unwrap();
        assert_eq!(terms(&alts[0]), ["add(x,", "<t>", ")"]);
        assert_eq!(terms(&alts[1]), ["if(", "e", "<", "3", ",", "<t>", ",", "<t>", ")"]);
    }

    #[test]
    fn display_round_trips() {
        for g in [Grammar::alr(), Grammar::dlr()] {
            let again = parse_grammar(&g.to_string()).unwrap();
            assert_eq!(g, again);
        }
    }

    #[test]
    fn unknown_expansion() {
        let g = parse_grammar("<s> ::= a | b").unwrap();
        assert_eq!(g.expansions("s").unwrap().len(), 2);
        assert_eq!(
            g.expansions("nope").unwrap_err(),
            GrammarError::UnknownNonterminal("nope".into())
        );
    }

    #[test]
    fn sigmoid_endpoints() {
        let c = default_constants();
        assert_eq!(c.len(), 41);
        assert_eq!(format!("{:.8e}", c[0]), "4.53978687e-5");
        assert_eq!(format!("{:.8e}", c[40]), "9.99954602e-1");
        assert_eq!(c[20], 0.5);
        assert!(c.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn shipped_constants_match_generator() {
        let g = Grammar::alr();
        let consts: Vec<f64> = g
            .expansions("x_const")
            .unwrap()
            .iter()
            .map(|a| a.to_string().parse().unwrap())
            .collect();
        let expected = default_constants();
        assert_eq!(consts.len(), expected.len());
        for (a, b) in consts.iter().zip(&expected) {
            assert!((a - b).abs() <= 1e-8 * b, "{a} vs {b}");
        }
    }

    #[test]
    fn weight_terminals_exclude_gradient() {
        let g = Grammar::alr();
        let alts: Vec<String> = g
            .expansions("weight_terminal")
            .unwrap()
            .iter()
            .map(ToString::to_string)
            .collect();
        assert_eq!(alts, ["<weight_const>", "x", "y", "z"]);
        assert!(!g.reachable_words("weight_expr").contains("grad"));
    }

    #[test]
    fn auxiliary_terminal_ordering() {
        let g = Grammar::alr();
        let x = g.reachable_words("x_expr");
        assert!(x.contains("x") && x.contains("grad"));
        assert!(!x.contains("y") && !x.contains("z"));
        let y = g.reachable_words("y_expr");
        assert!(y.contains("x") && y.contains("y") && !y.contains("z"));
        let z = g.reachable_words("z_expr");
        assert!(z.contains("x") && z.contains("y") && z.contains("z"));
        let w = g.reachable_words("weight_expr");
        assert!(["x", "y", "z", "alpha"].iter().all(|v| w.contains(*v)));
    }

    #[test]
    fn gradient_bias_by_duplication() {
        let g = Grammar::alr();
        let grads = g
            .expansions("x_terminal")
            .unwrap()
            .iter()
            .filter(|a| a.to_string() == "grad")
            .count();
        assert_eq!(grads, 2);
    }

    #[test]
    fn min_heights_finite_for_shipped() {
        for g in [Grammar::alr(), Grammar::dlr()] {
            assert!(g.min_heights().values().all(Option::is_some));
        }
        let g = parse_grammar("<s> ::= <s> a").unwrap();
        assert_eq!(g.min_heights()["s"], None);
    }
}
