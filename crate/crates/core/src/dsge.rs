//! Dynamic structured grammatical evolution.
//!
//! A genotype keeps one integer list per nonterminal. Mapping performs a
//! left-most derivation; each expansion of nonterminal `N` consumes the next
//! gene of `N`'s list, taken modulo the number of alternatives. Exhausted
//! lists are extended with fresh random genes (repair). Once `N` sits
//! `max_depth` deep in its own ancestry, only its shortest-terminating
//! alternatives may be chosen; a gene pointing elsewhere is rewritten.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grammar::{alt_height, Grammar, GrammarError, Symbol};
use crate::rng::Rng;

/// Hard cap on expansions per mapping.
const EXPANSION_LIMIT: usize = 200_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MappingError {
    #[error(transparent)]
    Grammar(#[from] GrammarError),
    #[error("<{0}> has no terminating alternative")]
    NonTerminating(String),
    #[error("derivation exceeded {0} expansions")]
    TooLarge(usize),
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Genotype {
    pub genes: BTreeMap<String, Vec<u32>>,
    /// Genes consumed by the most recent mapping, per nonterminal. Absent on
    /// genotypes that were never mapped.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub consumed: Option<BTreeMap<String, usize>>,
}

impl Genotype {
    pub fn new(genes: BTreeMap<String, Vec<u32>>) -> Self {
        Self {
            genes,
            consumed: None,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("genotype serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn gene_count(&self) -> usize {
        self.genes.values().map(Vec::len).sum()
    }

    /// Copy with unconsumed genes dropped.
    pub fn trimmed(&self) -> Genotype {
        let Some(consumed) = &self.consumed else {
            return self.clone();
        };
        let genes = self
            .genes
            .iter()
            .map(|(k, v)| (k.clone(), v[..consumed.get(k).copied().unwrap_or(0).min(v.len())].to_vec()))
            .filter(|(_, v)| !v.is_empty())
            .collect();
        Genotype {
            genes,
            consumed: Some(consumed.clone()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum DerivationNode {
    Terminal(String),
    NonTerminal {
        name: String,
        choice: usize,
        children: Vec<DerivationNode>,
    },
}

impl DerivationNode {
    /// Terminals in order, separated by single spaces.
    pub fn text(&self) -> String {
        let mut words = Vec::new();
        self.collect_terminals(&mut words);
        words.join(" ")
    }

    fn collect_terminals<'a>(&'a self, out: &mut Vec<&'a str>) {
        match self {
            DerivationNode::Terminal(t) => out.push(t),
            DerivationNode::NonTerminal { children, .. } => {
                for c in children {
                    c.collect_terminals(out);
                }
            }
        }
    }

    /// Largest number of times `nt` appears on any root-to-leaf path.
    pub fn max_occurrences(&self, nt: &str) -> usize {
        match self {
            DerivationNode::Terminal(_) => 0,
            DerivationNode::NonTerminal { name, children, .. } => {
                let below = children.iter().map(|c| c.max_occurrences(nt)).max().unwrap_or(0);
                below + usize::from(name == nt)
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct Mapping {
    pub tree: DerivationNode,
    /// Input genotype after repair, with `consumed` filled in.
    pub genotype: Genotype,
    pub repaired: bool,
    pub expansions: usize,
}

impl Mapping {
    pub fn text(&self) -> String {
        self.tree.text()
    }
}

/// Alternatives permitted for `nt` when it is at its depth limit.
fn shortest_alternatives(g: &Grammar, heights: &BTreeMap<String, Option<usize>>, nt: &str) -> Result<Vec<usize>, MappingError> {
    let alts = g.expansions(nt)?;
    let hs: Vec<Option<usize>> = alts.iter().map(|a| alt_height(a, heights)).collect();
    let best = hs
        .iter()
        .flatten()
        .min()
        .copied()
        .ok_or_else(|| MappingError::NonTerminating(nt.to_string()))?;
    Ok(hs
        .iter()
        .enumerate()
        .filter(|(_, h)| **h == Some(best))
        .map(|(i, _)| i)
        .collect())
}

struct Mapper<'a> {
    grammar: &'a Grammar,
    heights: BTreeMap<String, Option<usize>>,
    limited: BTreeMap<String, Vec<usize>>,
    max_depth: usize,
    genes: BTreeMap<String, Vec<u32>>,
    cursor: BTreeMap<String, usize>,
    depth: BTreeMap<String, usize>,
    rng: &'a mut Rng,
    repaired: bool,
    expansions: usize,
}

impl<'a> Mapper<'a> {
    fn new(grammar: &'a Grammar, genotype: &Genotype, max_depth: usize, rng: &'a mut Rng) -> Self {
        Self {
            grammar,
            heights: grammar.min_heights(),
            limited: BTreeMap::new(),
            max_depth: max_depth.max(1),
            genes: genotype.genes.clone(),
            cursor: BTreeMap::new(),
            depth: BTreeMap::new(),
            rng,
            repaired: false,
            expansions: 0,
        }
    }

    fn allowed(&mut self, nt: &str, at_limit: bool) -> Result<Option<Vec<usize>>, MappingError> {
        if self.heights.get(nt).copied().flatten().is_none() {
            return Err(MappingError::NonTerminating(nt.to_string()));
        }
        if !at_limit {
            return Ok(None);
        }
        if !self.limited.contains_key(nt) {
            let v = shortest_alternatives(self.grammar, &self.heights, nt)?;
            self.limited.insert(nt.to_string(), v);
        }
        Ok(Some(self.limited[nt].clone()))
    }

    fn expand(&mut self, nt: &str) -> Result<DerivationNode, MappingError> {
        self.expansions += 1;
        if self.expansions > EXPANSION_LIMIT {
            return Err(MappingError::TooLarge(EXPANSION_LIMIT));
        }
        let grammar = self.grammar;
        let alts = grammar.expansions(nt)?;
        let depth = {
            let d = self.depth.entry(nt.to_string()).or_insert(0);
            *d += 1;
            *d
        };
        let allowed = self.allowed(nt, depth >= self.max_depth)?;

        let pos = {
            let c = self.cursor.entry(nt.to_string()).or_insert(0);
            *c += 1;
            *c - 1
        };
        let list = self.genes.entry(nt.to_string()).or_default();
        let choice = if let Some(&gene) = list.get(pos) {
            let natural = gene as usize % alts.len();
            match &allowed {
                Some(ok) if !ok.contains(&natural) => {
                    let forced = ok[gene as usize % ok.len()];
                    list[pos] = forced as u32;
                    self.repaired = true;
                    forced
                }
                _ => natural,
            }
        } else {
            let pick = match &allowed {
                Some(ok) => ok[self.rng.random_range(0..ok.len())],
                None => self.rng.random_range(0..alts.len()),
            };
            list.push(pick as u32);
            self.repaired = true;
            pick
        };

        let mut children = Vec::with_capacity(alts[choice].symbols.len());
        for sym in &alts[choice].symbols {
            match sym {
                Symbol::Terminal(t) => children.push(DerivationNode::Terminal(t.clone())),
                Symbol::NonTerminal(child) => children.push(self.expand(child)?),
            }
        }
        *self.depth.get_mut(nt).expect("entered above") -= 1;
        Ok(DerivationNode::NonTerminal {
            name: nt.to_string(),
            choice,
            children,
        })
    }
}

/// Map a genotype to a derivation tree, repairing as needed.
pub fn map_genotype(
    grammar: &Grammar,
    genotype: &Genotype,
    start: &str,
    max_depth: usize,
    rng: &mut Rng,
) -> Result<Mapping, MappingError> {
    let mut mapper = Mapper::new(grammar, genotype, max_depth, rng);
    let tree = mapper.expand(start)?;
    let consumed = mapper.cursor.clone();
    Ok(Mapping {
        tree,
        genotype: Genotype {
            genes: mapper.genes,
            consumed: Some(consumed),
        },
        repaired: mapper.repaired,
        expansions: mapper.expansions,
    })
}

/// A genotype recorded from a uniformly random derivation.
pub fn random_genotype(grammar: &Grammar, max_depth: usize, rng: &mut Rng) -> Result<Genotype, MappingError> {
    let m = map_genotype(grammar, &Genotype::default(), grammar.start(), max_depth, rng)?;
    Ok(m.genotype)
}

/// Resample each consumed gene with probability `rate`. Returns the number
/// of genes resampled.
pub fn mutate_in_place(genotype: &mut Genotype, rate: f64, grammar: &Grammar, rng: &mut Rng) -> usize {
    assert!((0.0..=1.0).contains(&rate), "mutation rate must lie in [0, 1]");
    let mut count = 0;
    for (nt, list) in genotype.genes.iter_mut() {
        let Ok(alts) = grammar.expansions(nt) else {
            continue;
        };
        let active = match &genotype.consumed {
            Some(c) => c.get(nt).copied().unwrap_or(0).min(list.len()),
            None => list.len(),
        };
        for gene in &mut list[..active] {
            if rng.random::<f64>() < rate {
                *gene = rng.random_range(0..alts.len()) as u32;
                count += 1;
            }
        }
    }
    count
}

pub fn mutate(genotype: &Genotype, rate: f64, grammar: &Grammar, rng: &mut Rng) -> Genotype {
    let mut out = genotype.clone();
    mutate_in_place(&mut out, rate, grammar, rng);
    out
}

/// Per-nonterminal uniform crossover: the child takes each whole gene list
/// from one parent or the other with equal probability.
pub fn crossover(a: &Genotype, b: &Genotype, rng: &mut Rng) -> Genotype {
    let keys: std::collections::BTreeSet<&String> = a.genes.keys().chain(b.genes.keys()).collect();
    let mut genes = BTreeMap::new();
    let mut consumed = BTreeMap::new();
    let track = a.consumed.is_some() && b.consumed.is_some();
    for key in keys {
        let parent = if rng.random::<bool>() { a } else { b };
        if let Some(list) = parent.genes.get(key) {
            genes.insert(key.clone(), list.clone());
        }
        if let Some(c) = parent.consumed.as_ref().and_then(|c| c.get(key)) {
            consumed.insert(key.clone(), *c);
        }
    }
    Genotype {
        genes,
        consumed: track.then_some(consumed),
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Individual {
    pub id: u64,
    pub genotype: Genotype,
    /// Canonical phenotype text, filled in after mapping and decoding.
    pub phenotype: Option<String>,
    pub fitness: Option<f64>,
}

impl Individual {
    pub fn new(id: u64, genotype: Genotype) -> Self {
        Self {
            id,
            genotype,
            phenotype: None,
            fitness: None,
        }
    }

    pub fn fitness_or_floor(&self) -> f64 {
        self.fitness.unwrap_or(f64::NEG_INFINITY)
    }
}

/// `a` ranks above `b`: higher fitness, then lower id.
pub fn better(a: &Individual, b: &Individual) -> bool {
    let (fa, fb) = (a.fitness_or_floor(), b.fitness_or_floor());
    fa > fb || (fa == fb && a.id < b.id)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvoParams {
    pub population_size: usize,
    pub generations: usize,
    pub tournament_size: usize,
    pub mutation_rate: f64,
    pub crossover_rate: f64,
    pub elitism: usize,
    pub max_depth: usize,
    pub seed: u64,
}

impl Default for EvoParams {
    fn default() -> Self {
        Self {
            population_size: 20,
            generations: 1500,
            tournament_size: 5,
            mutation_rate: 0.15,
            crossover_rate: 0.9,
            elitism: 1,
            max_depth: 6,
            seed: 0,
        }
    }
}

impl EvoParams {
    pub fn validate(&self) -> Result<(), String> {
        if self.population_size == 0 {
            return Err("population_size must be positive".into());
        }
        if self.tournament_size == 0 || self.tournament_size > self.population_size {
            return Err("tournament_size must lie in 1..=population_size".into());
        }
        if !(0.0..=1.0).contains(&self.mutation_rate) {
            return Err("mutation_rate must lie in [0, 1]".into());
        }
        if !(0.0..=1.0).contains(&self.crossover_rate) {
            return Err("crossover_rate must lie in [0, 1]".into());
        }
        if self.elitism >= self.population_size {
            return Err("elitism must be smaller than population_size".into());
        }
        if self.max_depth == 0 {
            return Err("max_depth must be positive".into());
        }
        Ok(())
    }
}

/// Best member of a uniformly drawn `k`-subset of `population`.
pub fn tournament_select<'p>(population: &'p [Individual], k: usize, rng: &mut Rng) -> &'p Individual {
    assert!(!population.is_empty(), "tournament on an empty population");
    let k = k.clamp(1, population.len());
    let picks = index::sample(rng, population.len(), k);
    let mut best = &population[picks.index(0)];
    for i in picks.iter().skip(1) {
        if better(&population[i], best) {
            best = &population[i];
        }
    }
    best
}

/// Find a genotype whose derivation spells `target` (whitespace ignored).
/// Returns the first parse in alternative order that respects the depth
/// limit, or `None`.
pub fn encode(grammar: &Grammar, target: &str, max_depth: usize) -> Option<Genotype> {
    let chars: String = target.chars().filter(|c| !c.is_whitespace()).collect();
    let mut enc = Encoder {
        grammar,
        heights: grammar.min_heights(),
        max_depth: max_depth.max(1),
        target: chars.as_bytes(),
        depth: BTreeMap::new(),
        budget: 2_000_000,
    };
    let parses = enc.parse_nt(grammar.start(), 0);
    let (_, choices) = parses.into_iter().find(|(end, _)| *end == chars.len())?;
    let mut genes: BTreeMap<String, Vec<u32>> = BTreeMap::new();
    for (nt, c) in choices {
        genes.entry(nt).or_default().push(c as u32);
    }
    Some(Genotype::new(genes))
}

type Parse = (usize, Vec<(String, usize)>);

struct Encoder<'a> {
    grammar: &'a Grammar,
    heights: BTreeMap<String, Option<usize>>,
    max_depth: usize,
    target: &'a [u8],
    depth: BTreeMap<String, usize>,
    budget: usize,
}

impl Encoder<'_> {
    fn parse_nt(&mut self, nt: &str, pos: usize) -> Vec<Parse> {
        if self.budget == 0 {
            return Vec::new();
        }
        self.budget -= 1;
        let Ok(alts) = self.grammar.expansions(nt) else {
            return Vec::new();
        };
        let d = {
            let e = self.depth.entry(nt.to_string()).or_insert(0);
            *e += 1;
            *e
        };
        let allowed: Vec<usize> = if d >= self.max_depth {
            shortest_alternatives(self.grammar, &self.heights, nt).unwrap_or_default()
        } else {
            (0..alts.len()).collect()
        };
        let mut out = Vec::new();
        for choice in allowed {
            let mut partial: Vec<Parse> = vec![(pos, vec![(nt.to_string(), choice)])];
            for sym in &alts[choice].symbols {
                let mut next = Vec::new();
                for (p, seq) in partial {
                    match sym {
                        Symbol::Terminal(t) => {
                            if self.target[p..].starts_with(t.as_bytes()) {
                                next.push((p + t.len(), seq));
                            }
                        }
                        Symbol::NonTerminal(child) => {
                            for (end, sub) in self.parse_nt(child, p) {
                                let mut s = seq.clone();
                                s.extend(sub);
                                next.push((end, s));
                            }
                        }
                    }
                }
                partial = next;
                if partial.is_empty() {
                    break;
                }
            }
            out.extend(partial);
            if out.len() > 64 {
                break;
            }
        }
        *self.depth.get_mut(nt).expect("entered above") -= 1;
        out
    }
}
