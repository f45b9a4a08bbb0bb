//! Exploration intent as a graph of attributes.
//!
//! Nodes are single-attribute distributions of interest and edges are pairwise
//! correlations of interest. A request over an attribute set yields every
//! marginal and pairwise joint among those attributes, i.e. a complete graph on
//! the set. A strategy *prototype* is a minimal group of attribute sets whose
//! complete graphs cover the whole intent.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::accuracy::Target;
use crate::curator::BudgetLedger;
use crate::schema::Schema;

/// Additive baseline of every target weight.
pub const LAMBDA: f64 = 1.0;
pub const DEFAULT_MAX_SET_SIZE: usize = 3;
pub const DEFAULT_MAX_PROTOTYPES: usize = 64;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum IntentError {
    #[error("unknown attribute `{0}`")]
    UnknownAttribute(String),
    #[error("edge {0}–{1} already exists")]
    DuplicateEdge(String, String),
    #[error("self-loop on `{0}`")]
    SelfLoop(String),
    #[error("no edge {0}–{1}")]
    MissingEdge(String, String),
    #[error("progress {p} is below the spent-budget floor {floor}")]
    ProgressBelowFloor { p: f64, floor: f64 },
    #[error("progress {0} is above 1")]
    ProgressAboveOne(f64),
}

fn ordered(a: &str, b: &str) -> (String, String) {
    if a <= b {
        (a.to_string(), b.to_string())
    } else {
        (b.to_string(), a.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Mutation {
    AddNode { attribute: String },
    RemoveNode { attribute: String },
    AddEdge { a: String, b: String },
    RemoveEdge { a: String, b: String },
}

/// Undirected simple graph over attribute names.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IntentGraph {
    nodes: BTreeSet<String>,
    /// Stored with the lexicographically smaller endpoint first.
    edges: BTreeSet<(String, String)>,
}

impl IntentGraph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds a graph in one go; edge endpoints are added as nodes.
    pub fn from_parts<S: AsRef<str>>(nodes: &[S], edges: &[(S, S)], schema: &Schema) -> Result<Self, IntentError> {
        let mut g = Self::new();
        for n in nodes {
            g.edit(Mutation::AddNode { attribute: n.as_ref().to_string() }, schema)?;
        }
        for (a, b) in edges {
            g.edit(Mutation::AddEdge { a: a.as_ref().to_string(), b: b.as_ref().to_string() }, schema)?;
        }
        Ok(g)
    }

    pub fn edit(&mut self, mutation: Mutation, schema: &Schema) -> Result<(), IntentError> {
        let known = |a: &str| schema.index_of(a).map(|_| ()).map_err(|_| IntentError::UnknownAttribute(a.to_string()));
        match mutation {
            Mutation::AddNode { attribute } => {
                known(&attribute)?;
                self.nodes.insert(attribute);
            }
            Mutation::RemoveNode { attribute } => {
                if !self.nodes.remove(&attribute) {
                    return Err(IntentError::UnknownAttribute(attribute));
                }
                self.edges.retain(|(a, b)| *a != attribute && *b != attribute);
            }
            Mutation::AddEdge { a, b } => {
                known(&a)?;
                known(&b)?;
                if a == b {
                    return Err(IntentError::SelfLoop(a));
                }
                let e = ordered(&a, &b);
                if self.edges.contains(&e) {
                    return Err(IntentError::DuplicateEdge(e.0, e.1));
                }
                self.nodes.insert(a);
                self.nodes.insert(b);
                self.edges.insert(e);
            }
            Mutation::RemoveEdge { a, b } => {
                let e = ordered(&a, &b);
                if !self.edges.remove(&e) {
                    return Err(IntentError::MissingEdge(e.0, e.1));
                }
            }
        }
        Ok(())
    }

    pub fn nodes(&self) -> impl Iterator<Item = &str> {
        self.nodes.iter().map(String::as_str)
    }

    pub fn edges(&self) -> impl Iterator<Item = (&str, &str)> {
        self.edges.iter().map(|(a, b)| (a.as_str(), b.as_str()))
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn has_edge(&self, a: &str, b: &str) -> bool {
        self.edges.contains(&ordered(a, b))
    }

    fn degree(&self, v: &str) -> usize {
        self.edges.iter().filter(|(a, b)| a == v || b == v).count()
    }

    /// Accuracy targets: every edge, plus every node without an incident edge.
    pub fn targets(&self) -> Vec<Target> {
        let mut t: Vec<Target> = self.edges().map(|(a, b)| Target::edge(a, b)).collect();
        t.extend(self.nodes().filter(|v| self.degree(v) == 0).map(Target::node));
        t
    }
}

/// Analyst's estimate of exploration progress, floored by the spent budget fraction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProgressEstimate {
    p: f64,
    floor: f64,
}

impl Default for ProgressEstimate {
    fn default() -> Self {
        Self { p: 1.0, floor: 0.0 }
    }
}

impl ProgressEstimate {
    pub fn p(&self) -> f64 {
        self.p
    }

    pub fn floor(&self) -> f64 {
        self.floor
    }

    pub fn set(&mut self, p: f64) -> Result<(), IntentError> {
        if p > 1.0 || p.is_nan() {
            return Err(IntentError::ProgressAboveOne(p));
        }
        if p < self.floor {
            return Err(IntentError::ProgressBelowFloor { p, floor: self.floor });
        }
        self.p = p;
        Ok(())
    }

    /// Raises the floor to the spent fraction of the ledger; never lowers it.
    pub fn update_floor(&mut self, ledger: &BudgetLedger) {
        let spent = (ledger.spent() / ledger.epsilon_total()).clamp(0.0, 1.0);
        self.floor = self.floor.max(spent);
        self.p = self.p.max(self.floor);
    }
}

/// Betweenness-derived weights of intent targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Weights {
    pub centrality: BTreeMap<String, f64>,
    pub lambda: f64,
}

impl Weights {
    /// `λ + mean centrality` of the target's attributes.
    pub fn target_weight(&self, target: &Target) -> f64 {
        let c: f64 = target.attributes.iter().map(|a| self.centrality.get(a).copied().unwrap_or(0.0)).sum();
        self.lambda + c / target.attributes.len() as f64
    }

    pub fn edge_weight(&self, a: &str, b: &str) -> f64 {
        self.target_weight(&Target::edge(a, b))
    }
}

/// Normalized shortest-path betweenness (Brandes), divisor `(n−1)(n−2)/2`.
pub fn betweenness(graph: &IntentGraph) -> BTreeMap<String, f64> {
    let names: Vec<&str> = graph.nodes().collect();
    let n = names.len();
    let index: BTreeMap<&str, usize> = names.iter().enumerate().map(|(i, &v)| (v, i)).collect();
    let mut adj = vec![Vec::new(); n];
    for (a, b) in graph.edges() {
        adj[index[a]].push(index[b]);
        adj[index[b]].push(index[a]);
    }
    let mut cb = vec![0.0; n];
    for s in 0..n {
        let mut stack = Vec::with_capacity(n);
        let mut preds: Vec<Vec<usize>> = vec![Vec::new(); n];
        let mut sigma = vec![0.0; n];
        let mut dist = vec![-1i64; n];
        sigma[s] = 1.0;
        dist[s] = 0;
        let mut queue = VecDeque::from([s]);
        while let Some(v) = queue.pop_front() {
            stack.push(v);
            for &w in &adj[v] {
                if dist[w] < 0 {
                    dist[w] = dist[v] + 1;
                    queue.push_back(w);
                }
                if dist[w] == dist[v] + 1 {
                    sigma[w] += sigma[v];
                    preds[w].push(v);
                }
            }
        }
        let mut delta = vec![0.0; n];
        while let Some(w) = stack.pop() {
            for &v in &preds[w] {
                delta[v] += sigma[v] / sigma[w] * (1.0 + delta[w]);
            }
            if w != s {
                cb[w] += delta[w];
            }
        }
    }
    // Each unordered pair was counted from both ends.
    let divisor = if n > 2 { ((n - 1) * (n - 2)) as f64 / 2.0 } else { 0.0 };
    names
        .iter()
        .zip(cb)
        .map(|(&v, c)| (v.to_string(), if divisor > 0.0 { c / 2.0 / divisor } else { 0.0 }))
        .collect()
}

pub fn betweenness_weights(graph: &IntentGraph) -> Weights {
    Weights { centrality: betweenness(graph), lambda: LAMBDA }
}

/// A minimal group of attribute sets covering the intent.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Prototype {
    /// Each set sorted; sets in lexicographic order.
    pub attribute_sets: Vec<Vec<String>>,
    /// Target and the index of the set credited with it (the earliest covering set).
    pub assignment: Vec<(Target, usize)>,
}

impl Prototype {
    fn from_sets(mut sets: Vec<Vec<String>>, targets: &[Target]) -> Self {
        for s in &mut sets {
            s.sort();
        }
        sets.sort();
        let assignment = targets
            .iter()
            .map(|t| {
                let i = sets
                    .iter()
                    .position(|s| t.attributes.iter().all(|a| s.contains(a)))
                    .expect("prototype covers every target");
                (t.clone(), i)
            })
            .collect();
        Self { attribute_sets: sets, assignment }
    }

    pub fn targets_of(&self, set: usize) -> impl Iterator<Item = &Target> {
        self.assignment.iter().filter(move |(_, s)| *s == set).map(|(t, _)| t)
    }
}

/// Attribute sets that can appear in a prototype: singletons of isolated
/// nodes, and sets of 2..=`max_set_size` intent nodes in which every member
/// has an intent edge to another member. Sets are bitmasks over `nodes`.
fn admissible_sets(nodes: &[&str], graph: &IntentGraph, max_set_size: usize) -> Vec<u32> {
    let n = nodes.len();
    let mut out = Vec::new();
    for mask in 1u32..(1 << n) {
        let size = mask.count_ones() as usize;
        let members: Vec<usize> = (0..n).filter(|i| mask & (1 << i) != 0).collect();
        let ok = if size == 1 {
            graph.degree(nodes[members[0]]) == 0
        } else {
            size <= max_set_size
                && members.iter().all(|&i| members.iter().any(|&j| j != i && graph.has_edge(nodes[i], nodes[j])))
        };
        if ok {
            out.push(mask);
        }
    }
    out
}

/// Lists minimal covers of the intent by complete graphs on admissible
/// attribute sets, fewest sets first, truncated to `max_prototypes`.
pub fn enumerate_prototypes(graph: &IntentGraph, max_set_size: usize, max_prototypes: usize) -> Vec<Prototype> {
    assert!(max_set_size >= 2, "sets must be able to hold an edge");
    let nodes: Vec<&str> = graph.nodes().collect();
    assert!(nodes.len() <= 31, "intent graphs are limited to 31 nodes");
    let targets = graph.targets();
    let bit = |a: &str| 1u32 << nodes.iter().position(|&v| v == a).expect("target attribute in graph");
    let elements: Vec<u32> = targets.iter().map(|t| t.attributes.iter().map(|a| bit(a)).fold(0, |m, b| m | b)).collect();
    let sets = admissible_sets(&nodes, graph, max_set_size);
    // covers[s] = elements covered by set s, as a bitmask over `elements`.
    let covers: Vec<u64> = sets
        .iter()
        .map(|&s| elements.iter().enumerate().filter(|(_, &e)| e & s == e).fold(0u64, |m, (i, _)| m | (1 << i)))
        .collect();
    assert!(elements.len() <= 64, "too many intent targets");
    let all: u64 = if elements.is_empty() { 0 } else { u64::MAX >> (64 - elements.len()) };

    let mut found: BTreeSet<Vec<usize>> = BTreeSet::new();
    let mut chosen = Vec::new();
    if all != 0 {
        search(&covers, all, 0, &mut chosen, &mut found);
    }

    let mut prototypes: Vec<Prototype> = found
        .into_iter()
        .map(|picked| {
            let named = picked
                .iter()
                .map(|&s| (0..nodes.len()).filter(|i| sets[s] & (1 << i) != 0).map(|i| nodes[i].to_string()).collect())
                .collect();
            Prototype::from_sets(named, &targets)
        })
        .collect();
    prototypes.sort_by(|a, b| a.attribute_sets.len().cmp(&b.attribute_sets.len()).then_with(|| a.cmp(b)));
    prototypes.truncate(max_prototypes);
    prototypes
}

/// Branches on the lowest uncovered element, pruning as soon as a chosen set
/// loses its last privately covered element.
fn search(covers: &[u64], all: u64, covered: u64, chosen: &mut Vec<usize>, found: &mut BTreeSet<Vec<usize>>) {
    if covered == all {
        let mut key = chosen.clone();
        key.sort_unstable();
        found.insert(key);
        return;
    }
    let e = (all & !covered).trailing_zeros();
    for (s, &c) in covers.iter().enumerate() {
        if c & (1 << e) == 0 || chosen.contains(&s) {
            continue;
        }
        chosen.push(s);
        if every_set_has_private(covers, chosen) {
            search(covers, all, covered | c, chosen, found);
        }
        chosen.pop();
    }
}

fn every_set_has_private(covers: &[u64], chosen: &[usize]) -> bool {
    chosen.iter().enumerate().all(|(i, &s)| {
        let others = chosen.iter().enumerate().filter(|&(j, _)| j != i).fold(0u64, |m, (_, &t)| m | covers[t]);
        covers[s] & !others != 0
    })
}
