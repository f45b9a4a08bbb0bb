//! Strategy recommendation by tabular Q-learning.
//!
//! Every prototype from [`enumerate_prototypes`] is completed into concrete
//! request sequences by its own Q-learning agent. An action requests one
//! still-unused attribute set of the prototype with one candidate division
//! and one budget level (a multiple of `ε_total / 20`). The reward of an
//! action is the negated, weighted penalty (`E_s + E_n`) of the intent
//! targets credited to that set; the final action of an episode also earns
//! the budget-consumption bonus [`budget_bonus`].
//!
//! Penalties are evaluated against one simulated dataset drawn from the
//! current [`SimulationModel`]; the planner never touches the curated table.
//! Greedy rollouts from the best first actions yield candidates, which are
//! ranked by weighted penalty (lower is better).

use std::collections::{BTreeSet, HashMap};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::accuracy::{AccuracyContext, AccuracyError, PenaltyParts, Target};
use crate::curator::{BudgetLedger, DataRequest, BUDGET_TOL};
use crate::intent::{betweenness_weights, enumerate_prototypes, IntentGraph, ProgressEstimate, Prototype, Weights};
use crate::schema::{validate_division, AttributeKind, SetDivision, ValueDivision};
use crate::simulator::SimulationModel;

/// Bins whose simulated mass is below this fraction of the largest bin are
/// merged with their small neighbours by the adaptive division.
pub const ADAPTIVE_THRESHOLD: f64 = 0.05;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum RecommendError {
    #[error("the intent graph is empty")]
    EmptyIntent,
    #[error("no feasible action: remaining budget {remaining} cannot fund the intent")]
    NoFeasibleAction { remaining: f64 },
    #[error("unknown attribute `{0}`")]
    UnknownAttribute(String),
    #[error("recommendation cancelled")]
    Cancelled,
    #[error(transparent)]
    Accuracy(#[from] AccuracyError),
}

/// Q-learning and search settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QConfig {
    pub alpha: f64,
    pub gamma: f64,
    /// Initial exploration rate of the ε-greedy policy.
    pub epsilon_greedy: f64,
    /// Multiplicative decay of the exploration rate per episode.
    pub epsilon_decay: f64,
    pub episodes: usize,
    pub seed: u64,
    /// Weight of the budget-consumption bonus; negative.
    pub w: f64,
    /// Budget levels are multiples of `ε_total / budget_steps`.
    pub budget_steps: usize,
    pub max_set_size: usize,
    pub max_prototypes: usize,
    /// Greedy rollouts per prototype, each from a distinct first action.
    pub rollout_starts: usize,
}

impl Default for QConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            gamma: 0.95,
            epsilon_greedy: 0.2,
            epsilon_decay: 0.999,
            episodes: 5000,
            seed: 0,
            w: -0.1,
            budget_steps: 20,
            max_set_size: crate::intent::DEFAULT_MAX_SET_SIZE,
            max_prototypes: crate::intent::DEFAULT_MAX_PROTOTYPES,
            rollout_starts: 8,
        }
    }
}

/// `B_bc = w · N · (p + 1)/2 · |p − (ε_total − ε_remain)/ε_total|`.
pub fn budget_bonus(p: f64, epsilon_total: f64, epsilon_remain: f64, n: usize, w: f64) -> f64 {
    w * n as f64 * ((p + 1.0) / 2.0) * (p - (epsilon_total - epsilon_remain) / epsilon_total).abs()
}

/// Divisions the planner may use for one attribute: the finest one, uniform
/// merges by 2 and 4, and an adaptive merge of runs of sparse bins.
/// Categorical attributes only get singleton groups.
pub fn candidate_divisions(attribute: &str, model: &SimulationModel) -> Result<Vec<ValueDivision>, RecommendError> {
    let attr = model
        .schema
        .get(attribute)
        .map_err(|_| RecommendError::UnknownAttribute(attribute.to_string()))?;
    if !matches!(attr.kind, AttributeKind::Numerical { .. }) {
        return Ok(vec![ValueDivision::finest(attr)]);
    }
    let n = attr.finest_bins();
    let mut starts: Vec<Vec<usize>> = vec![(0..n).collect(), (0..n).step_by(2).collect(), (0..n).step_by(4).collect()];

    let p = &model.marginal(attribute).expect("model covers the schema").probabilities;
    let max = p.iter().copied().fold(0.0, f64::max);
    let sparse: Vec<bool> = p.iter().map(|&x| x < ADAPTIVE_THRESHOLD * max).collect();
    let adaptive: Vec<usize> = (0..n).filter(|&i| i == 0 || !(sparse[i] && sparse[i - 1])).collect();
    starts.push(adaptive);

    let mut seen = BTreeSet::new();
    Ok(starts
        .into_iter()
        .filter(|s| seen.insert(s.clone()))
        .map(|s| ValueDivision::from_bin_starts(attr, &s))
        .collect())
}

/// Abstract Q-learning state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct QState {
    /// Bit `i` set once the prototype's `i`-th set has been requested.
    pub requested_mask: u32,
    /// `floor(budget_steps · spent / ε_total)`, counting budget spent before planning.
    pub budget_bucket: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Action {
    pub set: usize,
    pub division: usize,
    /// Budget level in units of `ε_total / budget_steps`, starting at 1.
    pub level: usize,
}

/// One concrete division choice for a prototype set, with the ε-independent
/// penalty parts of each target credited to that set.
#[derive(Debug, Clone)]
struct SetOption {
    division: SetDivision,
    targets: Vec<(Target, f64, PenaltyParts)>,
}

/// Learned action values, keyed by abstract state.
#[derive(Debug, Clone, PartialEq)]
pub struct QTable {
    values: HashMap<QState, Vec<f64>>,
    n_actions: usize,
}

impl QTable {
    fn new(n_actions: usize) -> Self {
        Self { values: HashMap::new(), n_actions }
    }

    pub fn get(&self, state: &QState, action: usize) -> f64 {
        self.values.get(state).map_or(0.0, |v| v[action])
    }

    fn row(&mut self, state: QState) -> &mut Vec<f64> {
        let n = self.n_actions;
        self.values.entry(state).or_insert_with(|| vec![0.0; n])
    }

    pub fn states(&self) -> usize {
        self.values.len()
    }
}

/// Episode position: which sets are done and how much was spent in the episode.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Position {
    mask: u32,
    spent: f64,
}

/// The MDP of one prototype.
#[derive(Debug)]
pub struct StrategyEnv {
    prototype: Prototype,
    options: Vec<Vec<SetOption>>,
    offsets: Vec<usize>,
    n_actions: usize,
    unit: f64,
    epsilon_total: f64,
    spent_before: f64,
    remain: f64,
    p: f64,
    n: usize,
    config: QConfig,
}

impl StrategyEnv {
    pub fn new(
        prototype: &Prototype,
        ctx: &AccuracyContext,
        model: &SimulationModel,
        weights: &Weights,
        ledger: &BudgetLedger,
        progress: &ProgressEstimate,
        config: &QConfig,
    ) -> Result<Self, RecommendError> {
        assert!(prototype.attribute_sets.len() <= 31, "prototype too large");
        let mut options = Vec::with_capacity(prototype.attribute_sets.len());
        for (i, set) in prototype.attribute_sets.iter().enumerate() {
            let per_attr = set
                .iter()
                .map(|a| candidate_divisions(a, model))
                .collect::<Result<Vec<_>, _>>()?;
            let mut set_options = Vec::new();
            for combo in cartesian(&per_attr.iter().map(Vec::len).collect::<Vec<_>>()) {
                let division = SetDivision::new(combo.iter().enumerate().map(|(j, &d)| per_attr[j][d].clone()).collect());
                let layout = validate_division(&division, &model.schema).map_err(AccuracyError::from)?;
                let targets = prototype
                    .targets_of(i)
                    .map(|t| Ok((t.clone(), weights.target_weight(t), ctx.penalty_parts(&layout, t)?)))
                    .collect::<Result<Vec<_>, RecommendError>>()?;
                set_options.push(SetOption { division, targets });
            }
            options.push(set_options);
        }
        let mut offsets = Vec::with_capacity(options.len());
        let mut n_actions = 0;
        for o in &options {
            offsets.push(n_actions);
            n_actions += o.len() * config.budget_steps;
        }
        Ok(Self {
            prototype: prototype.clone(),
            options,
            offsets,
            n_actions,
            unit: ledger.epsilon_total() / config.budget_steps as f64,
            epsilon_total: ledger.epsilon_total(),
            spent_before: ledger.spent(),
            remain: ledger.epsilon_remain(),
            p: progress.p(),
            n: model.n,
            config: config.clone(),
        })
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    fn sets(&self) -> usize {
        self.options.len()
    }

    fn complete_mask(&self) -> u32 {
        (1u32 << self.sets()) - 1
    }

    pub fn decode(&self, index: usize) -> Action {
        let set = self.offsets.iter().rposition(|&o| o <= index).expect("index in range");
        let local = index - self.offsets[set];
        Action { set, division: local / self.config.budget_steps, level: local % self.config.budget_steps + 1 }
    }

    fn encode(&self, a: Action) -> usize {
        self.offsets[a.set] + a.division * self.config.budget_steps + (a.level - 1)
    }

    fn state(&self, pos: Position) -> QState {
        let frac = (self.spent_before + pos.spent) / self.epsilon_total;
        let bucket = ((frac * self.config.budget_steps as f64) + 1e-9).floor() as usize;
        QState { requested_mask: pos.mask, budget_bucket: bucket.min(self.config.budget_steps) as u8 }
    }

    /// Budget the action spends from `pos`, if it is legal there. Earlier
    /// requests must leave at least one level for each set still to come; the
    /// last request may take the whole remainder.
    fn action_epsilon(&self, pos: Position, a: Action) -> Option<f64> {
        if pos.mask & (1 << a.set) != 0 {
            return None;
        }
        let remain_now = self.remain - pos.spent;
        let left_after = self.sets() - pos.mask.count_ones() as usize - 1;
        let eps = a.level as f64 * self.epsilon_total / self.config.budget_steps as f64;
        if left_after > 0 {
            (eps + left_after as f64 * self.unit <= remain_now + BUDGET_TOL).then_some(eps)
        } else if eps <= remain_now + BUDGET_TOL {
            Some(eps.min(remain_now))
        } else {
            let below = (a.level - 1) as f64 * self.unit;
            (below < remain_now - BUDGET_TOL).then_some(remain_now)
        }
    }

    fn legal(&self, pos: Position) -> Vec<(usize, f64)> {
        let mut out = Vec::new();
        for set in 0..self.sets() {
            if pos.mask & (1 << set) != 0 {
                continue;
            }
            for division in 0..self.options[set].len() {
                for level in 1..=self.config.budget_steps {
                    let a = Action { set, division, level };
                    if let Some(eps) = self.action_epsilon(pos, a) {
                        out.push((self.encode(a), eps));
                    }
                }
            }
        }
        out
    }

    /// Weighted penalty of the targets credited to `set` under one option.
    fn penalty(&self, set: usize, division: usize, epsilon: f64) -> f64 {
        self.options[set][division].targets.iter().map(|(_, w, parts)| w * parts.penalty(epsilon)).sum()
    }

    /// Reward of taking `a` (spending `epsilon`) from `pos`.
    pub fn step_reward(&self, a: Action, epsilon: f64, spent_before_action: f64, mask_before: u32) -> f64 {
        let mut r = -self.penalty(a.set, a.division, epsilon);
        if mask_before | (1 << a.set) == self.complete_mask() {
            let remain_after = self.remain - spent_before_action - epsilon;
            r += budget_bonus(self.p, self.epsilon_total, remain_after.max(0.0), self.n, self.config.w);
        }
        r
    }

    fn step(&self, pos: Position, index: usize, eps: f64) -> (f64, Position) {
        let a = self.decode(index);
        let r = self.step_reward(a, eps, pos.spent, pos.mask);
        (r, Position { mask: pos.mask | (1 << a.set), spent: pos.spent + eps })
    }

    fn start(&self) -> Position {
        Position { mask: 0, spent: 0.0 }
    }

    fn best(q: &QTable, state: &QState, legal: &[(usize, f64)]) -> (usize, f64) {
        let mut best = legal[0];
        let mut best_q = q.get(state, best.0);
        for &cand in &legal[1..] {
            let v = q.get(state, cand.0);
            if v > best_q {
                best = cand;
                best_q = v;
            }
        }
        best
    }

    /// Standard one-step Q-learning; deterministic under `config.seed`.
    pub fn train(&self, cancel: Option<&AtomicBool>) -> Result<QTable, RecommendError> {
        if self.legal(self.start()).is_empty() {
            return Err(RecommendError::NoFeasibleAction { remaining: self.remain });
        }
        let cfg = &self.config;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut q = QTable::new(self.n_actions);
        let mut explore = cfg.epsilon_greedy;
        for _ in 0..cfg.episodes {
            if cancel.is_some_and(|c| c.load(Ordering::Relaxed)) {
                return Err(RecommendError::Cancelled);
            }
            let mut pos = self.start();
            loop {
                let legal = self.legal(pos);
                if legal.is_empty() {
                    break;
                }
                let s = self.state(pos);
                let (a, eps) = if rng.random::<f64>() < explore {
                    legal[rng.random_range(0..legal.len())]
                } else {
                    Self::best(&q, &s, &legal)
                };
                let (r, next) = self.step(pos, a, eps);
                let terminal = next.mask == self.complete_mask();
                let future = if terminal {
                    0.0
                } else {
                    let nl = self.legal(next);
                    if nl.is_empty() { 0.0 } else { q.get(&self.state(next), Self::best(&q, &self.state(next), &nl).0) }
                };
                let row = q.row(s);
                row[a] += cfg.alpha * (r + cfg.gamma * future - row[a]);
                if terminal {
                    break;
                }
                pos = next;
            }
            explore *= cfg.epsilon_decay;
        }
        Ok(q)
    }

    /// Greedy rollout after a fixed first action.
    fn rollout(&self, q: &QTable, first: (usize, f64)) -> Vec<(Action, f64)> {
        let mut steps = Vec::new();
        let mut pos = self.start();
        let mut next = Some(first);
        while let Some((a, eps)) = next {
            steps.push((self.decode(a), eps));
            pos = self.step(pos, a, eps).1;
            if pos.mask == self.complete_mask() {
                break;
            }
            let legal = self.legal(pos);
            next = (!legal.is_empty()).then(|| Self::best(q, &self.state(pos), &legal));
        }
        steps
    }

    fn candidate(&self, steps: &[(Action, f64)]) -> StrategyCandidate {
        let mut requests = Vec::with_capacity(steps.len());
        let mut per_target = Vec::new();
        for (order, &(a, eps)) in steps.iter().enumerate() {
            let option = &self.options[a.set][a.division];
            requests.push(DataRequest { division: option.division.clone(), epsilon: eps, order });
            for (t, w, parts) in &option.targets {
                per_target.push(TargetPenalty {
                    target: t.clone(),
                    weight: *w,
                    request: order,
                    e_s: parts.e_s,
                    e_n: parts.e_n(eps),
                    penalty: parts.penalty(eps),
                });
            }
        }
        let total: f64 = steps.iter().map(|(_, e)| e).sum();
        let bonus = budget_bonus(self.p, self.epsilon_total, (self.remain - total).max(0.0), self.n, self.config.w);
        StrategyCandidate::new(requests, per_target, bonus)
    }

    /// Candidates from greedy rollouts seeded with the best first actions.
    pub fn candidates(&self, q: &QTable) -> Vec<StrategyCandidate> {
        let start = self.start();
        let s = self.state(start);
        let mut firsts = self.legal(start);
        firsts.sort_by(|a, b| q.get(&s, b.0).total_cmp(&q.get(&s, a.0)).then(a.0.cmp(&b.0)));
        firsts
            .into_iter()
            .take(self.config.rollout_starts.max(1))
            .map(|f| self.candidate(&self.rollout(q, f)))
            .filter(|c| c.requests.len() == self.sets())
            .collect()
    }

    pub fn prototype(&self) -> &Prototype {
        &self.prototype
    }
}

/// All index tuples of a grid with the given extents.
fn cartesian(extents: &[usize]) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new()];
    for &e in extents {
        out = out
            .into_iter()
            .flat_map(|prefix| {
                (0..e).map(move |i| {
                    let mut v = prefix.clone();
                    v.push(i);
                    v
                })
            })
            .collect();
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetPenalty {
    pub target: Target,
    pub weight: f64,
    /// Order of the request credited with this target.
    pub request: usize,
    pub e_s: f64,
    pub e_n: f64,
    pub penalty: f64,
}

/// An ordered request sequence covering the whole intent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyCandidate {
    pub requests: Vec<DataRequest>,
    pub total_epsilon: f64,
    pub per_target: Vec<TargetPenalty>,
    /// `Σ weight · penalty` over targets; lower is better.
    pub score: f64,
    pub budget_bonus: f64,
}

impl StrategyCandidate {
    fn new(requests: Vec<DataRequest>, per_target: Vec<TargetPenalty>, budget_bonus: f64) -> Self {
        let total_epsilon = requests.iter().map(|r| r.epsilon).sum();
        let score = per_target.iter().map(|t| t.weight * t.penalty).sum();
        Self { requests, total_epsilon, per_target, score, budget_bonus }
    }

    fn sort_key(&self) -> String {
        serde_json::to_string(&self.requests).expect("requests serialize")
    }
}

/// Orders candidates by score, then total ε, then request sequence.
fn rank(candidates: &mut Vec<StrategyCandidate>) {
    let mut keyed: Vec<(String, StrategyCandidate)> = candidates.drain(..).map(|c| (c.sort_key(), c)).collect();
    keyed.sort_by(|(ka, a), (kb, b)| {
        a.score.total_cmp(&b.score).then(a.total_epsilon.total_cmp(&b.total_epsilon)).then_with(|| ka.cmp(kb))
    });
    keyed.dedup_by(|(ka, _), (kb, _)| ka == kb);
    candidates.extend(keyed.into_iter().map(|(_, c)| c));
}

/// Everything the planner may look at. There is deliberately no dataset here.
#[derive(Debug, Clone, Copy)]
pub struct PlannerInput<'a> {
    pub intent: &'a IntentGraph,
    pub model: &'a SimulationModel,
    pub ledger: &'a BudgetLedger,
    pub progress: &'a ProgressEstimate,
}

/// Hooks for running [`recommend`] as a background job.
#[derive(Default, Clone, Copy)]
pub struct JobControl<'a> {
    pub cancel: Option<&'a AtomicBool>,
    /// Called with the completed fraction of prototypes.
    pub on_progress: Option<&'a (dyn Fn(f64) + Sync)>,
}

/// Trains one agent per prototype and returns the `k` best candidates.
pub fn recommend(
    input: PlannerInput<'_>,
    config: &QConfig,
    k: usize,
    control: JobControl<'_>,
) -> Result<Vec<StrategyCandidate>, RecommendError> {
    if input.intent.is_empty() {
        return Err(RecommendError::EmptyIntent);
    }
    if input.ledger.epsilon_remain() <= BUDGET_TOL {
        return Err(RecommendError::NoFeasibleAction { remaining: input.ledger.epsilon_remain() });
    }
    let weights = betweenness_weights(input.intent);
    let prototypes = enumerate_prototypes(input.intent, config.max_set_size, config.max_prototypes);
    let ctx = AccuracyContext::new(input.model);
    let done = AtomicUsize::new(0);
    let total = prototypes.len();

    let per_proto: Vec<Result<Vec<StrategyCandidate>, RecommendError>> = prototypes
        .par_iter()
        .enumerate()
        .map(|(i, proto)| {
            let cfg = QConfig { seed: config.seed.wrapping_add(i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15), ..config.clone() };
            let env = StrategyEnv::new(proto, &ctx, input.model, &weights, input.ledger, input.progress, &cfg)?;
            let out = match env.train(control.cancel) {
                Ok(q) => Ok(env.candidates(&q)),
                Err(RecommendError::NoFeasibleAction { .. }) => Ok(Vec::new()),
                Err(e) => Err(e),
            };
            let finished = done.fetch_add(1, Ordering::Relaxed) + 1;
            if let Some(cb) = control.on_progress {
                cb(finished as f64 / total as f64);
            }
            out
        })
        .collect();

    let mut all = Vec::new();
    for r in per_proto {
        all.extend(r?);
    }
    if all.is_empty() {
        return Err(RecommendError::NoFeasibleAction { remaining: input.ledger.epsilon_remain() });
    }
    rank(&mut all);
    all.truncate(k);
    Ok(all)
}

/// One finest-granularity request per target, remaining budget split evenly.
pub fn naive_baseline(input: PlannerInput<'_>, ctx: &AccuracyContext) -> Result<StrategyCandidate, RecommendError> {
    let targets = input.intent.targets();
    if targets.is_empty() {
        return Err(RecommendError::EmptyIntent);
    }
    let weights = betweenness_weights(input.intent);
    let eps = input.ledger.epsilon_remain() / targets.len() as f64;
    let mut requests = Vec::new();
    let mut per_target = Vec::new();
    for (order, t) in targets.iter().enumerate() {
        let names: Vec<&str> = t.attributes.iter().map(String::as_str).collect();
        let division = crate::schema::finest_division(&names, &input.model.schema).map_err(AccuracyError::from)?;
        let layout = validate_division(&division, &input.model.schema).map_err(AccuracyError::from)?;
        let parts = ctx.penalty_parts(&layout, t)?;
        per_target.push(TargetPenalty {
            target: t.clone(),
            weight: weights.target_weight(t),
            request: order,
            e_s: parts.e_s,
            e_n: parts.e_n(eps),
            penalty: parts.penalty(eps),
        });
        requests.push(DataRequest { division, epsilon: eps, order });
    }
    let bonus = budget_bonus(input.progress.p(), input.ledger.epsilon_total(), 0.0, input.model.n, -0.1);
    Ok(StrategyCandidate::new(requests, per_target, bonus))
}
