//! Analyst sessions and their JSON snapshots.
//!
//! A [`Session`] holds everything an analyst may see: the budget ledger, the
//! intent graph, the simulation model, the stored noisy responses, the
//! progress estimate and the status of recommendation jobs. It never holds
//! the raw table; real requests go through a [`Curator`] passed in by the
//! caller.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::accuracy::{ci_half_length, AccuracyError, Recovery, Target, DEFAULT_CONFIDENCE};
use crate::curator::{sample_instance, BudgetLedger, Curator, CuratorError, DataRequest, NoisyResponse};
use crate::intent::{IntentError, IntentGraph, ProgressEstimate};
use crate::recommender::{PlannerInput, StrategyCandidate};
use crate::schema::{validate_division, Schema};
use crate::simulator::{integrate_feedback, marginalize, simulate_response, SimulationError, SimulationModel, Source};

/// Snapshot format version written by [`Session::save`].
pub const SNAPSHOT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum SessionError {
    #[error(transparent)]
    Curator(#[from] CuratorError),
    #[error(transparent)]
    Intent(#[from] IntentError),
    #[error(transparent)]
    Simulation(#[from] SimulationError),
    #[error(transparent)]
    Accuracy(#[from] AccuracyError),
    #[error("no response `{0}`")]
    UnknownResponse(String),
    #[error("snapshot version {found} is not supported (expected {SNAPSHOT_VERSION})")]
    Version { found: u32 },
    #[error("corrupt session snapshot: {0}")]
    Corrupt(String),
    #[error("session dataset is `{expected}`, curator holds a table with a different schema")]
    DatasetMismatch { expected: String },
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum JobStatus {
    Pending,
    Running { fraction: f64 },
    Done { candidates: Vec<StrategyCandidate> },
    Failed { error: String },
    Cancelled,
}

impl JobStatus {
    pub fn is_active(&self) -> bool {
        matches!(self, JobStatus::Pending | JobStatus::Running { .. })
    }
}

/// Request body of an intent replacement.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntentSpec {
    #[serde(default)]
    pub nodes: Vec<String>,
    #[serde(default)]
    pub edges: Vec<(String, String)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpearmanGuess {
    pub a: String,
    pub b: String,
    pub rho: f64,
}

/// Analyst-entered finest marginals and rank-correlation guesses.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Priors {
    #[serde(default)]
    pub marginals: BTreeMap<String, Vec<f64>>,
    #[serde(default)]
    pub spearman: Vec<SpearmanGuess>,
}

/// Best stored result for one intent target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryEntry {
    pub target: Target,
    /// Absent when no stored response covers the target.
    pub response_id: Option<String>,
    pub epsilon: Option<f64>,
    /// 95% CI half-length of each recovered target cell.
    pub ci_half_length: Option<f64>,
    /// Noisy counts summed down to the target attributes, row-major.
    pub shape: Option<Vec<usize>>,
    pub values: Option<Vec<f64>>,
}

impl SummaryEntry {
    pub fn is_empty(&self) -> bool {
        self.response_id.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub version: u32,
    pub id: String,
    /// Name of the curated table this session draws on.
    pub dataset: String,
    pub ledger: BudgetLedger,
    pub intent: IntentGraph,
    pub model: SimulationModel,
    pub responses: Vec<NoisyResponse>,
    pub progress: ProgressEstimate,
    /// Seeds the simulation model and the planner.
    pub seed: u64,
    #[serde(default)]
    pub jobs: BTreeMap<String, JobStatus>,
}

impl Session {
    /// Fresh session with random default marginals. `n` is the record count
    /// of the curated table, which is treated as public.
    pub fn new(
        id: impl Into<String>,
        dataset: impl Into<String>,
        schema: &Schema,
        n: usize,
        epsilon_total: f64,
        seed: u64,
    ) -> Result<Self, SessionError> {
        Ok(Self {
            version: SNAPSHOT_VERSION,
            id: id.into(),
            dataset: dataset.into(),
            ledger: BudgetLedger::new(epsilon_total)?,
            intent: IntentGraph::new(),
            model: SimulationModel::with_defaults(schema, n, seed),
            responses: Vec::new(),
            progress: ProgressEstimate::default(),
            seed,
            jobs: BTreeMap::new(),
        })
    }

    pub fn schema(&self) -> &Schema {
        &self.model.schema
    }

    pub fn set_intent(&mut self, spec: &IntentSpec) -> Result<(), SessionError> {
        self.intent = IntentGraph::from_parts(&spec.nodes, &spec.edges, self.schema())?;
        Ok(())
    }

    /// Applies all priors or none.
    pub fn set_priors(&mut self, priors: &Priors) -> Result<(), SessionError> {
        let mut model = self.model.clone();
        for (attr, p) in &priors.marginals {
            model.set_marginal(attr, p.clone(), Source::Prior)?;
        }
        for g in &priors.spearman {
            model.set_rank_correlation(&g.a, &g.b, g.rho, Source::Prior)?;
        }
        self.model = model;
        Ok(())
    }

    pub fn set_progress(&mut self, p: f64) -> Result<(), SessionError> {
        self.progress.set(p)?;
        Ok(())
    }

    pub fn planner_input(&self) -> PlannerInput<'_> {
        PlannerInput { intent: &self.intent, model: &self.model, ledger: &self.ledger, progress: &self.progress }
    }

    /// What-if preview on simulated data; the session is not modified.
    pub fn simulate<R: Rng + ?Sized>(&self, request: &DataRequest, rng: &mut R) -> Result<NoisyResponse, SessionError> {
        let id = format!("sim-{}", self.responses.len() + 1);
        Ok(simulate_response(&self.model, request, id, rng)?)
    }

    /// Spends budget on a real request, stores the response and feeds it
    /// back into the simulation model.
    pub fn execute(&mut self, curator: &mut Curator, request: &DataRequest) -> Result<NoisyResponse, SessionError> {
        if curator.schema() != self.schema() {
            return Err(SessionError::DatasetMismatch { expected: self.dataset.clone() });
        }
        let id = format!("r{}", self.responses.len() + 1);
        let response = curator.execute(request, &mut self.ledger, id)?;
        self.progress.update_floor(&self.ledger);
        // The budget is spent either way; a model that cannot absorb the
        // response keeps its previous state.
        if let Ok(model) = integrate_feedback(&self.model, &response) {
            self.model = model;
        }
        self.responses.push(response.clone());
        Ok(response)
    }

    pub fn response(&self, id: &str) -> Result<&NoisyResponse, SessionError> {
        self.responses.iter().find(|r| r.id == id).ok_or_else(|| SessionError::UnknownResponse(id.to_string()))
    }

    /// One noise-removed instance of a stored response.
    pub fn instance<R: Rng + ?Sized>(&self, id: &str, rng: &mut R) -> Result<Vec<f64>, SessionError> {
        Ok(sample_instance(self.response(id)?, rng))
    }

    /// Per intent target, the covering response with the smallest CI.
    pub fn summary(&self) -> Vec<SummaryEntry> {
        self.intent
            .targets()
            .into_iter()
            .map(|target| {
                let mut best: Option<SummaryEntry> = None;
                for r in &self.responses {
                    let Some(entry) = self.recover(r, &target) else { continue };
                    if best.as_ref().is_none_or(|b| entry.ci_half_length < b.ci_half_length) {
                        best = Some(entry);
                    }
                }
                best.unwrap_or(SummaryEntry {
                    target,
                    response_id: None,
                    epsilon: None,
                    ci_half_length: None,
                    shape: None,
                    values: None,
                })
            })
            .collect()
    }

    fn recover(&self, response: &NoisyResponse, target: &Target) -> Option<SummaryEntry> {
        let schema = self.schema();
        let layout = validate_division(&response.request.division, schema).ok()?;
        let idx: Vec<usize> = target.attributes.iter().map(|a| schema.index_of(a).ok()).collect::<Option<_>>()?;
        let recovery = Recovery::new(&layout, &idx, schema).ok()?;
        let axes: Vec<usize> = idx.iter().map(|i| layout.attrs().iter().position(|a| a == i)).collect::<Option<_>>()?;
        let eps = response.request.epsilon;
        Some(SummaryEntry {
            target: target.clone(),
            response_id: Some(response.id.clone()),
            epsilon: Some(eps),
            ci_half_length: Some(ci_half_length(recovery.m(), eps, DEFAULT_CONFIDENCE)),
            shape: Some(axes.iter().map(|&a| layout.shape()[a]).collect()),
            values: Some(marginalize(&response.shape, &response.values, &axes)),
        })
    }

    /// Checks the invariants a snapshot must satisfy.
    pub fn check(&self) -> Result<(), SessionError> {
        if self.version != SNAPSHOT_VERSION {
            return Err(SessionError::Version { found: self.version });
        }
        self.ledger.check_consistency().map_err(SessionError::Corrupt)?;
        let entries = self.ledger.entries();
        if entries.len() != self.responses.len()
            || entries.iter().zip(&self.responses).any(|(e, r)| e.request_id != r.id || e.epsilon != r.request.epsilon)
        {
            return Err(SessionError::Corrupt("ledger entries do not match stored responses".into()));
        }
        if self.responses.iter().any(|r| r.simulated) {
            return Err(SessionError::Corrupt("simulated response in the response store".into()));
        }
        Ok(())
    }

    /// Writes the snapshot atomically (temporary file, then rename).
    pub fn save(&self, path: &Path) -> Result<(), SessionError> {
        let io = |source| SessionError::Io { path: path.display().to_string(), source };
        let json = serde_json::to_vec_pretty(self).expect("session serializes");
        let tmp = path.with_extension("json.tmp");
        fs::write(&tmp, json).map_err(io)?;
        fs::rename(&tmp, path).map_err(io)
    }

    /// Reads and checks a snapshot. Jobs that were in flight are marked failed.
    pub fn load(path: &Path) -> Result<Self, SessionError> {
        let bytes = fs::read(path).map_err(|source| SessionError::Io { path: path.display().to_string(), source })?;
        let mut s: Session = serde_json::from_slice(&bytes).map_err(|e| SessionError::Corrupt(e.to_string()))?;
        s.check()?;
        for status in s.jobs.values_mut() {
            if status.is_active() {
                *status = JobStatus::Failed { error: "interrupted by shutdown".into() };
            }
        }
        Ok(s)
    }
}
