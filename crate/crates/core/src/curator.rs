//! The trust zone: the only code with access to the raw table.
//!
//! A [`Curator`] owns the sensitive [`Dataset`] and answers [`DataRequest`]s
//! with Laplace-noised counts after charging the [`BudgetLedger`]. Every cell
//! of a request's grid is disjoint from the others, so the whole request costs
//! its ε once; repeating a request costs it again.
//!
//! Noise is drawn with the inverse-CDF form of the Laplace distribution on
//! `f64`. Side-channel-hardened sampling is not attempted.

use std::sync::Arc;

use chrono::{DateTime, Utc};
use rand::distr::{Distribution, Open01};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::schema::{count_layout, validate_division, Dataset, ExactCounts, GridLayout, Schema, SchemaError, SetDivision};

/// Slack allowed when comparing a charge against the remaining budget, so
/// that e.g. ten charges of `0.1` can exhaust a budget of `1.0`.
pub const BUDGET_TOL: f64 = 1e-12;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum CuratorError {
    #[error("privacy budget exceeded: requested {requested}, remaining {remaining}")]
    BudgetExceeded { requested: f64, remaining: f64 },
    #[error("epsilon must be positive and finite, got {0}")]
    InvalidEpsilon(f64),
    #[error("{0}")]
    InvalidDivision(String),
}

impl From<SchemaError> for CuratorError {
    fn from(e: SchemaError) -> Self {
        CuratorError::InvalidDivision(e.to_string())
    }
}

/// Draws from Laplace(0, `scale`) given a uniform `u` in (0, 1).
pub fn laplace_from_uniform(scale: f64, u: f64) -> f64 {
    let d = u - 0.5;
    -scale * d.signum() * (1.0 - 2.0 * d.abs()).ln()
}

/// One draw from Laplace(0, `scale`).
pub fn sample_laplace<R: Rng + ?Sized>(scale: f64, rng: &mut R) -> f64 {
    debug_assert!(scale >= 0.0);
    let u: f64 = Open01.sample(rng);
    laplace_from_uniform(scale, u)
}

/// Adds an independent Lap(1/ε) draw to each exact count.
pub(crate) fn noise_counts<R: Rng + ?Sized>(exact: &ExactCounts, epsilon: f64, rng: &mut R) -> Vec<f64> {
    let scale = 1.0 / epsilon;
    exact.counts().iter().map(|&c| c as f64 + sample_laplace(scale, rng)).collect()
}

fn check_epsilon(epsilon: f64) -> Result<(), CuratorError> {
    if epsilon.is_finite() && epsilon > 0.0 {
        Ok(())
    } else {
        Err(CuratorError::InvalidEpsilon(epsilon))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataRequest {
    pub division: SetDivision,
    pub epsilon: f64,
    /// Position within a strategy's request sequence.
    #[serde(default)]
    pub order: usize,
}

impl DataRequest {
    pub fn new(division: SetDivision, epsilon: f64) -> Self {
        Self { division, epsilon, order: 0 }
    }

    pub fn validate(&self, schema: &Schema) -> Result<GridLayout, CuratorError> {
        check_epsilon(self.epsilon)?;
        Ok(validate_division(&self.division, schema)?)
    }
}

/// Noised cell counts, flattened row-major over `shape` (see
/// [`GridLayout`]). Values are real, never rounded or clamped, and may be
/// negative.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoisyResponse {
    pub id: String,
    pub request: DataRequest,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    pub issued_at: DateTime<Utc>,
    /// True for what-if previews computed from simulated data.
    #[serde(default)]
    pub simulated: bool,
}

impl NoisyResponse {
    /// Laplace scale of the noise in every cell.
    pub fn noise_scale(&self) -> f64 {
        1.0 / self.request.epsilon
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub request_id: String,
    pub epsilon: f64,
}

/// Append-only privacy-budget account.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetLedger {
    epsilon_total: f64,
    entries: Vec<LedgerEntry>,
    epsilon_remain: f64,
}

impl BudgetLedger {
    pub fn new(epsilon_total: f64) -> Result<Self, CuratorError> {
        check_epsilon(epsilon_total)?;
        Ok(Self { epsilon_total, entries: Vec::new(), epsilon_remain: epsilon_total })
    }

    pub fn epsilon_total(&self) -> f64 {
        self.epsilon_total
    }

    pub fn epsilon_remain(&self) -> f64 {
        self.epsilon_remain
    }

    /// Sum of recorded charges.
    pub fn spent(&self) -> f64 {
        self.entries.iter().map(|e| e.epsilon).sum()
    }

    pub fn entries(&self) -> &[LedgerEntry] {
        &self.entries
    }

    /// Either records the charge or returns an error leaving the ledger untouched.
    pub fn charge(&mut self, epsilon: f64, request_id: impl Into<String>) -> Result<(), CuratorError> {
        check_epsilon(epsilon)?;
        if epsilon > self.epsilon_remain + BUDGET_TOL {
            return Err(CuratorError::BudgetExceeded { requested: epsilon, remaining: self.epsilon_remain });
        }
        let remain = self.epsilon_remain - epsilon;
        self.epsilon_remain = if remain <= BUDGET_TOL { 0.0 } else { remain };
        self.entries.push(LedgerEntry { request_id: request_id.into(), epsilon });
        Ok(())
    }

    /// Checks the accounting identity, e.g. after deserializing.
    pub fn check_consistency(&self) -> Result<(), String> {
        let sum: f64 = self.entries.iter().map(|e| e.epsilon).sum();
        let expected = (self.epsilon_total - sum).max(0.0);
        let slack = BUDGET_TOL * (self.entries.len() as f64 + 1.0) * self.epsilon_total.max(1.0) * 16.0;
        if self.epsilon_remain < 0.0 || (self.epsilon_remain - expected).abs() > slack.max(1e-9) {
            return Err(format!(
                "ledger remain {} inconsistent with total {} minus charges {sum}",
                self.epsilon_remain, self.epsilon_total
            ));
        }
        if self.entries.iter().any(|e| !(e.epsilon > 0.0)) {
            return Err("ledger holds a non-positive charge".into());
        }
        Ok(())
    }
}

/// Test-only instrumentation recording every exact count the curator computes.
#[cfg(feature = "test-hooks")]
pub mod probe {
    use std::sync::Mutex;

    static RECORDED: Mutex<Vec<(String, Vec<u64>)>> = Mutex::new(Vec::new());

    pub(crate) fn record(request_id: &str, counts: &[u64]) {
        RECORDED.lock().unwrap().push((request_id.to_string(), counts.to_vec()));
    }

    /// Exact counts keyed by request id, in execution order.
    pub fn recorded() -> Vec<(String, Vec<u64>)> {
        RECORDED.lock().unwrap().clone()
    }
}

/// Holds the raw table and the production noise stream.
pub struct Curator {
    dataset: Arc<Dataset>,
    rng: ChaCha20Rng,
}

impl std::fmt::Debug for Curator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Curator").field("records", &self.dataset.n()).finish_non_exhaustive()
    }
}

impl Curator {
    pub fn new(dataset: Arc<Dataset>) -> Self {
        Self { dataset, rng: ChaCha20Rng::from_rng(&mut rand::rng()) }
    }

    /// Deterministic noise stream for reproducible tests.
    #[cfg(feature = "test-hooks")]
    pub fn with_seed(dataset: Arc<Dataset>, seed: u64) -> Self {
        Self { dataset, rng: ChaCha20Rng::seed_from_u64(seed) }
    }

    /// [`Curator::with_seed`] in builds with the `test-hooks` feature, `None` otherwise.
    pub fn seeded(dataset: Arc<Dataset>, seed: u64) -> Option<Self> {
        #[cfg(feature = "test-hooks")]
        return Some(Self::with_seed(dataset, seed));
        #[cfg(not(feature = "test-hooks"))]
        {
            let _ = (dataset, seed);
            None
        }
    }

    pub fn schema(&self) -> &Schema {
        self.dataset.schema()
    }

    /// Record count of the curated table.
    pub fn n(&self) -> usize {
        self.dataset.n()
    }

    /// Charges `request.epsilon` once, then returns the noised grid.
    ///
    /// A failed charge draws no noise and issues nothing.
    pub fn execute(
        &mut self,
        request: &DataRequest,
        ledger: &mut BudgetLedger,
        request_id: impl Into<String>,
    ) -> Result<NoisyResponse, CuratorError> {
        let request_id = request_id.into();
        let layout = request.validate(self.dataset.schema())?;
        ledger.charge(request.epsilon, request_id.clone())?;
        let exact = count_layout(&self.dataset, &layout);
        #[cfg(feature = "test-hooks")]
        probe::record(&request_id, exact.counts());
        let values = noise_counts(&exact, request.epsilon, &mut self.rng);
        Ok(NoisyResponse {
            id: request_id,
            request: request.clone(),
            shape: layout.shape().to_vec(),
            values,
            issued_at: Utc::now(),
            simulated: false,
        })
    }
}

/// A plausible true-count grid: each noisy value minus a fresh Lap(1/ε) draw.
pub fn sample_instance<R: Rng + ?Sized>(response: &NoisyResponse, rng: &mut R) -> Vec<f64> {
    let scale = response.noise_scale();
    response.values.iter().map(|v| v - sample_laplace(scale, rng)).collect()
}
