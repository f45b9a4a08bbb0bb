//! Penalty of a request against a target distribution.
//!
//! A target is one attribute (a marginal) or a pair of attributes (a joint
//! distribution), always described at the finest granularity. A request
//! recovers the target by summing its cells over any extra attributes and
//! then spreading each requested number uniformly over the finest cells it
//! covers. Two relative errors result:
//!
//! * the structural error `E_s`, the mean relative gap between the
//!   reconstructed and the actual finest counts;
//! * the numerical error `E_n`, the mean 95% confidence half-length of the
//!   reconstructed finest count relative to the actual count.
//!
//! Relative errors divide by `max(actual, 1)`. Both are evaluated on
//! simulated data only.

use std::collections::HashMap;
use std::sync::{Mutex, OnceLock};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::curator::DataRequest;
use crate::schema::{count_layout, finest_division, validate_division, Dataset, GridLayout, Schema, SchemaError};
use crate::simulator::SimulationModel;

pub const DEFAULT_CONFIDENCE: f64 = 0.95;
/// Draws used for the Monte Carlo quantile of a sum of Laplace variables.
pub const MC_DRAWS: usize = 1_000_000;
const MC_SEED: u64 = 0x5eed_ca11;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum AccuracyError {
    #[error("target {target:?} is not covered by the request attributes {request:?}")]
    TargetNotCovered { target: Vec<String>, request: Vec<String> },
    #[error("{0}")]
    InvalidDivision(String),
}

impl From<SchemaError> for AccuracyError {
    fn from(e: SchemaError) -> Self {
        AccuracyError::InvalidDivision(e.to_string())
    }
}

fn unit_quantiles() -> &'static Mutex<HashMap<(usize, u64), f64>> {
    static CACHE: OnceLock<Mutex<HashMap<(usize, u64), f64>>> = OnceLock::new();
    CACHE.get_or_init(Default::default)
}

/// Quantile of `|S|` with `S` a sum of `m` i.i.d. Laplace(0, 1) draws.
///
/// Uses `Σ Lap(1) = Gamma(m, 1) − Gamma(m, 1)`, so each Monte Carlo draw
/// costs two gamma variates whatever `m` is.
fn unit_sum_quantile(m: usize, confidence: f64) -> f64 {
    if m == 1 {
        return (1.0 / (1.0 - confidence)).ln();
    }
    let key = (m, confidence.to_bits());
    if let Some(&q) = unit_quantiles().lock().unwrap().get(&key) {
        return q;
    }
    let gamma = Gamma::new(m as f64, 1.0).expect("shape is positive");
    let mut rng = ChaCha8Rng::seed_from_u64(MC_SEED ^ m as u64);
    let mut abs: Vec<f64> = (0..MC_DRAWS)
        .map(|_| (gamma.sample(&mut rng) - gamma.sample(&mut rng)).abs())
        .collect();
    let k = ((confidence * MC_DRAWS as f64).ceil() as usize).clamp(1, MC_DRAWS) - 1;
    let (_, q, _) = abs.select_nth_unstable_by(k, f64::total_cmp);
    let q = *q;
    unit_quantiles().lock().unwrap().insert(key, q);
    q
}

/// Half-length `h` with `P(|e_1 + … + e_m| ≤ h) = confidence`, `e_i ~ Lap(1/ε)`.
///
/// Closed form for `m = 1`; a fixed-seed Monte Carlo quantile otherwise,
/// cached per `(m, confidence)`.
pub fn ci_half_length(m: usize, epsilon: f64, confidence: f64) -> f64 {
    assert!(m >= 1, "at least one summed cell");
    assert!(epsilon > 0.0, "epsilon must be positive");
    assert!(confidence > 0.0 && confidence < 1.0, "confidence must be in (0, 1)");
    unit_sum_quantile(m, confidence) / epsilon
}

/// How a request's grid recovers a target grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Recovery {
    /// Finest bins per target attribute.
    finest_shape: Vec<usize>,
    /// Group of each finest bin along each target attribute.
    bin_to_group: Vec<Vec<usize>>,
    /// Groups per target attribute.
    coarse_shape: Vec<usize>,
    /// Request cells summed into each recovered cell.
    m: usize,
}

impl Recovery {
    /// `target` holds schema attribute indices, all of which must appear in `layout`.
    pub fn new(layout: &GridLayout, target: &[usize], schema: &Schema) -> Result<Self, AccuracyError> {
        let mut axes = Vec::with_capacity(target.len());
        for &t in target {
            match layout.attrs().iter().position(|&a| a == t) {
                Some(axis) => axes.push(axis),
                None => {
                    return Err(AccuracyError::TargetNotCovered {
                        target: target.iter().map(|&i| schema.attributes()[i].name.clone()).collect(),
                        request: layout.attrs().iter().map(|&i| schema.attributes()[i].name.clone()).collect(),
                    })
                }
            }
        }
        let m = (0..layout.attrs().len())
            .filter(|axis| !axes.contains(axis))
            .map(|axis| layout.shape()[axis])
            .product();
        Ok(Self {
            finest_shape: axes.iter().map(|&a| layout.bin_to_group(a).len()).collect(),
            bin_to_group: axes.iter().map(|&a| layout.bin_to_group(a).to_vec()).collect(),
            coarse_shape: axes.iter().map(|&a| layout.shape()[a]).collect(),
            m,
        })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    fn n_finest(&self) -> usize {
        self.finest_shape.iter().product()
    }

    /// Coarse cell of every finest cell, and the finest width of every coarse cell.
    fn coarse_map(&self) -> (Vec<usize>, Vec<usize>) {
        let n = self.n_finest();
        let mut coarse_of = Vec::with_capacity(n);
        let mut width = vec![0usize; self.coarse_shape.iter().product()];
        for flat in 0..n {
            let idx = crate::schema::unflatten(&self.finest_shape, flat);
            let coarse: Vec<usize> = idx.iter().zip(&self.bin_to_group).map(|(&b, map)| map[b]).collect();
            let c = crate::schema::flat_index(&self.coarse_shape, &coarse);
            width[c] += 1;
            coarse_of.push(c);
        }
        (coarse_of, width)
    }

    fn check(&self, finest: &[f64]) -> Result<(), AccuracyError> {
        if finest.len() != self.n_finest() {
            return Err(AccuracyError::InvalidDivision(format!(
                "{} finest counts given for a grid of {} cells",
                finest.len(),
                self.n_finest()
            )));
        }
        Ok(())
    }

    /// Requested numbers spread uniformly back over the finest grid.
    pub fn reconstruct(&self, finest: &[f64]) -> Result<Vec<f64>, AccuracyError> {
        self.check(finest)?;
        let (coarse_of, width) = self.coarse_map();
        let mut sums = vec![0.0; width.len()];
        for (&c, &v) in coarse_of.iter().zip(finest) {
            sums[c] += v;
        }
        Ok(coarse_of.iter().map(|&c| sums[c] / width[c] as f64).collect())
    }

    pub fn structural_error(&self, finest: &[f64]) -> Result<f64, AccuracyError> {
        let rec = self.reconstruct(finest)?;
        if rec.is_empty() {
            return Ok(0.0);
        }
        let total: f64 = rec.iter().zip(finest).map(|(r, a)| (r - a).abs() / a.max(1.0)).sum();
        Ok(total / rec.len() as f64)
    }

    /// CI half-length of every reconstructed finest count.
    pub fn ci_half_lengths(&self, epsilon: f64, confidence: f64) -> Vec<f64> {
        let h = ci_half_length(self.m, epsilon, confidence);
        let (coarse_of, width) = self.coarse_map();
        coarse_of.iter().map(|&c| h / width[c] as f64).collect()
    }

    /// `E_n / h(m, ε)`: the part of the numerical error that does not depend on ε.
    pub fn noise_factor(&self, finest: &[f64]) -> Result<f64, AccuracyError> {
        self.check(finest)?;
        let (coarse_of, width) = self.coarse_map();
        if finest.is_empty() {
            return Ok(0.0);
        }
        let total: f64 = coarse_of.iter().zip(finest).map(|(&c, a)| 1.0 / (width[c] as f64 * a.max(1.0))).sum();
        Ok(total / finest.len() as f64)
    }

    pub fn numerical_error(&self, finest: &[f64], epsilon: f64) -> Result<f64, AccuracyError> {
        Ok(ci_half_length(self.m, epsilon, DEFAULT_CONFIDENCE) * self.noise_factor(finest)?)
    }
}

/// `E_s` of a division against finest counts over the same attributes.
pub fn structural_error(finest_counts: &[f64], layout: &GridLayout, schema: &Schema) -> Result<f64, AccuracyError> {
    Recovery::new(layout, layout.attrs(), schema)?.structural_error(finest_counts)
}

/// `E_n` of a division against finest counts over the same attributes (`m = 1`).
pub fn numerical_error(
    finest_counts: &[f64],
    layout: &GridLayout,
    epsilon: f64,
    schema: &Schema,
) -> Result<f64, AccuracyError> {
    Recovery::new(layout, layout.attrs(), schema)?.numerical_error(finest_counts, epsilon)
}

/// An intent node (one attribute) or edge (two attributes).
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Target {
    pub attributes: Vec<String>,
}

impl Target {
    pub fn node(a: &str) -> Self {
        Self { attributes: vec![a.to_string()] }
    }

    /// Attributes are stored sorted so `(a, b)` and `(b, a)` coincide.
    pub fn edge(a: &str, b: &str) -> Self {
        let mut attributes = vec![a.to_string(), b.to_string()];
        attributes.sort();
        Self { attributes }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub target: Target,
    pub e_s: f64,
    pub e_n: f64,
    pub penalty: f64,
    /// Request cells summed per recovered cell.
    pub m: usize,
    /// Per finest target cell, row-major.
    pub ci_half_lengths: Vec<f64>,
    /// Simulated finest counts the errors were measured against.
    pub simulated_counts: Vec<f64>,
}

/// A simulated dataset drawn once from a model, with finest target counts
/// cached for repeated assessment.
#[derive(Debug)]
pub struct AccuracyContext {
    dataset: Dataset,
    finest: Mutex<HashMap<Vec<usize>, Vec<f64>>>,
}

impl AccuracyContext {
    pub fn new(model: &SimulationModel) -> Self {
        Self::from_dataset(model.sample())
    }

    /// Context over a given table, e.g. to score strategies against ground
    /// truth in offline evaluation. The planner itself only uses [`Self::new`].
    pub fn from_dataset(dataset: Dataset) -> Self {
        Self { dataset, finest: Mutex::new(HashMap::new()) }
    }

    pub fn schema(&self) -> &Schema {
        self.dataset.schema()
    }

    fn target_indices(&self, target: &Target) -> Result<Vec<usize>, AccuracyError> {
        target
            .attributes
            .iter()
            .map(|a| self.schema().index_of(a).map_err(AccuracyError::from))
            .collect()
    }

    /// Simulated counts on the finest grid of `target`.
    pub fn finest_counts(&self, target: &Target) -> Result<Vec<f64>, AccuracyError> {
        let idx = self.target_indices(target)?;
        if let Some(v) = self.finest.lock().unwrap().get(&idx) {
            return Ok(v.clone());
        }
        let names: Vec<&str> = target.attributes.iter().map(String::as_str).collect();
        let layout = validate_division(&finest_division(&names, self.schema())?, self.schema())?;
        let counts = count_layout(&self.dataset, &layout).to_real();
        self.finest.lock().unwrap().insert(idx, counts.clone());
        Ok(counts)
    }

    /// ε-independent parts of the penalty of `layout` against `target`.
    pub fn penalty_parts(&self, layout: &GridLayout, target: &Target) -> Result<PenaltyParts, AccuracyError> {
        let idx = self.target_indices(target)?;
        let recovery = Recovery::new(layout, &idx, self.schema())?;
        let finest = self.finest_counts(target)?;
        Ok(PenaltyParts {
            e_s: recovery.structural_error(&finest)?,
            noise_factor: recovery.noise_factor(&finest)?,
            m: recovery.m(),
        })
    }

    pub fn assess(&self, request: &DataRequest, target: &Target) -> Result<AccuracyReport, AccuracyError> {
        let layout = validate_division(&request.division, self.schema())?;
        let idx = self.target_indices(target)?;
        let recovery = Recovery::new(&layout, &idx, self.schema())?;
        let finest = self.finest_counts(target)?;
        let e_s = recovery.structural_error(&finest)?;
        let e_n = recovery.numerical_error(&finest, request.epsilon)?;
        Ok(AccuracyReport {
            target: target.clone(),
            e_s,
            e_n,
            penalty: e_s + e_n,
            m: recovery.m(),
            ci_half_lengths: recovery.ci_half_lengths(request.epsilon, DEFAULT_CONFIDENCE),
            simulated_counts: finest,
        })
    }
}

/// `E_s`, plus `E_n` factored as `h(m, ε) · noise_factor`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PenaltyParts {
    pub e_s: f64,
    pub noise_factor: f64,
    pub m: usize,
}

impl PenaltyParts {
    pub fn e_n(&self, epsilon: f64) -> f64 {
        ci_half_length(self.m, epsilon, DEFAULT_CONFIDENCE) * self.noise_factor
    }

    pub fn penalty(&self, epsilon: f64) -> f64 {
        self.e_s + self.e_n(epsilon)
    }
}

/// Assesses a request against a target on data sampled from `model`.
pub fn assess(model: &SimulationModel, request: &DataRequest, target: &Target) -> Result<AccuracyReport, AccuracyError> {
    AccuracyContext::new(model).assess(request, target)
}
