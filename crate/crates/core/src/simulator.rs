//! Gaussian-copula simulation of the sensitive table.
//!
//! The model couples per-attribute marginals (probability vectors over the
//! finest bins) through a latent Gaussian whose correlations come from
//! Spearman rank correlations between numerical attributes. Categorical
//! attributes carry no rank correlation and are drawn independently.
//!
//! A model is the only "data" the analyst-side planner ever sees. It is built
//! from random defaults, analyst priors, public facts, and the noisy responses
//! already paid for.

use std::cmp::Ordering;

use chrono::Utc;
use nalgebra::DMatrix;
use rand::distr::{Distribution, Open01};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::accuracy::{ci_half_length, DEFAULT_CONFIDENCE};
use crate::curator::{noise_counts, DataRequest, NoisyResponse};
use crate::schema::{count_layout, unflatten, AttributeKind, Column, Dataset, Schema, SchemaError};

/// Eigenvalue floor used when repairing an indefinite correlation matrix.
const EIGEN_FLOOR: f64 = 1e-10;
const MARGINAL_TOL: f64 = 1e-9;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum SimulationError {
    #[error("invalid correlation for {a}–{b}: {reason}")]
    InvalidCorrelation { a: String, b: String, reason: String },
    #[error("invalid marginal for `{attribute}`: {reason}")]
    InvalidMarginal { attribute: String, reason: String },
    #[error("unknown attribute `{0}`")]
    UnknownAttribute(String),
    #[error("{0}")]
    InvalidDivision(String),
}

impl From<SchemaError> for SimulationError {
    fn from(e: SchemaError) -> Self {
        match e {
            SchemaError::UnknownAttribute(a) => SimulationError::UnknownAttribute(a),
            other => SimulationError::InvalidDivision(other.to_string()),
        }
    }
}

/// Where a stored marginal or rank correlation came from, and how much it is
/// trusted. Lower `score` is better; sources without a score never block a
/// replacement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Source {
    Random,
    Prior,
    /// Published facts. Never replaced.
    Public,
    Response {
        response_id: String,
        score: f64,
    },
}

impl Source {
    fn score(&self) -> f64 {
        match self {
            Source::Random | Source::Prior => f64::INFINITY,
            Source::Public => 0.0,
            Source::Response { score, .. } => *score,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Marginal {
    pub attribute: String,
    /// Probabilities over the finest bins; non-negative, summing to 1.
    pub probabilities: Vec<f64>,
    pub source: Source,
    /// Per finest bin, the noisy estimate before clamping (response sources only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noisy_counts: Option<Vec<f64>>,
    /// Per finest bin, the 95% CI half-length of `noisy_counts`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ci_half_lengths: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankCorrelation {
    pub a: String,
    pub b: String,
    pub rho: f64,
    pub source: Source,
}

/// Gaussian-copula model. Immutable; updates produce new values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationModel {
    pub schema: Schema,
    /// One per schema attribute, in schema order.
    pub marginals: Vec<Marginal>,
    /// Spearman correlations between numerical attributes; absent pairs are 0.
    pub spearman: Vec<RankCorrelation>,
    /// Latent Gaussian correlation over the numerical attributes (schema order), PSD.
    pub latent_corr: Vec<Vec<f64>>,
    /// Records per simulated dataset.
    pub n: usize,
    pub seed: u64,
}

/// Random positive probability vectors over every attribute's finest bins.
pub fn default_marginals(schema: &Schema, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    schema
        .attributes()
        .iter()
        .map(|a| {
            let raw: Vec<f64> = (0..a.finest_bins()).map(|_| Open01.sample(&mut rng)).collect();
            let sum: f64 = raw.iter().sum();
            raw.into_iter().map(|x: f64| x / sum).collect()
        })
        .collect()
}

/// Latent Gaussian correlation reproducing a Spearman correlation.
pub fn spearman_to_latent(rho_s: f64) -> f64 {
    2.0 * (std::f64::consts::PI * rho_s / 6.0).sin()
}

fn numeric_attrs(schema: &Schema) -> Vec<usize> {
    (0..schema.len()).filter(|&i| schema.attributes()[i].is_numerical()).collect()
}

/// Nearest-PSD repair by eigenvalue clipping, then unit-diagonal rescaling.
pub fn repair_psd(corr: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let k = corr.len();
    if k == 0 {
        return Vec::new();
    }
    let m = DMatrix::from_fn(k, k, |i, j| corr[i][j]);
    let eig = m.symmetric_eigen();
    if eig.eigenvalues.iter().all(|&l| l >= EIGEN_FLOOR) {
        return corr.to_vec();
    }
    let clipped = eig.eigenvalues.map(|l| l.max(EIGEN_FLOOR));
    let rebuilt = &eig.eigenvectors * DMatrix::from_diagonal(&clipped) * eig.eigenvectors.transpose();
    (0..k)
        .map(|i| (0..k).map(|j| rebuilt[(i, j)] / (rebuilt[(i, i)] * rebuilt[(j, j)]).sqrt()).collect())
        .collect()
}

/// `A` with `A Aᵀ = corr` for a PSD matrix, from its eigendecomposition.
fn psd_factor(corr: &[Vec<f64>]) -> DMatrix<f64> {
    let k = corr.len();
    if k == 0 {
        return DMatrix::zeros(0, 0);
    }
    let m = DMatrix::from_fn(k, k, |i, j| corr[i][j]);
    let eig = m.symmetric_eigen();
    let sqrt = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&sqrt)
}

fn check_marginal(attribute: &str, bins: usize, p: &[f64]) -> Result<Vec<f64>, SimulationError> {
    let bad = |reason: String| SimulationError::InvalidMarginal { attribute: attribute.to_string(), reason };
    if p.len() != bins {
        return Err(bad(format!("{} entries for {bins} finest bins", p.len())));
    }
    if p.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
        return Err(bad("entries must be finite and non-negative".into()));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > MARGINAL_TOL {
        return Err(bad(format!("entries sum to {sum}, not 1")));
    }
    Ok(p.iter().map(|x| x / sum).collect())
}

impl SimulationModel {
    /// Builds a model from marginals (schema order) and Spearman guesses.
    pub fn build(
        schema: &Schema,
        marginals: &[Vec<f64>],
        spearman: &[(String, String, f64)],
        n: usize,
        seed: u64,
    ) -> Result<Self, SimulationError> {
        if marginals.len() != schema.len() {
            return Err(SimulationError::InvalidMarginal {
                attribute: "*".into(),
                reason: format!("{} marginals for {} attributes", marginals.len(), schema.len()),
            });
        }
        let marginals = schema
            .attributes()
            .iter()
            .zip(marginals)
            .map(|(a, p)| {
                Ok(Marginal {
                    attribute: a.name.clone(),
                    probabilities: check_marginal(&a.name, a.finest_bins(), p)?,
                    source: Source::Prior,
                    noisy_counts: None,
                    ci_half_lengths: None,
                })
            })
            .collect::<Result<Vec<_>, SimulationError>>()?;
        let spearman = spearman
            .iter()
            .map(|(a, b, rho)| RankCorrelation { a: a.clone(), b: b.clone(), rho: *rho, source: Source::Prior })
            .collect();
        let mut model = Self { schema: schema.clone(), marginals, spearman, latent_corr: Vec::new(), n, seed };
        model.refresh_latent()?;
        Ok(model)
    }

    /// Model with random default marginals and no rank correlation.
    pub fn with_defaults(schema: &Schema, n: usize, seed: u64) -> Self {
        let mut model = Self::build(schema, &default_marginals(schema, seed), &[], n, seed)
            .expect("default marginals are valid");
        for m in &mut model.marginals {
            m.source = Source::Random;
        }
        model
    }

    /// Recomputes `latent_corr` from `spearman`, validating every entry.
    pub fn refresh_latent(&mut self) -> Result<(), SimulationError> {
        let numeric = numeric_attrs(&self.schema);
        let k = numeric.len();
        let mut corr = vec![vec![0.0; k]; k];
        for (i, row) in corr.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        for rc in &self.spearman {
            let bad = |reason: &str| SimulationError::InvalidCorrelation {
                a: rc.a.clone(),
                b: rc.b.clone(),
                reason: reason.to_string(),
            };
            if !(rc.rho.is_finite() && rc.rho.abs() <= 1.0) {
                return Err(bad("rank correlation must lie in [-1, 1]"));
            }
            if rc.a == rc.b {
                return Err(bad("an attribute's self-correlation is fixed at 1"));
            }
            let pos = |name: &str| -> Result<usize, SimulationError> {
                let idx = self.schema.index_of(name)?;
                numeric
                    .iter()
                    .position(|&i| i == idx)
                    .ok_or_else(|| bad("rank correlations are only defined between numerical attributes"))
            };
            let (i, j) = (pos(&rc.a)?, pos(&rc.b)?);
            let r = spearman_to_latent(rc.rho);
            corr[i][j] = r;
            corr[j][i] = r;
        }
        self.latent_corr = repair_psd(&corr);
        Ok(())
    }

    pub fn marginal(&self, attribute: &str) -> Option<&Marginal> {
        self.marginals.iter().find(|m| m.attribute == attribute)
    }

    pub fn rank_correlation(&self, a: &str, b: &str) -> Option<&RankCorrelation> {
        self.spearman.iter().find(|rc| (rc.a == a && rc.b == b) || (rc.a == b && rc.b == a))
    }

    /// Replaces one marginal; `probabilities` must already be normalized.
    pub fn set_marginal(&mut self, attribute: &str, probabilities: Vec<f64>, source: Source) -> Result<(), SimulationError> {
        let idx = self.schema.index_of(attribute)?;
        let bins = self.schema.attributes()[idx].finest_bins();
        let probabilities = check_marginal(attribute, bins, &probabilities)?;
        self.marginals[idx] = Marginal {
            attribute: attribute.to_string(),
            probabilities,
            source,
            noisy_counts: None,
            ci_half_lengths: None,
        };
        Ok(())
    }

    /// Sets or replaces a rank correlation and refreshes the latent matrix.
    pub fn set_rank_correlation(&mut self, a: &str, b: &str, rho: f64, source: Source) -> Result<(), SimulationError> {
        let previous = self.spearman.clone();
        self.spearman.retain(|rc| !((rc.a == a && rc.b == b) || (rc.a == b && rc.b == a)));
        self.spearman.push(RankCorrelation { a: a.to_string(), b: b.to_string(), rho, source });
        if let Err(e) = self.refresh_latent() {
            self.spearman = previous;
            self.refresh_latent().expect("previous state was valid");
            return Err(e);
        }
        Ok(())
    }

    /// Draws `n` records: numerical attributes through the copula, categorical
    /// attributes independently. Deterministic under `seed`.
    pub fn sample(&self) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let numeric = numeric_attrs(&self.schema);
        let factor = psd_factor(&self.latent_corr);
        let normal = Normal::standard();
        let cumulative: Vec<Vec<f64>> = self
            .marginals
            .iter()
            .map(|m| {
                let mut acc = 0.0;
                m.probabilities.iter().map(|p| { acc += p; acc }).collect()
            })
            .collect();

        let mut columns: Vec<Column> = self
            .schema
            .attributes()
            .iter()
            .map(|a| if a.is_numerical() { Column::Numerical(Vec::with_capacity(self.n)) } else { Column::Categorical(Vec::with_capacity(self.n)) })
            .collect();
        let k = numeric.len();
        let mut g = vec![0.0; k];
        for _ in 0..self.n {
            for x in g.iter_mut() {
                *x = rng.sample(StandardNormal);
            }
            for (pos, &attr) in numeric.iter().enumerate() {
                let z: f64 = (0..k).map(|j| factor[(pos, j)] * g[j]).sum();
                let u = normal.cdf(z);
                let (bin, frac) = invert_cdf(&cumulative[attr], &self.marginals[attr].probabilities, u);
                let AttributeKind::Numerical { lo, min_interval, .. } = self.schema.attributes()[attr].kind else {
                    unreachable!()
                };
                if let Column::Numerical(v) = &mut columns[attr] {
                    v.push(lo + (bin as f64 + frac) * min_interval);
                }
            }
            for (attr, col) in columns.iter_mut().enumerate() {
                if let Column::Categorical(v) = col {
                    let u: f64 = rng.random();
                    let (bin, _) = invert_cdf(&cumulative[attr], &self.marginals[attr].probabilities, u);
                    v.push(bin as u32);
                }
            }
        }
        Dataset::new(self.schema.clone(), columns).expect("samples lie inside the schema domain")
    }
}

/// Finest bin holding quantile `u`, and the relative position inside it.
fn invert_cdf(cumulative: &[f64], p: &[f64], u: f64) -> (usize, f64) {
    let last = cumulative.len() - 1;
    let mut bin = cumulative.partition_point(|&c| c <= u).min(last);
    while p[bin] <= 0.0 && bin > 0 {
        bin -= 1;
    }
    while p[bin] <= 0.0 && bin < last {
        bin += 1;
    }
    let before = if bin == 0 { 0.0 } else { cumulative[bin - 1] };
    let frac = if p[bin] > 0.0 { ((u - before) / p[bin]).clamp(0.0, 1.0 - 1e-9) } else { 0.5 };
    (bin, frac)
}

/// Previews a request on simulated data. Charges nothing.
pub fn simulate_response<R: Rng + ?Sized>(
    model: &SimulationModel,
    request: &DataRequest,
    id: impl Into<String>,
    rng: &mut R,
) -> Result<NoisyResponse, SimulationError> {
    let layout = request.validate(&model.schema).map_err(|e| SimulationError::InvalidDivision(e.to_string()))?;
    let simulated = model.sample();
    let exact = count_layout(&simulated, &layout);
    Ok(NoisyResponse {
        id: id.into(),
        request: request.clone(),
        shape: layout.shape().to_vec(),
        values: noise_counts(&exact, request.epsilon, rng),
        issued_at: Utc::now(),
        simulated: true,
    })
}

/// Sums a response grid down to the listed axes (kept in the given order).
pub(crate) fn marginalize(shape: &[usize], values: &[f64], keep: &[usize]) -> Vec<f64> {
    let out_shape: Vec<usize> = keep.iter().map(|&a| shape[a]).collect();
    let mut out = vec![0.0; out_shape.iter().product()];
    for (flat, v) in values.iter().enumerate() {
        let idx = unflatten(shape, flat);
        let kept: Vec<usize> = keep.iter().map(|&a| idx[a]).collect();
        out[crate::schema::flat_index(&out_shape, &kept)] += v;
    }
    out
}

/// Midranks (1-based) of ordered groups with the given weights.
fn grouped_midranks(weights: &[f64]) -> Vec<f64> {
    let mut below = 0.0;
    weights
        .iter()
        .map(|&w| {
            let r = below + (w + 1.0) / 2.0;
            below += w;
            r
        })
        .collect()
}

/// Spearman correlation of a 2-D contingency table (negative weights clamped to 0).
pub fn table_spearman(rows: usize, cols: usize, table: &[f64]) -> Option<f64> {
    let t: Vec<f64> = table.iter().map(|&x| x.max(0.0)).collect();
    let total: f64 = t.iter().sum();
    if total <= 0.0 {
        return None;
    }
    let row_w: Vec<f64> = (0..rows).map(|i| (0..cols).map(|j| t[i * cols + j]).sum()).collect();
    let col_w: Vec<f64> = (0..cols).map(|j| (0..rows).map(|i| t[i * cols + j]).sum()).collect();
    let (rr, cr) = (grouped_midranks(&row_w), grouped_midranks(&col_w));
    let mean_r: f64 = rr.iter().zip(&row_w).map(|(r, w)| r * w).sum::<f64>() / total;
    let mean_c: f64 = cr.iter().zip(&col_w).map(|(r, w)| r * w).sum::<f64>() / total;
    let (mut cov, mut vr, mut vc) = (0.0, 0.0, 0.0);
    for i in 0..rows {
        for j in 0..cols {
            cov += t[i * cols + j] * (rr[i] - mean_r) * (cr[j] - mean_c);
        }
        vr += row_w[i] * (rr[i] - mean_r).powi(2);
    }
    for j in 0..cols {
        vc += col_w[j] * (cr[j] - mean_c).powi(2);
    }
    if vr <= 0.0 || vc <= 0.0 {
        return None;
    }
    Some((cov / (vr * vc).sqrt()).clamp(-1.0, 1.0))
}

/// Sample Spearman correlation with midranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut order: Vec<usize> = (0..v.len()).collect();
        order.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).unwrap_or(Ordering::Equal));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < order.len() {
            let mut j = i;
            while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
                j += 1;
            }
            let mid = (i + j) as f64 / 2.0 + 1.0;
            for &o in &order[i..=j] {
                r[o] = mid;
            }
            i = j + 1;
        }
        r
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

/// Folds a paid response into the model.
///
/// Each attribute of the response yields a marginal estimate (cells summed
/// over the other attributes, spread uniformly over finest bins). The estimate
/// replaces the stored marginal only when its assessed error score is lower.
/// The score is the mean, over finest bins, of the bin's 95% CI half-length
/// relative to `max(estimate, 1)`. Pairs of numerical attributes get a rank
/// correlation estimate under the same rule.
pub fn integrate_feedback(model: &SimulationModel, response: &NoisyResponse) -> Result<SimulationModel, SimulationError> {
    let layout = response
        .request
        .validate(&model.schema)
        .map_err(|e| SimulationError::InvalidDivision(e.to_string()))?;
    let shape = layout.shape();
    let eps = response.request.epsilon;
    let n_cells = layout.n_cells();
    let mut next = model.clone();

    for (axis, &attr) in layout.attrs().iter().enumerate() {
        let sums = marginalize(shape, &response.values, &[axis]);
        let m = n_cells / shape[axis];
        let h = ci_half_length(m, eps, DEFAULT_CONFIDENCE);
        let widths = layout.group_widths(axis);
        let groups = layout.bin_to_group(axis);
        let noisy: Vec<f64> = groups.iter().map(|&g| sums[g] / widths[g] as f64).collect();
        let ci: Vec<f64> = groups.iter().map(|&g| h / widths[g] as f64).collect();
        let score = noisy.iter().zip(&ci).map(|(v, c)| c / v.max(1.0)).sum::<f64>() / noisy.len() as f64;
        if !(score < model.marginals[attr].source.score()) {
            continue;
        }
        let clamped: Vec<f64> = noisy.iter().map(|v| v.max(0.0)).collect();
        let total: f64 = clamped.iter().sum();
        let probabilities = if total > 0.0 {
            clamped.iter().map(|v| v / total).collect()
        } else {
            vec![1.0 / clamped.len() as f64; clamped.len()]
        };
        next.marginals[attr] = Marginal {
            attribute: model.marginals[attr].attribute.clone(),
            probabilities,
            source: Source::Response { response_id: response.id.clone(), score },
            noisy_counts: Some(noisy),
            ci_half_lengths: Some(ci),
        };
    }

    for i in 0..layout.attrs().len() {
        for j in (i + 1)..layout.attrs().len() {
            let (ai, aj) = (layout.attrs()[i], layout.attrs()[j]);
            if !(model.schema.attributes()[ai].is_numerical() && model.schema.attributes()[aj].is_numerical()) {
                continue;
            }
            let table = marginalize(shape, &response.values, &[i, j]);
            let Some(rho) = table_spearman(shape[i], shape[j], &table) else { continue };
            let h = ci_half_length(n_cells / (shape[i] * shape[j]), eps, DEFAULT_CONFIDENCE);
            let score = table.iter().map(|v| h / v.max(1.0)).sum::<f64>() / table.len() as f64;
            let (a, b) = (&model.schema.attributes()[ai].name, &model.schema.attributes()[aj].name);
            let current = model.rank_correlation(a, b).map_or(f64::INFINITY, |rc| rc.source.score());
            if score < current {
                next.set_rank_correlation(a, b, rho, Source::Response { response_id: response.id.clone(), score })?;
            }
        }
    }
    Ok(next)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::{finest_division, AttributeSchema};
    use approx::assert_relative_eq;

    fn two_numeric() -> Schema {
        Schema::new(vec![
            AttributeSchema::numerical("x", 0.0, 100.0, 10.0, true).unwrap(),
            AttributeSchema::numerical("y", 0.0, 50.0, 5.0, true).unwrap(),
            AttributeSchema::categorical("c", &["a", "b", "c"], false).unwrap(),
        ])
        .unwrap()
    }

    #[test]
    fn default_marginals_are_seeded_and_normalized() {
        let s = two_numeric();
        let a = default_marginals(&s, 1);
        assert_eq!(a, default_marginals(&s, 1));
        assert_ne!(a, default_marginals(&s, 2));
        for p in &a {
            assert!(p.iter().all(|&x| x > 0.0));
            assert_relative_eq!(p.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn spearman_conversion() {
        assert_eq!(spearman_to_latent(0.0), 0.0);
        assert_relative_eq!(spearman_to_latent(1.0), 1.0, epsilon = 1e-15);
        assert_relative_eq!(spearman_to_latent(0.5), 0.5176380902050415, epsilon = 1e-12);
    }

    #[test]
    fn out_of_range_correlation_rejected() {
        let s = two_numeric();
        let m = default_marginals(&s, 0);
        let err = SimulationModel::build(&s, &m, &[("x".into(), "y".into(), 1.3)], 10, 0).unwrap_err();
        assert!(matches!(err, SimulationError::InvalidCorrelation { .. }));
        let err = SimulationModel::build(&s, &m, &[("x".into(), "c".into(), 0.3)], 10, 0).unwrap_err();
        assert!(matches!(err, SimulationError::InvalidCorrelation { .. }));
    }

    #[test]
    fn inconsistent_guesses_are_repaired() {
        let corr = vec![vec![1.0, 0.9, -0.9], vec![0.9, 1.0, 0.9], vec![-0.9, 0.9, 1.0]];
        let fixed = repair_psd(&corr);
        let m = DMatrix::from_fn(3, 3, |i, j| fixed[i][j]);
        assert!(m.symmetric_eigen().eigenvalues.iter().all(|&l| l > -1e-9));
        for i in 0..3 {
            assert_relative_eq!(fixed[i][i], 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn empty_sample() {
        let model = SimulationModel::with_defaults(&two_numeric(), 0, 3);
        assert_eq!(model.sample().n(), 0);
    }

    #[test]
    fn marginal_must_sum_to_one() {
        let s = two_numeric();
        let mut m = default_marginals(&s, 0);
        m[2] = vec![0.5, 0.5, 0.5];
        assert!(matches!(SimulationModel::build(&s, &m, &[], 10, 0), Err(SimulationError::InvalidMarginal { .. })));
    }

    #[test]
    fn preview_is_deterministic() {
        let s = two_numeric();
        let model = SimulationModel::with_defaults(&s, 500, 11);
        let req = DataRequest::new(finest_division(&["x", "c"], &s).unwrap(), 1.0);
        let a = simulate_response(&model, &req, "p", &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = simulate_response(&model, &req, "p", &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a.values, b.values);
        assert!(a.simulated);
        assert_eq!(a.values.len(), 30);
    }

    fn response(schema: &Schema, attrs: &[&str], values: Vec<f64>, eps: f64) -> NoisyResponse {
        let div = finest_division(attrs, schema).unwrap();
        let layout = crate::schema::validate_division(&div, schema).unwrap();
        NoisyResponse {
            id: "r1".into(),
            request: DataRequest::new(div, eps),
            shape: layout.shape().to_vec(),
            values,
            issued_at: Utc::now(),
            simulated: false,
        }
    }

    #[test]
    fn feedback_replaces_random_and_is_idempotent() {
        let s = two_numeric();
        let model = SimulationModel::with_defaults(&s, 1000, 1);
        let mut values = vec![0.0; 10 * 10];
        for i in 0..10 {
            values[i * 10 + i] = 100.0 - 9.0 * i as f64;
        }
        let resp = response(&s, &["x", "y"], values, 0.2);
        let once = integrate_feedback(&model, &resp).unwrap();
        assert!(matches!(once.marginals[0].source, Source::Response { .. }));
        assert!(matches!(once.marginals[1].source, Source::Response { .. }));
        assert!(matches!(once.marginals[2].source, Source::Random));
        assert!(once.rank_correlation("x", "y").unwrap().rho > 0.9);
        assert!(once.marginals[0].probabilities[0] > once.marginals[0].probabilities[9]);
        let twice = integrate_feedback(&once, &resp).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn less_accurate_feedback_never_overwrites() {
        let s = two_numeric();
        let model = SimulationModel::with_defaults(&s, 1000, 1);
        let good = response(&s, &["c"], vec![100.0, 200.0, 300.0], 1.0);
        let after = integrate_feedback(&model, &good).unwrap();
        let mut worse = response(&s, &["c"], vec![300.0, 200.0, 100.0], 0.5);
        worse.id = "r2".into();
        let after2 = integrate_feedback(&after, &worse).unwrap();
        assert_eq!(after.marginals[2], after2.marginals[2]);
    }

    #[test]
    fn all_negative_feedback_falls_back_to_uniform() {
        let s = two_numeric();
        let model = SimulationModel::with_defaults(&s, 1000, 1);
        let resp = response(&s, &["c"], vec![-1.0, -2.0, -0.5], 1.0);
        let after = integrate_feedback(&model, &resp).unwrap();
        assert_eq!(after.marginals[2].probabilities, vec![1.0 / 3.0; 3]);
        assert_eq!(after.marginals[2].noisy_counts.as_deref(), Some(&[-1.0, -2.0, -0.5][..]));
    }

    #[test]
    fn table_spearman_of_diagonal_is_one() {
        let t = [5.0, 0.0, 0.0, 0.0, 5.0, 0.0, 0.0, 0.0, 5.0];
        assert_relative_eq!(table_spearman(3, 3, &t).unwrap(), 1.0, epsilon = 1e-12);
        assert!(table_spearman(2, 2, &[0.0; 4]).is_none());
    }
}
