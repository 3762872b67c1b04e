//! Multinomial logistic regression, combined inference across
//! synthetic replicates, the simulation data generator, and the
//! sign-and-significance report.
//!
//! The model is the reference-category multinomial logit: outcome
//! level 0 is the baseline, every covariate is dummy-coded against a
//! configurable reference level, and coefficients are estimated by
//! Newton iterations on the grouped log-likelihood (the observed and
//! expected information coincide under the canonical link).

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};
use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{CipherError, Result};
use crate::metrics::{classify_sss, SssOutcome};
use crate::tables::{Attribute, CellIndexer, Dataset, Schema};

const MAX_NEWTON_ITERATIONS: usize = 100;
const SCORE_TOLERANCE: f64 = 1e-8;
/// Coefficients beyond this magnitude are taken as evidence of
/// separation: the likelihood keeps improving while estimates diverge.
const SEPARATION_BOUND: f64 = 30.0;

/// Which regression to fit: one outcome attribute against dummy-coded
/// categorical covariates.
#[derive(Clone, Debug)]
pub struct ModelSpec {
    pub outcome: usize,
    pub covariates: Vec<usize>,
    /// Reference level per covariate, parallel to `covariates`.
    pub references: Vec<usize>,
}

impl ModelSpec {
    /// Dummy-codes every covariate against level 0.
    pub fn with_default_references(outcome: usize, covariates: Vec<usize>) -> Self {
        let references = vec![0; covariates.len()];
        ModelSpec { outcome, covariates, references }
    }

    /// Resolves attribute names, with optional per-covariate reference
    /// overrides like ("V3", 2).
    pub fn from_names(
        schema: &Schema,
        outcome: &str,
        covariates: &[String],
        reference_overrides: &[(String, usize)],
    ) -> Result<Self> {
        let outcome_idx = schema
            .index_of(outcome)
            .ok_or_else(|| CipherError::invalid(format!("unknown outcome attribute '{outcome}'")))?;
        let mut covariate_idx = Vec::with_capacity(covariates.len());
        for name in covariates {
            let idx = schema.index_of(name).ok_or_else(|| {
                CipherError::invalid(format!("unknown covariate attribute '{name}'"))
            })?;
            covariate_idx.push(idx);
        }
        let mut references = vec![0usize; covariate_idx.len()];
        for (name, level) in reference_overrides {
            let idx = schema.index_of(name).ok_or_else(|| {
                CipherError::invalid(format!("unknown attribute '{name}' in reference override"))
            })?;
            let pos = covariate_idx.iter().position(|&c| c == idx).ok_or_else(|| {
                CipherError::invalid(format!("'{name}' is not a covariate of the model"))
            })?;
            references[pos] = *level;
        }
        let spec = ModelSpec { outcome: outcome_idx, covariates: covariate_idx, references };
        spec.validate(schema)?;
        Ok(spec)
    }

    pub fn validate(&self, schema: &Schema) -> Result<()> {
        let p = schema.len();
        if self.outcome >= p {
            return Err(CipherError::invalid("outcome attribute out of range"));
        }
        if self.covariates.is_empty() {
            return Err(CipherError::invalid("model needs at least one covariate"));
        }
        if self.covariates.len() != self.references.len() {
            return Err(CipherError::invalid("one reference level per covariate required"));
        }
        let mut seen = std::collections::BTreeSet::new();
        for (&c, &r) in self.covariates.iter().zip(&self.references) {
            if c >= p {
                return Err(CipherError::invalid("covariate attribute out of range"));
            }
            if c == self.outcome {
                return Err(CipherError::invalid(format!(
                    "attribute '{}' cannot be both outcome and covariate",
                    schema.attributes[c].name
                )));
            }
            if !seen.insert(c) {
                return Err(CipherError::invalid(format!(
                    "covariate '{}' listed twice",
                    schema.attributes[c].name
                )));
            }
            if r >= schema.cardinality(c) {
                return Err(CipherError::invalid(format!(
                    "reference level {r} out of range for '{}'",
                    schema.attributes[c].name
                )));
            }
        }
        Ok(())
    }

    /// Names of the design-vector terms: intercept plus one dummy per
    /// non-reference level of each covariate, in covariate order.
    fn term_names(&self, schema: &Schema) -> Vec<String> {
        let mut names = vec!["intercept".to_string()];
        for (&c, &r) in self.covariates.iter().zip(&self.references) {
            let attr = &schema.attributes[c];
            for level in 0..attr.cardinality() {
                if level != r {
                    names.push(format!("{}={}", attr.name, attr.levels[level]));
                }
            }
        }
        names
    }
}

/// One fitted multinomial logit.
#[derive(Clone, Debug, Serialize)]
pub struct FitResult {
    /// Flat coefficient vector, outcome-level major: all terms for
    /// outcome level 1, then level 2, and so on.
    pub coefficients: Vec<f64>,
    /// Diagonal of the inverse information at the optimum.
    pub variances: Vec<f64>,
    /// Human-readable name per coefficient.
    pub names: Vec<String>,
    pub converged: bool,
    /// Why convergence failed, when it did.
    pub diagnostic: Option<String>,
    pub n_obs: usize,
    pub iterations: usize,
    /// Log-likelihood after the initial point and each accepted step.
    pub log_likelihood_trace: Vec<f64>,
}

/// Grouped sufficient statistics: one row per covariate pattern.
struct GroupedData {
    /// Design vectors, one per pattern with at least one observation.
    design: Vec<Vec<f64>>,
    /// Outcome counts per pattern, length = outcome cardinality.
    counts: Vec<Vec<f64>>,
    totals: Vec<f64>,
    outcome_levels: usize,
    terms: usize,
}

fn group_records(dataset: &Dataset, spec: &ModelSpec) -> Result<GroupedData> {
    let schema = dataset.schema();
    spec.validate(schema)?;
    let outcome_levels = schema.cardinality(spec.outcome);
    if outcome_levels < 2 {
        return Err(CipherError::invalid("outcome needs at least two levels"));
    }

    let pattern_dims: Vec<usize> =
        spec.covariates.iter().map(|&c| schema.cardinality(c)).collect();
    let pattern_indexer = CellIndexer::new(&pattern_dims)?;
    let mut counts = vec![vec![0.0; outcome_levels]; pattern_indexer.size()];
    let mut pattern = vec![0usize; spec.covariates.len()];
    for i in 0..dataset.len() {
        let record = dataset.record(i);
        for (slot, &c) in pattern.iter_mut().zip(&spec.covariates) {
            *slot = record[c] as usize;
        }
        let cell = pattern_indexer.encode(&pattern);
        counts[cell][record[spec.outcome] as usize] += 1.0;
    }

    let terms = 1 + spec
        .covariates
        .iter()
        .map(|&c| schema.cardinality(c) - 1)
        .sum::<usize>();
    let mut grouped = GroupedData {
        design: Vec::new(),
        counts: Vec::new(),
        totals: Vec::new(),
        outcome_levels,
        terms,
    };
    for (cell, row) in counts.into_iter().enumerate() {
        let total: f64 = row.iter().sum();
        if total == 0.0 {
            continue;
        }
        pattern_indexer.decode_into(cell, &mut pattern);
        let mut x = Vec::with_capacity(terms);
        x.push(1.0);
        for ((&level, &c), &r) in pattern.iter().zip(&spec.covariates).zip(&spec.references) {
            for candidate in 0..schema.cardinality(c) {
                if candidate != r {
                    x.push(if level == candidate { 1.0 } else { 0.0 });
                }
            }
        }
        grouped.design.push(x);
        grouped.counts.push(row);
        grouped.totals.push(total);
    }
    Ok(grouped)
}

impl GroupedData {
    fn parameters(&self) -> usize {
        (self.outcome_levels - 1) * self.terms
    }

    /// Per-pattern outcome probabilities under `beta` (softmax with
    /// the reference level's linear predictor fixed at zero).
    fn probabilities(&self, beta: &DVector<f64>, g: usize) -> Vec<f64> {
        let x = &self.design[g];
        let j_levels = self.outcome_levels - 1;
        let mut eta = Vec::with_capacity(self.outcome_levels);
        eta.push(0.0);
        for j in 0..j_levels {
            let mut e = 0.0;
            for (a, &xa) in x.iter().enumerate() {
                e += beta[j * self.terms + a] * xa;
            }
            eta.push(e);
        }
        let max = eta.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut probs: Vec<f64> = eta.iter().map(|e| (e - max).exp()).collect();
        let z: f64 = probs.iter().sum();
        for p in probs.iter_mut() {
            *p /= z;
        }
        probs
    }

    fn log_likelihood(&self, beta: &DVector<f64>) -> f64 {
        let j_levels = self.outcome_levels - 1;
        let mut ll = 0.0;
        for g in 0..self.design.len() {
            let x = &self.design[g];
            let mut eta = Vec::with_capacity(self.outcome_levels);
            eta.push(0.0);
            for j in 0..j_levels {
                let mut e = 0.0;
                for (a, &xa) in x.iter().enumerate() {
                    e += beta[j * self.terms + a] * xa;
                }
                eta.push(e);
            }
            let max = eta.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let log_z = max + eta.iter().map(|e| (e - max).exp()).sum::<f64>().ln();
            for (level, &count) in self.counts[g].iter().enumerate() {
                if count > 0.0 {
                    ll += count * (eta[level] - log_z);
                }
            }
        }
        ll
    }

    fn score(&self, beta: &DVector<f64>) -> DVector<f64> {
        let j_levels = self.outcome_levels - 1;
        let mut u = DVector::zeros(self.parameters());
        for g in 0..self.design.len() {
            let probs = self.probabilities(beta, g);
            let x = &self.design[g];
            for j in 0..j_levels {
                let residual = self.counts[g][j + 1] - self.totals[g] * probs[j + 1];
                for (a, &xa) in x.iter().enumerate() {
                    u[j * self.terms + a] += xa * residual;
                }
            }
        }
        u
    }

    fn information(&self, beta: &DVector<f64>) -> DMatrix<f64> {
        let j_levels = self.outcome_levels - 1;
        let d = self.terms;
        let mut info = DMatrix::zeros(self.parameters(), self.parameters());
        for g in 0..self.design.len() {
            let probs = self.probabilities(beta, g);
            let x = &self.design[g];
            let n = self.totals[g];
            for j in 0..j_levels {
                for k in j..j_levels {
                    let w = if j == k {
                        n * probs[j + 1] * (1.0 - probs[j + 1])
                    } else {
                        -n * probs[j + 1] * probs[k + 1]
                    };
                    if w == 0.0 {
                        continue;
                    }
                    for (a, &xa) in x.iter().enumerate() {
                        if xa == 0.0 {
                            continue;
                        }
                        for (b, &xb) in x.iter().enumerate() {
                            info[(j * d + a, k * d + b)] += w * xa * xb;
                        }
                    }
                }
            }
        }
        // Mirror the upper block triangle.
        for j in 0..j_levels {
            for k in (j + 1)..j_levels {
                for a in 0..d {
                    for b in 0..d {
                        info[(k * d + b, j * d + a)] = info[(j * d + a, k * d + b)];
                    }
                }
            }
        }
        info
    }
}

/// Fits the multinomial logit by Newton iterations with step-halving.
///
/// Separation or a singular information matrix yields a result with
/// `converged: false` rather than an error, so callers can drop the
/// replicate and keep going.
pub fn fit_multinomial_logit(dataset: &Dataset, spec: &ModelSpec) -> Result<FitResult> {
    if dataset.is_empty() {
        return Err(CipherError::invalid("cannot fit a model on an empty dataset"));
    }
    let schema = dataset.schema().clone();
    let grouped = group_records(dataset, spec)?;
    let names = coefficient_names(&schema, spec);

    let parameters = grouped.parameters();
    let mut beta = DVector::zeros(parameters);
    let mut trace = vec![grouped.log_likelihood(&beta)];
    let mut converged = false;
    let mut diagnostic = None;
    let mut iterations = 0;

    for iter in 0..MAX_NEWTON_ITERATIONS {
        iterations = iter + 1;
        let score = grouped.score(&beta);
        if score.amax() < SCORE_TOLERANCE {
            converged = true;
            iterations = iter;
            break;
        }
        let info = grouped.information(&beta);
        let Some(chol) = Cholesky::new(info) else {
            diagnostic = Some("singular information matrix".to_string());
            break;
        };
        let direction = chol.solve(&score);

        let current = *trace.last().expect("trace holds the initial value");
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let candidate = &beta + &direction * step;
            let ll = grouped.log_likelihood(&candidate);
            if ll.is_finite() && ll >= current - 1e-12 {
                beta = candidate;
                trace.push(ll);
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            diagnostic = Some("step-halving failed to improve the likelihood".to_string());
            break;
        }
        if beta.amax() > SEPARATION_BOUND {
            diagnostic = Some(format!(
                "separation suspected: a coefficient exceeded {SEPARATION_BOUND} in magnitude"
            ));
            break;
        }
    }
    if !converged && diagnostic.is_none() {
        diagnostic = Some(format!("no convergence after {MAX_NEWTON_ITERATIONS} iterations"));
    }

    let variances = if converged {
        match Cholesky::new(grouped.information(&beta)) {
            Some(chol) => {
                let inverse = chol.inverse();
                (0..parameters).map(|i| inverse[(i, i)]).collect()
            }
            None => {
                converged = false;
                diagnostic = Some("information matrix singular at the optimum".to_string());
                vec![f64::NAN; parameters]
            }
        }
    } else {
        vec![f64::NAN; parameters]
    };

    Ok(FitResult {
        coefficients: beta.iter().cloned().collect(),
        variances,
        names,
        converged,
        diagnostic,
        n_obs: dataset.len(),
        iterations,
        log_likelihood_trace: trace,
    })
}

fn coefficient_names(schema: &Schema, spec: &ModelSpec) -> Vec<String> {
    let outcome = &schema.attributes[spec.outcome];
    let terms = spec.term_names(schema);
    let mut names = Vec::new();
    for level in 1..outcome.cardinality() {
        for term in &terms {
            names.push(format!("{}={}: {}", outcome.name, outcome.levels[level], term));
        }
    }
    names
}

/// Combined estimate for one coefficient across m replicates.
#[derive(Clone, Debug, Serialize)]
pub struct CombinedInference {
    pub name: String,
    /// Mean estimate over replicates.
    pub estimate: f64,
    /// Total variance V = B/m + W.
    pub variance: f64,
    /// Mean within-replicate variance W.
    pub within: f64,
    /// Between-replicate sample variance B.
    pub between: f64,
    /// Degrees of freedom; `None` means the normal reference (B = 0).
    /// Above [`NORMAL_DOF_CUTOFF`] the value is still reported but the
    /// normal limit supplies the quantile and p-value.
    pub dof: Option<f64>,
    pub ci_low: f64,
    pub ci_high: f64,
    pub p_value: f64,
    pub significant: bool,
}

/// Degrees of freedom beyond which the t reference is replaced by its
/// normal limit. The dof estimate (m-1)(1 + mW/B)^2 explodes whenever
/// the replicates nearly agree, and t quantile routines lose accuracy
/// (and eventually fail to terminate) in that regime, while the true
/// quantile differs from the normal one by under 2e-6.
pub const NORMAL_DOF_CUTOFF: f64 = 1e6;

/// Pools m converged fits: mean estimate, variance V = B/m + W, and a
/// t reference with dof (m-1)(1 + mW/B)^2 per coefficient.
pub fn combine(fits: &[&FitResult], alpha: f64) -> Result<Vec<CombinedInference>> {
    if fits.len() < 2 {
        return Err(CipherError::invalid(format!(
            "combining needs at least two converged fits, got {}",
            fits.len()
        )));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(CipherError::invalid(format!("alpha must lie in (0,1), got {alpha}")));
    }
    let parameters = fits[0].coefficients.len();
    for fit in fits {
        if !fit.converged {
            return Err(CipherError::invalid("combine received a non-converged fit"));
        }
        if fit.coefficients.len() != parameters {
            return Err(CipherError::invalid("fits disagree on the coefficient count"));
        }
    }

    let m = fits.len() as f64;
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut combined = Vec::with_capacity(parameters);
    for c in 0..parameters {
        let estimates: Vec<f64> = fits.iter().map(|f| f.coefficients[c]).collect();
        let mean = estimates.iter().sum::<f64>() / m;
        let within = fits.iter().map(|f| f.variances[c]).sum::<f64>() / m;
        let between =
            estimates.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (m - 1.0);
        let variance = between / m + within;

        let dof =
            (between > 0.0).then(|| (m - 1.0) * (1.0 + m * within / between).powi(2));
        let (quantile, p_value) = match dof {
            Some(dof) if dof < NORMAL_DOF_CUTOFF => {
                let t = StudentsT::new(0.0, 1.0, dof)
                    .map_err(|e| CipherError::numerical(format!("t distribution: {e}")))?;
                (t.inverse_cdf(1.0 - alpha / 2.0), p_two_sided(&t, mean, variance))
            }
            _ => (
                normal.inverse_cdf(1.0 - alpha / 2.0),
                p_two_sided(&normal, mean, variance),
            ),
        };

        let se = variance.sqrt();
        combined.push(CombinedInference {
            name: fits[0].names[c].clone(),
            estimate: mean,
            variance,
            within,
            between,
            dof,
            ci_low: mean - quantile * se,
            ci_high: mean + quantile * se,
            p_value,
            significant: p_value < alpha,
        });
    }
    Ok(combined)
}

fn p_two_sided(reference: &impl ContinuousCDF<f64, f64>, estimate: f64, variance: f64) -> f64 {
    if variance > 0.0 {
        2.0 * (1.0 - reference.cdf(estimate.abs() / variance.sqrt()))
    } else if estimate == 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Simulates the four-attribute benchmark population: V1 fair coin,
/// V2 logistic in V1, and three-level V3 and V4 from nested
/// multinomial logits (V3 and V4 reference their level 0; the V3
/// covariate dummies in the V4 model reference its last level).
pub fn dgp_simulate(n: usize, rng: &mut impl Rng) -> Result<Dataset> {
    if n == 0 {
        return Err(CipherError::invalid("simulation size must be positive"));
    }
    let schema = dgp_schema();
    let mut codes = Vec::with_capacity(n * 4);
    for _ in 0..n {
        let v1 = u32::from(rng.random::<f64>() < 0.5);
        let x1 = f64::from(v1);

        let p2 = sigmoid(0.5 + 1.0 * x1);
        let v2 = u32::from(rng.random::<f64>() < p2);
        let x2 = f64::from(v2);

        let v3 = sample_logit(
            &[-1.0 + 2.0 * x1 + 1.0 * x2, 0.5 + 1.0 * x1 - 1.0 * x2],
            rng,
        );
        let d30 = f64::from(v3 == 0);
        let d31 = f64::from(v3 == 1);

        let v4 = sample_logit(
            &[
                1.5 - 1.0 * x1 + 0.5 * x2 + 1.0 * d30 - 2.0 * d31,
                1.0 - 1.5 * x1 - 0.5 * x2 + 0.75 * d30 - 1.0 * d31,
            ],
            rng,
        );

        codes.extend([v1, v2, v3, v4]);
    }
    Dataset::from_flat(schema, n, codes)
}

/// Schema of the simulated population.
pub fn dgp_schema() -> Arc<Schema> {
    let attrs = vec![
        Attribute::with_cardinality("V1", 2),
        Attribute::with_cardinality("V2", 2),
        Attribute::with_cardinality("V3", 3),
        Attribute::with_cardinality("V4", 3),
    ];
    Arc::new(Schema::new(attrs).expect("static schema is valid"))
}

/// The benchmark regression: V4 on V1, V2, V3 with the V3 dummies
/// referencing its last level.
pub fn dgp_model_spec() -> ModelSpec {
    ModelSpec { outcome: 3, covariates: vec![0, 1, 2], references: vec![0, 0, 2] }
}

fn sigmoid(eta: f64) -> f64 {
    1.0 / (1.0 + (-eta).exp())
}

/// Draws from the categorical distribution whose non-reference levels
/// have the given log-odds against level 0.
fn sample_logit(log_odds: &[f64], rng: &mut impl Rng) -> u32 {
    let max = log_odds.iter().cloned().fold(0.0f64, f64::max);
    let mut weights = Vec::with_capacity(log_odds.len() + 1);
    weights.push((-max).exp());
    for &eta in log_odds {
        weights.push((eta - max).exp());
    }
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (level, &w) in weights.iter().enumerate() {
        u -= w;
        if u <= 0.0 {
            return level as u32;
        }
    }
    (weights.len() - 1) as u32
}

/// SSS classification of one coefficient.
#[derive(Clone, Debug, Serialize)]
pub struct CoefficientSss {
    pub name: String,
    pub original_estimate: f64,
    pub original_p: f64,
    pub combined: CombinedInference,
    pub outcome: SssOutcome,
}

/// Sign-and-significance comparison of the original fit against the
/// combined synthetic inference.
#[derive(Clone, Debug, Serialize)]
pub struct SssReport {
    pub coefficients: Vec<CoefficientSss>,
    /// Per-category totals over all coefficients.
    pub counts: BTreeMap<String, usize>,
    /// Replicates dropped because their fit did not converge.
    pub dropped_replicates: usize,
    pub alpha: f64,
}

/// Fits the model on the original data and on every replicate, pools
/// the replicate fits, and classifies each coefficient. Replicates
/// whose fit fails to converge are dropped and counted.
pub fn sss_report(
    original: &Dataset,
    replicates: &[Dataset],
    spec: &ModelSpec,
    alpha: f64,
) -> Result<SssReport> {
    let original_fit = fit_multinomial_logit(original, spec)?;
    if !original_fit.converged {
        return Err(CipherError::numerical(format!(
            "the original-data fit did not converge: {}",
            original_fit.diagnostic.as_deref().unwrap_or("unknown reason")
        )));
    }

    let fits: Vec<FitResult> = replicates
        .par_iter()
        .map(|replicate| fit_multinomial_logit(replicate, spec))
        .collect::<Result<Vec<_>>>()?;
    let usable: Vec<&FitResult> = fits.iter().filter(|f| f.converged).collect();
    let dropped = fits.len() - usable.len();
    if usable.len() < 2 {
        return Err(CipherError::numerical(format!(
            "only {} replicate fit(s) converged; combining needs at least 2",
            usable.len()
        )));
    }
    let combined = combine(&usable, alpha)?;

    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut coefficients = Vec::with_capacity(combined.len());
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for (c, pooled) in combined.into_iter().enumerate() {
        let estimate = original_fit.coefficients[c];
        let p = p_two_sided(&normal, estimate, original_fit.variances[c]);
        let sign_match =
            estimate == 0.0 || pooled.estimate == 0.0 || (estimate > 0.0) == (pooled.estimate > 0.0);
        let outcome = classify_sss(sign_match, p < alpha, pooled.significant);
        *counts.entry(outcome.label().to_string()).or_insert(0) += 1;
        coefficients.push(CoefficientSss {
            name: pooled.name.clone(),
            original_estimate: estimate,
            original_p: p,
            combined: pooled,
            outcome,
        });
    }

    Ok(SssReport { coefficients, counts, dropped_replicates: dropped, alpha })
}
