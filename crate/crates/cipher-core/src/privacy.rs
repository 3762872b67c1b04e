//! Differential-privacy mechanisms and budget accounting.
//!
//! Counting queries are sanitized with the Laplace mechanism; the
//! exponential mechanism drives MWEM's query selection. The budget
//! ledger tracks every charge as an exact rational share of the total
//! epsilon, so composition checks are integer arithmetic, not float
//! comparisons: sequential charges add, charges in the same parallel
//! group cost their maximum.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use num_rational::Ratio;
use num_traits::{One, Zero};
use rand::Rng;
use serde::Serialize;

use crate::error::{CipherError, Result};
use crate::tables::ContingencyTable;

/// Neighboring-database convention; fixes the sensitivity of counts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum NeighborModel {
    /// Neighbors differ by adding or removing one record.
    AddRemove,
    /// Neighbors differ by changing one record.
    Replace,
}

impl NeighborModel {
    /// l1 sensitivity of one cell count (and of any marginal table).
    pub fn count_sensitivity(&self) -> f64 {
        match self {
            NeighborModel::AddRemove => 1.0,
            NeighborModel::Replace => 2.0,
        }
    }
}

impl fmt::Display for NeighborModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NeighborModel::AddRemove => write!(f, "add-remove"),
            NeighborModel::Replace => write!(f, "replace"),
        }
    }
}

impl FromStr for NeighborModel {
    type Err = CipherError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "add-remove" | "add_remove" => Ok(NeighborModel::AddRemove),
            "replace" => Ok(NeighborModel::Replace),
            other => Err(CipherError::invalid(format!(
                "unknown neighbor model '{other}' (expected add-remove or replace)"
            ))),
        }
    }
}

/// Privacy parameters of one synthesis run.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct PrivacySpec {
    /// Total privacy budget shared by all replicates.
    pub epsilon: f64,
    /// Number of synthetic replicates m.
    pub replicates: usize,
    pub neighbor: NeighborModel,
    pub seed: u64,
}

impl PrivacySpec {
    pub fn validate(&self) -> Result<()> {
        if !self.epsilon.is_finite() || self.epsilon <= 0.0 {
            return Err(CipherError::invalid(format!(
                "epsilon must be positive and finite, got {}",
                self.epsilon
            )));
        }
        if self.replicates == 0 {
            return Err(CipherError::invalid("replicate count must be at least 1"));
        }
        Ok(())
    }
}

/// Laplace scale for one of `queries` tables in one of m replicates:
/// sensitivity * m * queries / epsilon.
pub fn laplace_scale(spec: &PrivacySpec, queries: usize) -> f64 {
    spec.neighbor.count_sensitivity() * (spec.replicates * queries) as f64 / spec.epsilon
}

/// One Laplace(0, scale) draw via inverse CDF from a single uniform.
pub fn laplace_noise(rng: &mut impl Rng, scale: f64) -> f64 {
    if scale == 0.0 {
        return 0.0;
    }
    let u: f64 = rng.random();
    if u < 0.5 {
        scale * (2.0 * u).max(f64::MIN_POSITIVE).ln()
    } else {
        -scale * (2.0 * (1.0 - u)).ln()
    }
}

/// Adds iid Laplace noise to every cell; the result is marked sanitized.
pub fn laplace_sanitize(
    table: &ContingencyTable,
    scale: f64,
    rng: &mut impl Rng,
) -> Result<ContingencyTable> {
    if !scale.is_finite() || scale < 0.0 {
        return Err(CipherError::invalid(format!("laplace scale must be nonnegative, got {scale}")));
    }
    let values: Vec<f64> = table.values.iter().map(|&v| v + laplace_noise(rng, scale)).collect();
    ContingencyTable::from_values(table.schema().clone(), table.subset().to_vec(), values, true)
}

/// Exponential mechanism: picks index k with probability proportional
/// to exp(epsilon * score_k / (2 * sensitivity)). Scores are shifted by
/// their maximum first, which leaves the distribution unchanged and
/// avoids overflow.
pub fn exponential_select(
    scores: &[f64],
    epsilon: f64,
    sensitivity: f64,
    rng: &mut impl Rng,
) -> Result<usize> {
    if scores.is_empty() {
        return Err(CipherError::invalid("exponential mechanism needs at least one candidate"));
    }
    if sensitivity <= 0.0 || sensitivity.is_nan() || !epsilon.is_finite() || epsilon < 0.0 {
        return Err(CipherError::invalid(
            "exponential mechanism needs positive sensitivity and nonnegative epsilon",
        ));
    }
    let mut max = f64::NEG_INFINITY;
    for &s in scores {
        if !s.is_finite() {
            return Err(CipherError::numerical("non-finite score in exponential mechanism"));
        }
        max = max.max(s);
    }
    let mut weights = Vec::with_capacity(scores.len());
    let mut total = 0.0;
    for &s in scores {
        let w = (epsilon * (s - max) / (2.0 * sensitivity)).exp();
        total += w;
        weights.push(w);
    }
    if total <= 0.0 || !total.is_finite() {
        return Err(CipherError::numerical("degenerate weights in exponential mechanism"));
    }
    let mut u = rng.random::<f64>() * total;
    for (k, &w) in weights.iter().enumerate() {
        u -= w;
        if u <= 0.0 {
            return Ok(k);
        }
    }
    Ok(scores.len() - 1)
}

/// Exact rational share of the total budget.
pub type Share = Ratio<u128>;

/// One budget charge. Charges with the same `group` compose in
/// parallel (the group costs its maximum); `group: None` charges
/// compose sequentially.
#[derive(Clone, Debug)]
pub struct BudgetEntry {
    pub label: String,
    pub share: Share,
    pub group: Option<String>,
}

/// Privacy-budget ledger for one run.
#[derive(Clone, Debug)]
pub struct BudgetLedger {
    epsilon: f64,
    entries: Vec<BudgetEntry>,
}

impl BudgetLedger {
    pub fn new(epsilon: f64) -> Self {
        BudgetLedger { epsilon, entries: Vec::new() }
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn entries(&self) -> &[BudgetEntry] {
        &self.entries
    }

    /// Sequential charge of `share` of the total budget.
    pub fn charge(&mut self, label: impl Into<String>, share: Share) {
        self.entries.push(BudgetEntry { label: label.into(), share, group: None });
    }

    /// Charge inside a parallel-composition group.
    pub fn charge_parallel(&mut self, group: impl Into<String>, label: impl Into<String>, share: Share) {
        self.entries.push(BudgetEntry {
            label: label.into(),
            share,
            group: Some(group.into()),
        });
    }

    /// Composed total share: sequential charges add, each parallel
    /// group contributes its maximum.
    pub fn total_share(&self) -> Share {
        let mut total = Share::zero();
        let mut groups: BTreeMap<&str, Share> = BTreeMap::new();
        for e in &self.entries {
            match &e.group {
                None => total += e.share,
                Some(g) => {
                    let m = groups.entry(g.as_str()).or_insert_with(Share::zero);
                    if e.share > *m {
                        *m = e.share;
                    }
                }
            }
        }
        for (_, m) in groups {
            total += m;
        }
        total
    }

    pub fn total_epsilon(&self) -> f64 {
        share_to_f64(self.total_share()) * self.epsilon
    }

    /// Errors when the composed total exceeds the whole budget.
    pub fn ensure_within_budget(&self) -> Result<()> {
        let total = self.total_share();
        if total > Share::one() {
            return Err(CipherError::invalid(format!(
                "privacy budget exceeded: spent {total} of the total epsilon"
            )));
        }
        Ok(())
    }

    pub fn report(&self) -> LedgerReport {
        LedgerReport {
            epsilon: self.epsilon,
            entries: self
                .entries
                .iter()
                .map(|e| LedgerEntryReport {
                    label: e.label.clone(),
                    share: e.share.to_string(),
                    epsilon: share_to_f64(e.share) * self.epsilon,
                    group: e.group.clone(),
                })
                .collect(),
            total_share: self.total_share().to_string(),
            total_epsilon: self.total_epsilon(),
        }
    }
}

fn share_to_f64(s: Share) -> f64 {
    *s.numer() as f64 / *s.denom() as f64
}

/// Serializable view of the ledger.
#[derive(Clone, Debug, Serialize)]
pub struct LedgerReport {
    pub epsilon: f64,
    pub entries: Vec<LedgerEntryReport>,
    pub total_share: String,
    pub total_epsilon: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct LedgerEntryReport {
    pub label: String,
    /// Exact share of the total budget, as a rational string.
    pub share: String,
    /// The share in absolute budget units.
    pub epsilon: f64,
    pub group: Option<String>,
}
