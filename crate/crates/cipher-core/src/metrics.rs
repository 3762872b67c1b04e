//! Utility metrics comparing synthetic replicates to the original
//! data: total variation distance over k-way marginals, the l-infinity
//! error over a query set, and the sign-and-significance outcome
//! classification for regression coefficients.

use serde::Serialize;
use std::fmt;

use crate::error::{CipherError, Result};
use crate::tables::{k_subsets, ContingencyTable, Dataset, QuerySet};

/// Total variation distance between two probability vectors.
pub fn tvd(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(CipherError::invalid(format!(
            "TVD needs equal lengths, got {} and {}",
            p.len(),
            q.len()
        )));
    }
    Ok(0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>())
}

/// Mean TVD between the original k-way marginals and the marginals of
/// the cell-wise average of the replicate tables, over all C(p,k)
/// attribute subsets.
pub fn avg_kway_tvd(original: &Dataset, replicates: &[Dataset], k: usize) -> Result<f64> {
    let schema = original.schema();
    if k == 0 || k > schema.len() {
        return Err(CipherError::invalid(format!(
            "k must be between 1 and {}, got {k}",
            schema.len()
        )));
    }
    check_comparable(original, replicates)?;

    let subsets = k_subsets(schema.len(), k)?;
    let mut total = 0.0;
    for subset in &subsets {
        let orig = ContingencyTable::tabulate(original, subset)?;
        let orig_probs: Vec<f64> =
            orig.values.iter().map(|v| v / original.len() as f64).collect();

        let mut avg = vec![0.0; orig.values.len()];
        for replicate in replicates {
            let table = ContingencyTable::tabulate(replicate, subset)?;
            for (a, v) in avg.iter_mut().zip(&table.values) {
                *a += v;
            }
        }
        let avg_total: f64 = avg.iter().sum();
        if avg_total > 0.0 {
            for a in avg.iter_mut() {
                *a /= avg_total;
            }
        }
        total += tvd(&orig_probs, &avg)?;
    }
    Ok(total / subsets.len() as f64)
}

/// Largest absolute cell error across every table in the query set,
/// between the original and the replicate average. On the proportion
/// scale by default (each table cell divided by its dataset's n);
/// `counts` switches to raw counts.
pub fn linf_error(
    queries: &QuerySet,
    original: &Dataset,
    replicates: &[Dataset],
    counts: bool,
) -> Result<f64> {
    check_comparable(original, replicates)?;
    let m = replicates.len() as f64;
    let mut max = 0.0f64;
    for subset in queries.subsets() {
        let orig = ContingencyTable::tabulate(original, subset)?;
        let mut avg = vec![0.0; orig.values.len()];
        for replicate in replicates {
            let table = ContingencyTable::tabulate(replicate, subset)?;
            let scale = if counts { 1.0 } else { replicate.len() as f64 };
            for (a, v) in avg.iter_mut().zip(&table.values) {
                *a += v / scale;
            }
        }
        let orig_scale = if counts { 1.0 } else { original.len() as f64 };
        for (cell, &a) in avg.iter().enumerate() {
            let err = (orig.values[cell] / orig_scale - a / m).abs();
            max = max.max(err);
        }
    }
    Ok(max)
}

fn check_comparable(original: &Dataset, replicates: &[Dataset]) -> Result<()> {
    if original.is_empty() {
        return Err(CipherError::invalid("original dataset is empty"));
    }
    if replicates.is_empty() {
        return Err(CipherError::invalid("need at least one synthetic replicate"));
    }
    for (i, replicate) in replicates.iter().enumerate() {
        if replicate.schema().as_ref() != original.schema().as_ref() {
            return Err(CipherError::invalid(format!(
                "replicate {} disagrees with the original schema",
                i + 1
            )));
        }
        if replicate.is_empty() {
            return Err(CipherError::invalid(format!("replicate {} is empty", i + 1)));
        }
    }
    Ok(())
}

/// How one coefficient's sign and statistical significance survived
/// synthesis. `Best` covers both agreement cases: significant with
/// matching signs, or insignificant in both analyses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub enum SssOutcome {
    #[serde(rename = "best")]
    Best,
    /// Significant in the original only, signs matching: the synthetic
    /// analysis misses a real effect.
    #[serde(rename = "II+")]
    TypeIiPlus,
    /// Significant in the synthetic only, signs matching: a spurious
    /// effect appears.
    #[serde(rename = "I+")]
    TypeIPlus,
    #[serde(rename = "neutral")]
    Neutral,
    #[serde(rename = "II-")]
    TypeIiMinus,
    #[serde(rename = "I-")]
    TypeIMinus,
    /// Both significant with opposite signs.
    #[serde(rename = "worst")]
    Worst,
}

impl SssOutcome {
    /// Every category, ordered from best to worst preservation.
    pub const ALL: [SssOutcome; 7] = [
        SssOutcome::Best,
        SssOutcome::TypeIiPlus,
        SssOutcome::TypeIPlus,
        SssOutcome::Neutral,
        SssOutcome::TypeIiMinus,
        SssOutcome::TypeIMinus,
        SssOutcome::Worst,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            SssOutcome::Best => "best",
            SssOutcome::TypeIiPlus => "II+",
            SssOutcome::TypeIPlus => "I+",
            SssOutcome::Neutral => "neutral",
            SssOutcome::TypeIiMinus => "II-",
            SssOutcome::TypeIMinus => "I-",
            SssOutcome::Worst => "worst",
        }
    }
}

impl fmt::Display for SssOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Classifies one coefficient by whether the original and synthetic
/// estimates share a sign and which of the two is significant.
pub fn classify_sss(sign_match: bool, sig_orig: bool, sig_synth: bool) -> SssOutcome {
    match (sign_match, sig_orig, sig_synth) {
        (true, true, true) => SssOutcome::Best,
        (true, false, false) => SssOutcome::Best,
        (true, true, false) => SssOutcome::TypeIiPlus,
        (true, false, true) => SssOutcome::TypeIPlus,
        (false, false, false) => SssOutcome::Neutral,
        (false, true, false) => SssOutcome::TypeIiMinus,
        (false, false, true) => SssOutcome::TypeIMinus,
        (false, true, true) => SssOutcome::Worst,
    }
}
