//! Sampling microdata from a joint distribution and the m-replicate
//! synthesis pipeline shared by every method.
//!
//! `generate_replicates` is the single entry point: it splits the
//! privacy budget across m replicates, runs the chosen synthesizer on
//! per-replicate RNG substreams (in parallel), samples one microdata
//! set per replicate, and assembles a run report with the exact budget
//! ledger and per-replicate diagnostics.

use num_rational::Ratio;
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::baselines::{full_table_sanitize, mwem, MwemOptions, MwemSelection};
use crate::cipher::{reconstruct_full, PivotPolicy, ReconstructionDiagnostics};
use crate::error::{CipherError, Result};
use crate::privacy::{laplace_sanitize, laplace_scale, BudgetLedger, LedgerReport, PrivacySpec};
use crate::rng::{tag, StreamFactory};
use crate::tables::{ContingencyTable, CorrectionStats, Dataset, JointDistribution, QuerySet};

/// Which synthesizer turns sanitized queries into a joint distribution.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
#[serde(tag = "name", rename_all = "kebab-case")]
pub enum Method {
    Cipher { lambda: f64, pivot: PivotPolicy },
    Mwem { iterations: usize, average: bool },
    FullTable,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Cipher { .. } => "cipher",
            Method::Mwem { .. } => "mwem",
            Method::FullTable => "full-table",
        }
    }
}

/// Draws n records i.i.d. from a normalized joint over the full domain.
pub fn sample_dataset(joint: &JointDistribution, n: usize, rng: &mut impl Rng) -> Result<Dataset> {
    if n == 0 {
        return Err(CipherError::invalid("sample size must be positive"));
    }
    let schema = joint.schema().clone();
    if joint.subset() != schema.full_subset().as_slice() {
        return Err(CipherError::invalid("sampling needs a distribution over the full domain"));
    }
    if !joint.is_proper(1e-6) || joint.probs.iter().any(|p| *p < 0.0) {
        return Err(CipherError::invalid("sampling needs a normalized nonnegative distribution"));
    }

    let mut cumulative = Vec::with_capacity(joint.probs.len());
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (cell, &p) in joint.probs.iter().enumerate() {
        acc += p;
        cumulative.push(acc);
        if p > 0.0 {
            last_positive = cell;
        }
    }

    let indexer = joint.indexer();
    let p = schema.len();
    let mut codes = Vec::with_capacity(n * p);
    let mut levels = vec![0usize; p];
    for _ in 0..n {
        let u: f64 = rng.random();
        // Smallest cell whose cumulative mass exceeds u; the clamp only
        // fires when rounding left the final cumulative short of u.
        let mut cell = cumulative.partition_point(|&c| c <= u);
        if cell > last_positive {
            cell = last_positive;
        }
        indexer.decode_into(cell, &mut levels);
        codes.extend(levels.iter().map(|&l| l as u32));
    }
    Dataset::from_flat(schema, n, codes)
}

/// Diagnostics from building one replicate.
#[derive(Clone, Debug, Serialize)]
pub struct ReplicateReport {
    /// 1-based replicate index, matching file names and RNG streams.
    pub replicate: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reconstruction: Option<ReconstructionDiagnostics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub full_table: Option<FullTableReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mwem: Option<MwemReport>,
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct FullTableReport {
    pub nonpositive_total: bool,
    pub correction: CorrectionStats,
}

/// Released MWEM history: mechanism outputs only. The trace's true
/// error curve stays internal because it is computed from the original
/// data without noise.
#[derive(Clone, Debug, Serialize)]
pub struct MwemReport {
    pub selections: Vec<MwemSelectionReport>,
}

#[derive(Clone, Debug, Serialize)]
pub struct MwemSelectionReport {
    pub table: String,
    pub cell: Vec<usize>,
    pub measured: f64,
}

impl MwemSelectionReport {
    fn from_selection(s: &MwemSelection) -> Self {
        MwemSelectionReport { table: s.table.join("x"), cell: s.cell.clone(), measured: s.measured }
    }
}

/// Everything a run wrote besides the synthetic records themselves.
#[derive(Clone, Debug, Serialize)]
pub struct RunReport {
    pub method: Method,
    pub epsilon: f64,
    pub replicates: usize,
    pub neighbor: String,
    pub seed: u64,
    pub original_n: usize,
    pub synthetic_n: usize,
    pub noise_disabled: bool,
    pub queries: Vec<Vec<String>>,
    pub budget: LedgerReport,
    pub replicate_reports: Vec<ReplicateReport>,
}

/// Output of one full synthesis run.
#[derive(Debug)]
pub struct SynthesisOutput {
    /// One microdata set per replicate, in replicate order.
    pub replicates: Vec<Dataset>,
    pub report: RunReport,
}

/// Builds m synthetic replicates of the dataset under the given total
/// budget. Each replicate sanitizes its queries afresh under budget
/// epsilon / m, reconstructs or reweights a full joint, and samples
/// `synthetic_n` records (the original n when unset). Deterministic
/// given the spec's seed.
pub fn generate_replicates(
    dataset: &Dataset,
    queries: &QuerySet,
    spec: &PrivacySpec,
    method: Method,
    synthetic_n: Option<usize>,
    disable_noise: bool,
) -> Result<SynthesisOutput> {
    spec.validate()?;
    if dataset.is_empty() {
        return Err(CipherError::invalid("cannot synthesize from an empty dataset"));
    }
    match method {
        Method::Cipher { lambda, .. } => {
            if lambda <= 0.0 || !lambda.is_finite() {
                return Err(CipherError::invalid(format!(
                    "regularization strength must be positive, got {lambda}"
                )));
            }
        }
        Method::Mwem { iterations, .. } => {
            if iterations == 0 {
                return Err(CipherError::invalid("MWEM needs at least one iteration"));
            }
        }
        Method::FullTable => {}
    }

    let schema = dataset.schema().clone();
    let factory = StreamFactory::new(spec.seed);
    let n_out = synthetic_n.unwrap_or(dataset.len());
    let m = spec.replicates;

    let built: Result<Vec<(Dataset, ReplicateReport)>> = (1..=m as u64)
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|l| build_replicate(dataset, queries, spec, method, disable_noise, n_out, &factory, l))
        .collect();
    let built = built?;

    let mut ledger = BudgetLedger::new(spec.epsilon);
    charge_budget(&mut ledger, queries, spec, method);
    ledger.ensure_within_budget()?;
    let total = ledger.total_share();
    if total != Ratio::from_integer(1) {
        return Err(CipherError::numerical(format!(
            "budget shares sum to {total}, expected exactly 1"
        )));
    }

    let mut replicates = Vec::with_capacity(m);
    let mut replicate_reports = Vec::with_capacity(m);
    for (data, report) in built {
        replicates.push(data);
        replicate_reports.push(report);
    }

    let report = RunReport {
        method,
        epsilon: spec.epsilon,
        replicates: m,
        neighbor: spec.neighbor.to_string(),
        seed: spec.seed,
        original_n: dataset.len(),
        synthetic_n: n_out,
        noise_disabled: disable_noise,
        queries: queries.names(&schema),
        budget: ledger.report(),
        replicate_reports,
    };
    Ok(SynthesisOutput { replicates, report })
}

#[allow(clippy::too_many_arguments)]
fn build_replicate(
    dataset: &Dataset,
    queries: &QuerySet,
    spec: &PrivacySpec,
    method: Method,
    disable_noise: bool,
    n_out: usize,
    factory: &StreamFactory,
    l: u64,
) -> Result<(Dataset, ReplicateReport)> {
    let schema = dataset.schema().clone();
    let mut report = ReplicateReport {
        replicate: l as usize,
        reconstruction: None,
        full_table: None,
        mwem: None,
    };

    let joint = match method {
        Method::Cipher { lambda, pivot } => {
            let scale = if disable_noise { 0.0 } else { laplace_scale(spec, queries.len()) };
            let mut tables = Vec::with_capacity(queries.len());
            for (k, subset) in queries.subsets().iter().enumerate() {
                let raw = ContingencyTable::tabulate(dataset, subset)?;
                let mut rng = factory.stream(&[tag::SANITIZE, l, k as u64]);
                tables.push(laplace_sanitize(&raw, scale, &mut rng)?);
            }
            let (joint, diags) = reconstruct_full(&tables, lambda, pivot, factory, l)?;
            report.reconstruction = Some(diags);
            joint
        }
        Method::FullTable => {
            let mut rng = factory.stream(&[tag::SANITIZE, l, 0]);
            let (joint, diag) = full_table_sanitize(dataset, spec, disable_noise, &mut rng)?;
            report.full_table = Some(FullTableReport {
                nonpositive_total: diag.nonpositive_total,
                correction: diag.correction,
            });
            joint
        }
        Method::Mwem { iterations, average } => {
            let initial = JointDistribution::uniform(schema.clone(), schema.full_subset())?;
            let options = MwemOptions { average, disable_noise, neighbor: spec.neighbor };
            let epsilon_replicate = spec.epsilon / spec.replicates as f64;
            let mut rng = factory.stream(&[tag::MWEM, l]);
            let (joint, trace) =
                mwem(dataset, queries, epsilon_replicate, iterations, &initial, &options, &mut rng)?;
            report.mwem = Some(MwemReport {
                selections: trace.selections.iter().map(MwemSelectionReport::from_selection).collect(),
            });
            joint
        }
    };

    let mut rng = factory.stream(&[tag::SAMPLE, l]);
    let data = sample_dataset(&joint, n_out, &mut rng)?;
    Ok((data, report))
}

/// Records the exact budget decomposition for the whole run. Shares
/// are exact rationals; each method's entries must sum to 1.
fn charge_budget(ledger: &mut BudgetLedger, queries: &QuerySet, spec: &PrivacySpec, method: Method) {
    let m = spec.replicates as u128;
    match method {
        Method::Cipher { .. } => {
            let q = queries.len() as u128;
            for l in 1..=m {
                for k in 0..q {
                    ledger.charge(
                        format!("replicate {l}: table {k}"),
                        Ratio::new(1, m * q),
                    );
                }
            }
        }
        Method::FullTable => {
            for l in 1..=m {
                ledger.charge(format!("replicate {l}: full table"), Ratio::new(1, m));
            }
        }
        Method::Mwem { iterations, .. } => {
            let t_total = iterations as u128;
            for l in 1..=m {
                for t in 1..=t_total {
                    let share = Ratio::new(1, 2 * m * t_total);
                    ledger.charge(format!("replicate {l}: iteration {t} select"), share);
                    ledger.charge(format!("replicate {l}: iteration {t} measure"), share);
                }
            }
        }
    }
}
