//! Baseline synthesizers: full-table Laplace sanitization and MWEM.
//!
//! Both produce a [`JointDistribution`] over the full attribute domain,
//! directly comparable to the reconstruction pipeline's output. The
//! full-table baseline sanitizes the complete p-way contingency table
//! in one shot; MWEM iteratively reweights a dense distribution to
//! match a set of low-dimensional table cells, paying privacy budget
//! at every iteration.

use rand::Rng;

use crate::cipher::MAX_DENSE_CELLS;
use crate::error::{CipherError, Result};
use crate::privacy::{
    exponential_select, laplace_noise, laplace_sanitize, laplace_scale, NeighborModel, PrivacySpec,
};
use crate::tables::{
    CellIndexer, ContingencyTable, CorrectionStats, Dataset, JointDistribution, QuerySet,
};

/// Largest magnitude allowed in a multiplicative-weights exponent.
/// Heavy Laplace noise at tiny budgets can make `measured - current`
/// arbitrarily large; without the clamp a single update could overflow
/// every weight to infinity.
const EXP_CLAMP: f64 = 500.0;

/// What happened while sanitizing one full table.
#[derive(Clone, Copy, Debug, Default)]
pub struct SanitizeDiagnostics {
    /// The noisy table total was nonpositive and uniform was substituted.
    pub nonpositive_total: bool,
    /// Final negativity correction.
    pub correction: CorrectionStats,
}

/// Sanitizes the full p-way contingency table with Laplace noise at
/// scale sensitivity * m / epsilon (the table is the only query each
/// replicate pays for) and normalizes the result.
///
/// Equivalent in distribution to reconstruction with the query set
/// {full table}: the same substream yields the identical output.
pub fn full_table_sanitize(
    dataset: &Dataset,
    spec: &PrivacySpec,
    disable_noise: bool,
    rng: &mut impl Rng,
) -> Result<(JointDistribution, SanitizeDiagnostics)> {
    spec.validate()?;
    let schema = dataset.schema();
    let cells = schema.domain_size()?;
    if cells > MAX_DENSE_CELLS as u128 {
        return Err(CipherError::invalid(format!(
            "full domain has {cells} cells, above the dense limit {MAX_DENSE_CELLS}"
        )));
    }
    let table = ContingencyTable::tabulate(dataset, &schema.full_subset())?;
    let scale = if disable_noise { 0.0 } else { laplace_scale(spec, 1) };
    let noisy = laplace_sanitize(&table, scale, rng)?;
    let (mut joint, nonpositive_total) = noisy.to_distribution();
    let correction = joint.correct_and_normalize();
    Ok((joint, SanitizeDiagnostics { nonpositive_total, correction }))
}

/// Knobs for one MWEM run that are not privacy parameters.
#[derive(Clone, Copy, Debug)]
pub struct MwemOptions {
    /// Return the average of the per-iteration distributions instead of
    /// the final one.
    pub average: bool,
    /// Skip noise injection (selection becomes argmax); testing hook.
    pub disable_noise: bool,
    pub neighbor: NeighborModel,
}

impl Default for MwemOptions {
    fn default() -> Self {
        MwemOptions { average: false, disable_noise: false, neighbor: NeighborModel::AddRemove }
    }
}

/// One exponential-mechanism pick and its noisy measurement.
#[derive(Clone, Debug)]
pub struct MwemSelection {
    /// Attribute names of the table the selected cell lives in.
    pub table: Vec<String>,
    /// Level tuple of the selected cell within that table.
    pub cell: Vec<usize>,
    /// Noisy count fed to the multiplicative update.
    pub measured: f64,
}

/// Per-iteration history of one MWEM run.
#[derive(Clone, Debug, Default)]
pub struct MwemTrace {
    pub selections: Vec<MwemSelection>,
    /// Largest absolute query error after each update. Computed against
    /// the original counts, so it is a diagnostic for testing and
    /// tuning only and must not be released with the synthetic data.
    pub max_errors: Vec<f64>,
    /// Weight total after each iteration's renormalization; should sit
    /// at n up to float error. Post-processing of mechanism outputs,
    /// safe to release.
    pub weight_totals: Vec<f64>,
    /// Smallest weight after each iteration; multiplicative updates
    /// keep every weight strictly positive.
    pub weight_minima: Vec<f64>,
}

/// One table's cells viewed as counting queries on the full domain.
struct TableQueries {
    names: Vec<String>,
    indexer: CellIndexer,
    /// Maps each full-domain cell to this table's cell.
    proj: Vec<u32>,
    /// Original counts, the query answers on the real data.
    counts: Vec<f64>,
    /// Index of this table's first cell in the flat query list.
    offset: usize,
}

/// Multiplicative Weights Exponential Mechanism over the cells of the
/// given low-dimensional tables.
///
/// Maintains a weight vector over the full domain scaled to n. Each of
/// the `iterations` rounds selects one cell by the exponential
/// mechanism with score |q(weights) - q(data)| and budget
/// epsilon_replicate / (2 iterations), measures it with Laplace noise
/// at scale 2 iterations * sensitivity / epsilon_replicate, then
/// applies the update w_i <- w_i * exp(q_i (measured - q(weights)) / (2n))
/// and renormalizes. Returns the final (or averaged) weights as a
/// distribution plus the run trace.
pub fn mwem(
    dataset: &Dataset,
    queries: &QuerySet,
    epsilon_replicate: f64,
    iterations: usize,
    initial: &JointDistribution,
    options: &MwemOptions,
    rng: &mut impl Rng,
) -> Result<(JointDistribution, MwemTrace)> {
    if iterations == 0 {
        return Err(CipherError::invalid("MWEM needs at least one iteration"));
    }
    if !options.disable_noise && (!epsilon_replicate.is_finite() || epsilon_replicate <= 0.0) {
        return Err(CipherError::invalid(format!(
            "per-replicate epsilon must be positive and finite, got {epsilon_replicate}"
        )));
    }
    if dataset.is_empty() {
        return Err(CipherError::invalid("MWEM needs a nonempty dataset"));
    }
    let schema = dataset.schema().clone();
    let cells = schema.domain_size()?;
    if cells > MAX_DENSE_CELLS as u128 {
        return Err(CipherError::invalid(format!(
            "full domain has {cells} cells, above the dense limit {MAX_DENSE_CELLS}"
        )));
    }
    let full = schema.full_subset();
    if initial.subset() != full.as_slice() {
        return Err(CipherError::invalid("MWEM initial distribution must cover the full domain"));
    }
    if !initial.is_proper(1e-6) {
        return Err(CipherError::invalid("MWEM initial distribution must be normalized"));
    }

    let full_indexer = CellIndexer::new(&schema.cardinalities())?;
    let d = full_indexer.size();
    let n = dataset.len() as f64;

    // View every cell of every table as one counting query, laid out in
    // a flat list so the exponential mechanism scores them together.
    let mut tables = Vec::with_capacity(queries.len());
    let mut offset = 0;
    for subset in queries.subsets() {
        let table = ContingencyTable::tabulate(dataset, subset)?;
        let indexer = table.indexer().clone();
        tables.push(TableQueries {
            names: schema.subset_names(subset),
            proj: vec![0u32; d],
            counts: table.values,
            offset,
            indexer,
        });
        offset += tables.last().unwrap().indexer.size();
    }
    let total_queries = offset;
    let mut digits = vec![0usize; schema.len()];
    for flat in 0..d {
        full_indexer.decode_into(flat, &mut digits);
        for (table, subset) in tables.iter_mut().zip(queries.subsets()) {
            let mut cell = 0;
            for (pos, &attr) in subset.iter().enumerate() {
                cell += table.indexer.strides()[pos] * digits[attr];
            }
            table.proj[flat] = cell as u32;
        }
    }

    let mut weights: Vec<f64> = initial.probs.iter().map(|p| p * n).collect();
    let mut average = if options.average { Some(vec![0.0f64; d]) } else { None };
    let mut margins: Vec<Vec<f64>> = tables.iter().map(|t| vec![0.0; t.indexer.size()]).collect();
    let mut scores = vec![0.0f64; total_queries];
    let mut trace = MwemTrace::default();

    let sensitivity = options.neighbor.count_sensitivity();
    let epsilon_select = epsilon_replicate / (2.0 * iterations as f64);
    let measure_scale = if options.disable_noise {
        0.0
    } else {
        2.0 * iterations as f64 * sensitivity / epsilon_replicate
    };

    for _ in 0..iterations {
        fill_scores(&tables, &weights, &mut margins, &mut scores);
        let selected = if options.disable_noise {
            argmax(&scores)
        } else {
            exponential_select(&scores, epsilon_select, sensitivity, rng)?
        };
        let (t, cell) = locate(&tables, selected);
        let table = &tables[t];
        let measured = table.counts[cell] + laplace_noise(rng, measure_scale);
        let current = margins[t][cell];

        let exponent = ((measured - current) / (2.0 * n)).clamp(-EXP_CLAMP, EXP_CLAMP);
        let factor = exponent.exp();
        let cell = cell as u32;
        for (w, &p) in weights.iter_mut().zip(&table.proj) {
            if p == cell {
                *w *= factor;
            }
        }
        let sum: f64 = weights.iter().sum();
        if sum <= 0.0 || !sum.is_finite() {
            return Err(CipherError::numerical("MWEM weights degenerated during an update"));
        }
        let rescale = n / sum;
        for w in weights.iter_mut() {
            *w *= rescale;
        }
        debug_assert!((weights.iter().sum::<f64>() - n).abs() <= 1e-6 * n.max(1.0));

        if let Some(avg) = average.as_mut() {
            for (a, w) in avg.iter_mut().zip(&weights) {
                *a += w;
            }
        }
        trace.selections.push(MwemSelection {
            table: table.names.clone(),
            cell: table.indexer.decode(cell as usize),
            measured,
        });
        trace.max_errors.push(fill_scores(&tables, &weights, &mut margins, &mut scores));
        trace.weight_totals.push(weights.iter().sum());
        trace.weight_minima.push(weights.iter().copied().fold(f64::INFINITY, f64::min));
    }

    let probs: Vec<f64> = match average {
        Some(avg) => {
            let scale = 1.0 / (iterations as f64 * n);
            avg.into_iter().map(|a| a * scale).collect()
        }
        None => weights.into_iter().map(|w| w / n).collect(),
    };
    let joint = JointDistribution::new(schema, full, probs)?;
    Ok((joint, trace))
}

/// Recomputes every table's margin of `weights` and the per-cell
/// absolute errors against the original counts; returns the maximum.
fn fill_scores(
    tables: &[TableQueries],
    weights: &[f64],
    margins: &mut [Vec<f64>],
    scores: &mut [f64],
) -> f64 {
    let mut max = 0.0f64;
    for (table, margin) in tables.iter().zip(margins.iter_mut()) {
        margin.iter_mut().for_each(|m| *m = 0.0);
        for (&w, &p) in weights.iter().zip(&table.proj) {
            margin[p as usize] += w;
        }
        for (cell, (&m, &c)) in margin.iter().zip(&table.counts).enumerate() {
            let err = (m - c).abs();
            scores[table.offset + cell] = err;
            max = max.max(err);
        }
    }
    max
}

/// First index of the largest score.
fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (k, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = k;
        }
    }
    best
}

/// Splits a flat query index into (table index, cell within table).
fn locate(tables: &[TableQueries], selected: usize) -> (usize, usize) {
    for (t, table) in tables.iter().enumerate() {
        let next = table.offset + table.indexer.size();
        if selected < next {
            return (t, selected - table.offset);
        }
    }
    unreachable!("selected query index out of range");
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cipher::{reconstruct_full, PivotPolicy};
    use crate::rng::{tag as tags, StreamFactory};
    use crate::tables::{Attribute, Schema};
    use std::sync::Arc;

    fn schema(dims: &[usize]) -> Arc<Schema> {
        let attrs = dims
            .iter()
            .enumerate()
            .map(|(i, &k)| Attribute::with_cardinality(format!("V{}", i + 1), k))
            .collect();
        Arc::new(Schema::new(attrs).unwrap())
    }

    fn random_dataset(schema: &Arc<Schema>, n: usize, seed: u64) -> Dataset {
        let mut rng = StreamFactory::new(seed).stream(&[tags::DGP]);
        let dims = schema.cardinalities();
        let rows: Vec<Vec<u32>> = (0..n)
            .map(|_| dims.iter().map(|&k| rng.random_range(0..k as u32)).collect())
            .collect();
        Dataset::from_rows(schema.clone(), &rows).unwrap()
    }

    fn spec(epsilon: f64, replicates: usize) -> PrivacySpec {
        PrivacySpec { epsilon, replicates, neighbor: NeighborModel::AddRemove, seed: 7 }
    }

    #[test]
    fn full_table_zero_noise_is_empirical() {
        let schema = schema(&[2, 3]);
        let data = random_dataset(&schema, 50, 3);
        let mut rng = StreamFactory::new(3).stream(&[tags::SANITIZE, 1, 0]);
        let (joint, diag) = full_table_sanitize(&data, &spec(1.0, 1), true, &mut rng).unwrap();
        let table = ContingencyTable::tabulate(&data, &schema.full_subset()).unwrap();
        for (cell, &p) in joint.probs.iter().enumerate() {
            assert!((p - table.values[cell] / 50.0).abs() < 1e-15);
        }
        assert!(!diag.nonpositive_total);
        assert_eq!(diag.correction.truncated_cells, 0);
    }

    #[test]
    fn full_table_sanitizes_all_36_cells() {
        let schema = schema(&[2, 2, 3, 3]);
        let data = random_dataset(&schema, 200, 4);
        let mut rng = StreamFactory::new(4).stream(&[tags::SANITIZE, 1, 0]);
        let (joint, _) = full_table_sanitize(&data, &spec(1.0, 5), false, &mut rng).unwrap();
        assert_eq!(joint.probs.len(), 36);
        assert!(joint.is_proper(1e-9));
    }

    #[test]
    fn full_table_handles_empty_cells_under_noise() {
        let schema = schema(&[2, 2]);
        // Every record in cell (0,0); the other three cells are empty.
        let rows = vec![vec![0u32, 0u32]; 10];
        let data = Dataset::from_rows(schema.clone(), &rows).unwrap();
        for seed in 0..20u64 {
            let mut rng = StreamFactory::new(seed).stream(&[tags::SANITIZE, 1, 0]);
            let (joint, _) =
                full_table_sanitize(&data, &spec(0.4, 1), false, &mut rng).unwrap();
            assert!(joint.is_proper(1e-9), "seed {seed} gave an improper distribution");
            assert!(joint.probs.iter().all(|p| p.is_finite() && *p >= 0.0));
        }
    }

    #[test]
    fn full_table_matches_reconstruction_with_full_query() {
        let schema = schema(&[2, 3, 2]);
        let data = random_dataset(&schema, 30, 99);
        let factory = StreamFactory::new(99);
        let s = spec(0.7, 2);

        let mut rng_a = factory.stream(&[tags::SANITIZE, 1, 0]);
        let (direct, _) = full_table_sanitize(&data, &s, false, &mut rng_a).unwrap();

        let table = ContingencyTable::tabulate(&data, &schema.full_subset()).unwrap();
        let mut rng_b = factory.stream(&[tags::SANITIZE, 1, 0]);
        let noisy = laplace_sanitize(&table, laplace_scale(&s, 1), &mut rng_b).unwrap();
        let (via_cipher, _) =
            reconstruct_full(&[noisy], 0.015, PivotPolicy::FirstAttribute, &factory, 1).unwrap();

        for (a, b) in direct.probs.iter().zip(&via_cipher.probs) {
            assert!((a - b).abs() < 1e-12, "paths diverged: {a} vs {b}");
        }
    }

    #[test]
    fn full_table_rejects_oversized_domain() {
        let schema = schema(&[64, 64, 64, 65]);
        let data = Dataset::from_rows(schema.clone(), &[vec![0, 0, 0, 0]]).unwrap();
        let mut rng = StreamFactory::new(1).stream(&[tags::SANITIZE, 1, 0]);
        let err = full_table_sanitize(&data, &spec(1.0, 1), false, &mut rng).unwrap_err();
        assert!(err.to_string().contains("dense limit"));
    }

    /// Replays the module's update arithmetic on a two-cell instance
    /// with plain scalars and checks the trace matches step for step.
    #[test]
    fn mwem_two_cell_oracle_error_strictly_decreases() {
        let schema = schema(&[2]);
        let rows = vec![vec![0u32]; 8];
        let data = Dataset::from_rows(schema.clone(), &rows).unwrap();
        let queries = QuerySet::new(&schema, vec![vec![0]]).unwrap();
        let initial = JointDistribution::uniform(schema.clone(), vec![0]).unwrap();
        let options =
            MwemOptions { average: false, disable_noise: true, ..MwemOptions::default() };
        let mut rng = StreamFactory::new(0).stream(&[tags::MWEM, 1]);
        let iterations = 6;
        let (joint, trace) =
            mwem(&data, &queries, 1.0, iterations, &initial, &options, &mut rng).unwrap();

        let n = 8.0;
        let counts = [8.0, 0.0];
        let mut w = [4.0f64, 4.0];
        let mut expected = Vec::new();
        for _ in 0..iterations {
            let s0 = (w[0] - counts[0]).abs();
            let s1 = (w[1] - counts[1]).abs();
            let k = usize::from(s1 > s0);
            w[k] *= ((counts[k] - w[k]) / (2.0 * n)).exp();
            let sum = w[0] + w[1];
            w[0] *= n / sum;
            w[1] *= n / sum;
            expected.push((w[0] - counts[0]).abs().max((w[1] - counts[1]).abs()));
        }
        assert_eq!(trace.max_errors.len(), iterations);
        for (got, want) in trace.max_errors.iter().zip(&expected) {
            assert!((got - want).abs() < 1e-12, "trace {got} vs scalar replay {want}");
        }
        let mut previous = n / 2.0;
        for &err in &trace.max_errors {
            assert!(err < previous, "error failed to decrease: {err} after {previous}");
            previous = err;
        }
        assert!((joint.probs[0] - (n - expected[iterations - 1]) / n).abs() < 1e-12);
    }

    #[test]
    fn mwem_weights_stay_positive_and_normalized() {
        let schema = schema(&[2, 3]);
        let queries = QuerySet::all_kway(&schema, 1).unwrap();
        for seed in 0..10u64 {
            let data = random_dataset(&schema, 40, seed);
            let initial = JointDistribution::uniform(schema.clone(), schema.full_subset()).unwrap();
            let mut rng = StreamFactory::new(seed).stream(&[tags::MWEM, 1]);
            let (joint, trace) =
                mwem(&data, &queries, 0.5, 25, &initial, &MwemOptions::default(), &mut rng)
                    .unwrap();
            assert!(joint.is_proper(1e-9), "seed {seed}");
            assert!(joint.probs.iter().all(|p| *p > 0.0 && p.is_finite()), "seed {seed}");
            assert_eq!(trace.selections.len(), 25);
            assert!(trace.max_errors.iter().all(|e| e.is_finite()));
        }
    }

    #[test]
    fn mwem_average_matches_scalar_replay() {
        let schema = schema(&[2]);
        let rows = vec![vec![0u32]; 8];
        let data = Dataset::from_rows(schema.clone(), &rows).unwrap();
        let queries = QuerySet::new(&schema, vec![vec![0]]).unwrap();
        let initial = JointDistribution::uniform(schema.clone(), vec![0]).unwrap();
        let options = MwemOptions { average: true, disable_noise: true, ..MwemOptions::default() };
        let mut rng = StreamFactory::new(0).stream(&[tags::MWEM, 1]);
        let iterations = 4;
        let (joint, _) =
            mwem(&data, &queries, 1.0, iterations, &initial, &options, &mut rng).unwrap();

        let n = 8.0;
        let counts = [8.0, 0.0];
        let mut w = [4.0f64, 4.0];
        let mut sums = [0.0f64, 0.0];
        for _ in 0..iterations {
            let s0 = (w[0] - counts[0]).abs();
            let s1 = (w[1] - counts[1]).abs();
            let k = usize::from(s1 > s0);
            w[k] *= ((counts[k] - w[k]) / (2.0 * n)).exp();
            let sum = w[0] + w[1];
            w[0] *= n / sum;
            w[1] *= n / sum;
            sums[0] += w[0];
            sums[1] += w[1];
        }
        let scale = 1.0 / (iterations as f64 * n);
        assert!((joint.probs[0] - sums[0] * scale).abs() < 1e-12);
        assert!((joint.probs[1] - sums[1] * scale).abs() < 1e-12);
        assert!(joint.is_proper(1e-9));
    }

    #[test]
    fn mwem_is_deterministic_per_substream() {
        let schema = schema(&[2, 2, 3]);
        let data = random_dataset(&schema, 60, 11);
        let queries = QuerySet::all_kway(&schema, 2).unwrap();
        let initial = JointDistribution::uniform(schema.clone(), schema.full_subset()).unwrap();
        let run = |seed: u64| {
            let mut rng = StreamFactory::new(seed).stream(&[tags::MWEM, 1]);
            mwem(&data, &queries, 0.8, 15, &initial, &MwemOptions::default(), &mut rng)
                .unwrap()
                .0
                .probs
        };
        assert_eq!(run(5), run(5));
        assert_ne!(run(5), run(6));
    }

    #[test]
    fn mwem_rejects_bad_arguments() {
        let schema = schema(&[2, 2]);
        let data = random_dataset(&schema, 10, 1);
        let queries = QuerySet::all_kway(&schema, 1).unwrap();
        let initial = JointDistribution::uniform(schema.clone(), schema.full_subset()).unwrap();
        let options = MwemOptions::default();
        let mut rng = StreamFactory::new(1).stream(&[tags::MWEM, 1]);

        let err = mwem(&data, &queries, 1.0, 0, &initial, &options, &mut rng).unwrap_err();
        assert!(err.to_string().contains("iteration"));

        let err = mwem(&data, &queries, 0.0, 5, &initial, &options, &mut rng).unwrap_err();
        assert!(err.to_string().contains("epsilon"));

        let narrow = JointDistribution::uniform(schema.clone(), vec![0]).unwrap();
        let err = mwem(&data, &queries, 1.0, 5, &narrow, &options, &mut rng).unwrap_err();
        assert!(err.to_string().contains("full domain"));
    }
}
