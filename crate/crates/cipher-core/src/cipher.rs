//! Joint-distribution reconstruction from sanitized contingency tables.
//!
//! The full p-way joint is built stepwise. Tables present in the query
//! set are used as-is (normalized, never re-derived). Any other subset
//! is either marginalized out of the sanitized tables containing it, or
//! assembled from its (j-1)-way joints by solving a regularized block
//! linear system for the conditional of a pivot attribute and lifting
//! it onto the base joint. Negatives are carried through and corrected
//! once, on the final full joint.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::Range;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::Serialize;

use crate::error::{CipherError, Result};
use crate::rng::{tag, StreamFactory};
use crate::tables::{
    CellIndexer, ContingencyTable, CorrectionStats, JointDistribution, QuerySet, Schema,
};

/// Upper bound on dense vector or matrix entries materialized at once;
/// keeps memory in the hundreds of megabytes at worst.
pub const MAX_DENSE_CELLS: usize = 16_777_216;

/// How the pivot attribute of each reconstructed subset is picked.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum PivotPolicy {
    /// Uniformly at random from the subset, per-subset substream.
    Random,
    /// Always the first attribute of the subset, for debugging.
    FirstAttribute,
}

impl fmt::Display for PivotPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PivotPolicy::Random => write!(f, "random"),
            PivotPolicy::FirstAttribute => write!(f, "first-attribute"),
        }
    }
}

impl FromStr for PivotPolicy {
    type Err = CipherError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(PivotPolicy::Random),
            "first-attribute" | "first_attribute" => Ok(PivotPolicy::FirstAttribute),
            other => Err(CipherError::invalid(format!(
                "unknown pivot policy '{other}' (expected random or first-attribute)"
            ))),
        }
    }
}

/// The equations tying the unknown pivot conditional to the observed
/// lower-order joints.
///
/// The assembled system is block-diagonal with one block per non-last
/// pivot level; all blocks share the same coefficient matrix, so only
/// one copy is stored, together with one right-hand side per level.
/// Within a block, rows are stacked over the co-attributes of the
/// subset, then over the cells of the remaining attributes. Unknowns
/// are the cells of the subset minus the pivot, level-major across
/// blocks.
#[derive(Clone, Debug)]
pub struct BlockLinearSystem {
    pub subset: Vec<usize>,
    pub pivot: usize,
    pub pivot_cardinality: usize,
    /// Shared per-level coefficient block.
    pub matrix: DMatrix<f64>,
    /// Right-hand side for each non-last pivot level.
    pub rhs: Vec<DVector<f64>>,
    /// Row ranges of the block, one per co-attribute.
    pub row_blocks: Vec<(usize, Range<usize>)>,
    /// Conditional cells that were uniform-filled for zero mass.
    pub zero_mass_fills: usize,
}

impl BlockLinearSystem {
    pub fn block_rows(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn block_cols(&self) -> usize {
        self.matrix.ncols()
    }

    /// Total equations across all pivot-level blocks.
    pub fn equations(&self) -> usize {
        self.matrix.nrows() * (self.pivot_cardinality - 1)
    }

    /// Total unknowns across all pivot-level blocks.
    pub fn unknowns(&self) -> usize {
        self.matrix.ncols() * (self.pivot_cardinality - 1)
    }

    /// Meaning of assembled unknown `i`: (pivot level, cell of the
    /// subset minus the pivot).
    pub fn unknown_meaning(&self, i: usize) -> (usize, usize) {
        (i / self.matrix.ncols(), i % self.matrix.ncols())
    }

    /// Assembles the full block-diagonal system (testing and oracles).
    pub fn assembled(&self) -> (DMatrix<f64>, DVector<f64>) {
        let levels = self.pivot_cardinality - 1;
        let (r, c) = (self.matrix.nrows(), self.matrix.ncols());
        let mut a = DMatrix::zeros(r * levels, c * levels);
        let mut b = DVector::zeros(r * levels);
        for t in 0..levels {
            a.view_mut((t * r, t * c), (r, c)).copy_from(&self.matrix);
            b.rows_mut(t * r, r).copy_from(&self.rhs[t]);
        }
        (a, b)
    }
}

/// Solved conditional of the pivot given the rest of the subset.
#[derive(Clone, Debug)]
pub struct ConditionalSolution {
    pub subset: Vec<usize>,
    pub pivot: usize,
    pub pivot_cardinality: usize,
    /// Level-major: `z[t * rest_cells + r]` = Pr(pivot = t | rest = r)
    /// for the non-last levels t. May leave [0,1]; not corrected here.
    pub z: Vec<f64>,
    pub lambda_used: f64,
    /// Infinity norm of Az - b over all blocks.
    pub residual_norm: f64,
}

/// Builds the block system for `subset` around `pivot`.
///
/// `sources` must hold a joint for every (j-1)-subset of `subset`:
/// the joint without co-attribute k supplies the right-hand side rows
/// Pr(pivot | subset minus pivot,k), and the joint without the pivot
/// supplies the coefficients Pr(k | subset minus pivot,k).
pub fn build_system(
    schema: &Arc<Schema>,
    subset: &[usize],
    pivot: usize,
    sources: &BTreeMap<Vec<usize>, JointDistribution>,
) -> Result<BlockLinearSystem> {
    schema.check_subset(subset)?;
    if subset.len() < 2 {
        return Err(CipherError::invalid("cannot build a system for a single attribute"));
    }
    if !subset.contains(&pivot) {
        return Err(CipherError::invalid(format!("pivot {pivot} not in subset {subset:?}")));
    }
    let rest: Vec<usize> = subset.iter().copied().filter(|&a| a != pivot).collect();
    let rest_indexer = CellIndexer::new(&schema.subset_dims(&rest))?;
    let k1 = schema.cardinality(pivot);

    let rest_joint = sources
        .get(&rest)
        .ok_or_else(|| CipherError::invalid(format!("missing source joint over {rest:?}")))?;

    struct CoBlock {
        rows: Range<usize>,
        given_strides: Vec<usize>,
        cond_coeff: crate::tables::Conditional,
        cond_rhs: crate::tables::Conditional,
    }

    let mut co_blocks: Vec<(usize, CoBlock)> = Vec::with_capacity(rest.len());
    let mut zero_mass_fills = 0usize;
    let mut row_offset = 0usize;
    for (kp, &k) in rest.iter().enumerate() {
        let given: Vec<usize> = rest.iter().copied().filter(|&a| a != k).collect();
        let feed: Vec<usize> = subset.iter().copied().filter(|&a| a != k).collect();
        let feed_joint = sources
            .get(&feed)
            .ok_or_else(|| CipherError::invalid(format!("missing source joint over {feed:?}")))?;
        let cond_rhs = feed_joint.conditional(pivot, &given)?;
        let cond_coeff = rest_joint.conditional(k, &given)?;
        zero_mass_fills += cond_rhs.zero_fills + cond_coeff.zero_fills;
        let g_size = cond_coeff.given_indexer.size();

        // Strides mapping rest digits (minus position kp) to the
        // given-cell index of this block.
        let g_strides_raw = cond_coeff.given_indexer.strides();
        let mut given_strides = vec![0usize; rest.len()];
        let mut gj = 0;
        for (pos, stride) in given_strides.iter_mut().enumerate() {
            if pos != kp {
                *stride = g_strides_raw[gj];
                gj += 1;
            }
        }

        co_blocks.push((
            kp,
            CoBlock {
                rows: row_offset..row_offset + g_size,
                given_strides,
                cond_coeff,
                cond_rhs,
            },
        ));
        row_offset += g_size;
    }

    let rows = row_offset;
    let cols = rest_indexer.size();
    let budget = rows
        .checked_mul(cols)
        .and_then(|rc| cols.checked_mul(cols).map(|cc| rc.max(cc)));
    match budget {
        Some(b) if b <= MAX_DENSE_CELLS => {}
        _ => {
            return Err(CipherError::invalid(format!(
                "linear system for subset {subset:?} is too large ({rows} x {cols} dense); \
                 reduce the attribute domain or the query arity"
            )))
        }
    }

    let mut matrix = DMatrix::zeros(rows, cols);
    let mut digits = vec![0usize; rest.len()];
    for r in 0..cols {
        rest_indexer.decode_into(r, &mut digits);
        for (kp, block) in &co_blocks {
            let mut g = 0usize;
            for (pos, &d) in digits.iter().enumerate() {
                g += d * block.given_strides[pos];
            }
            let v = digits[*kp];
            matrix[(block.rows.start + g, r)] = block.cond_coeff.prob(v, g);
        }
    }

    let mut rhs = Vec::with_capacity(k1 - 1);
    for t in 0..k1 - 1 {
        let mut b = DVector::zeros(rows);
        for (_, block) in &co_blocks {
            for g in 0..block.rows.len() {
                b[block.rows.start + g] = block.cond_rhs.prob(t, g);
            }
        }
        rhs.push(b);
    }

    Ok(BlockLinearSystem {
        subset: subset.to_vec(),
        pivot,
        pivot_cardinality: k1,
        matrix,
        rhs,
        row_blocks: co_blocks.into_iter().map(|(kp, b)| (rest[kp], b.rows)).collect(),
        zero_mass_fills,
    })
}

/// Solves each pivot-level block by the ridge normal equations
/// (A'A + lambda I) z = A'b, sharing one factorization across blocks.
pub fn tikhonov_solve(system: &BlockLinearSystem, lambda: f64) -> Result<ConditionalSolution> {
    if lambda <= 0.0 || !lambda.is_finite() {
        return Err(CipherError::invalid(format!("lambda must be positive and finite, got {lambda}")));
    }
    let a = &system.matrix;
    if a.iter().any(|v| !v.is_finite()) || system.rhs.iter().any(|b| b.iter().any(|v| !v.is_finite())) {
        return Err(CipherError::numerical("non-finite values in linear system"));
    }
    let cols = a.ncols();
    let mut gram = a.tr_mul(a);
    for i in 0..cols {
        gram[(i, i)] += lambda;
    }
    let chol = gram
        .cholesky()
        .ok_or_else(|| CipherError::numerical("ridge normal equations are not positive definite"))?;

    let mut z = Vec::with_capacity(cols * system.rhs.len());
    let mut residual_norm = 0.0f64;
    for b in &system.rhs {
        let atb = a.tr_mul(b);
        let zt = chol.solve(&atb);
        let r = a * &zt - b;
        residual_norm = residual_norm.max(r.amax());
        z.extend(zt.iter());
    }
    Ok(ConditionalSolution {
        subset: system.subset.clone(),
        pivot: system.pivot,
        pivot_cardinality: system.pivot_cardinality,
        z,
        lambda_used: lambda,
        residual_norm,
    })
}

/// Lifts the solved conditional onto the base joint over the subset
/// minus the pivot: Pr(subset) = Pr(pivot | rest) * Pr(rest). The last
/// pivot level is completed as one minus the solved levels; negatives
/// pass through uncorrected.
pub fn lift_joint(
    solution: &ConditionalSolution,
    base: &JointDistribution,
) -> Result<JointDistribution> {
    let rest: Vec<usize> =
        solution.subset.iter().copied().filter(|&a| a != solution.pivot).collect();
    if base.subset() != rest.as_slice() {
        return Err(CipherError::invalid(format!(
            "lift base covers {:?}, expected {rest:?}",
            base.subset()
        )));
    }
    let n_rest = base.indexer().size();
    let k1 = solution.pivot_cardinality;
    if solution.z.len() != n_rest * (k1 - 1) {
        return Err(CipherError::invalid("solution length does not match the base cell space"));
    }
    let schema = base.schema().clone();
    let subset_indexer = CellIndexer::new(&schema.subset_dims(&solution.subset))?;
    let pos = solution.subset.iter().position(|&a| a == solution.pivot).unwrap();
    let low_size = subset_indexer.strides()[pos];

    let mut probs = vec![0.0; subset_indexer.size()];
    for r in 0..n_rest {
        let base_p = base.probs[r];
        let high = r / low_size;
        let low = r % low_size;
        let cell_base = high * k1 * low_size + low;
        let mut rest_mass = 0.0;
        for t in 0..k1 - 1 {
            let zt = solution.z[t * n_rest + r];
            rest_mass += zt;
            probs[cell_base + t * low_size] = zt * base_p;
        }
        probs[cell_base + (k1 - 1) * low_size] = (1.0 - rest_mass) * base_p;
    }
    JointDistribution::new(schema, solution.subset.clone(), probs)
}

/// Per-system entry in the run report.
#[derive(Clone, Debug, Serialize)]
pub struct SystemDiagnostic {
    pub subset: Vec<String>,
    pub pivot: String,
    pub equations: usize,
    pub unknowns: usize,
    pub residual_norm: f64,
    pub zero_mass_fills: usize,
}

/// What happened during one full reconstruction.
#[derive(Clone, Debug, Default, Serialize)]
pub struct ReconstructionDiagnostics {
    pub lambda: f64,
    pub systems: Vec<SystemDiagnostic>,
    /// Subsets derived by averaging more than one containing table.
    pub averaged_subsets: usize,
    /// Sanitized tables whose total was nonpositive (uniform fallback).
    pub nonpositive_totals: usize,
    /// Final negativity correction of the full joint.
    pub correction: CorrectionStats,
}

struct ReconstructionCtx<'a> {
    schema: Arc<Schema>,
    queries: Vec<Vec<usize>>,
    lambda: f64,
    policy: PivotPolicy,
    streams: &'a StreamFactory,
    replicate: u64,
}

/// Reconstructs the full joint distribution from sanitized tables.
///
/// The tables must all share one schema and jointly cover every
/// attribute. Deterministic given (tables, seed, replicate, policy).
pub fn reconstruct_full(
    tables: &[ContingencyTable],
    lambda: f64,
    policy: PivotPolicy,
    streams: &StreamFactory,
    replicate: u64,
) -> Result<(JointDistribution, ReconstructionDiagnostics)> {
    if tables.is_empty() {
        return Err(CipherError::invalid("no sanitized tables to reconstruct from"));
    }
    let schema = tables[0].schema().clone();
    if schema.len() > 64 {
        return Err(CipherError::invalid("reconstruction supports at most 64 attributes"));
    }
    for t in tables {
        if t.schema().as_ref() != schema.as_ref() {
            return Err(CipherError::invalid("sanitized tables disagree on the schema"));
        }
    }
    let subsets: Vec<Vec<usize>> = tables.iter().map(|t| t.subset().to_vec()).collect();
    let queries = QuerySet::new(&schema, subsets)?;

    let mut diags = ReconstructionDiagnostics { lambda, ..Default::default() };
    let mut memo: BTreeMap<Vec<usize>, JointDistribution> = BTreeMap::new();
    for t in tables {
        let (dist, fell_back) = t.to_distribution();
        if fell_back {
            diags.nonpositive_totals += 1;
        }
        memo.insert(t.subset().to_vec(), dist);
    }

    let ctx = ReconstructionCtx {
        schema: schema.clone(),
        queries: queries.subsets().to_vec(),
        lambda,
        policy,
        streams,
        replicate,
    };
    let full = schema.full_subset();
    ensure_joint(&ctx, &full, &mut memo, &mut diags)?;

    let mut joint = memo.remove(&full).expect("full joint was just ensured");
    diags.correction = joint.correct_and_normalize();
    Ok((joint, diags))
}

/// Makes sure `memo` holds a joint over `subset`, building it from
/// lower levels if necessary.
fn ensure_joint(
    ctx: &ReconstructionCtx<'_>,
    subset: &[usize],
    memo: &mut BTreeMap<Vec<usize>, JointDistribution>,
    diags: &mut ReconstructionDiagnostics,
) -> Result<()> {
    if memo.contains_key(subset) {
        return Ok(());
    }

    // Inside some sanitized table: marginalize each container, average.
    let containers: Vec<&Vec<usize>> = ctx
        .queries
        .iter()
        .filter(|q| q.len() > subset.len() && is_subset_of(subset, q))
        .collect();
    if !containers.is_empty() {
        let mut acc: Option<Vec<f64>> = None;
        for q in &containers {
            let marg = memo
                .get(*q)
                .expect("query tables are pre-seeded")
                .marginalize(subset)?;
            match &mut acc {
                None => acc = Some(marg.probs),
                Some(a) => {
                    for (x, y) in a.iter_mut().zip(marg.probs.iter()) {
                        *x += y;
                    }
                }
            }
        }
        let mut probs = acc.unwrap();
        let scale = 1.0 / containers.len() as f64;
        for v in probs.iter_mut() {
            *v *= scale;
        }
        if containers.len() > 1 {
            diags.averaged_subsets += 1;
        }
        memo.insert(
            subset.to_vec(),
            JointDistribution::new(ctx.schema.clone(), subset.to_vec(), probs)?,
        );
        return Ok(());
    }

    if subset.len() < 2 {
        return Err(CipherError::invalid(format!(
            "attribute subset {subset:?} is not derivable from the query set"
        )));
    }

    // Build from the level below.
    for &k in subset {
        let lower: Vec<usize> = subset.iter().copied().filter(|&a| a != k).collect();
        ensure_joint(ctx, &lower, memo, diags)?;
    }

    let pivot = match ctx.policy {
        PivotPolicy::FirstAttribute => subset[0],
        PivotPolicy::Random => {
            let mask = subset.iter().fold(0u64, |m, &a| m | 1u64 << a);
            let mut rng = ctx.streams.stream(&[tag::PIVOT, ctx.replicate, mask]);
            subset[rng.random_range(0..subset.len())]
        }
    };

    let system = build_system(&ctx.schema, subset, pivot, memo)?;
    let solution = tikhonov_solve(&system, ctx.lambda)?;
    let rest: Vec<usize> = subset.iter().copied().filter(|&a| a != pivot).collect();
    let base = memo.get(&rest).expect("rest joint was just ensured");
    let lifted = lift_joint(&solution, base)?;

    diags.systems.push(SystemDiagnostic {
        subset: ctx.schema.subset_names(subset),
        pivot: ctx.schema.attributes[pivot].name.clone(),
        equations: system.equations(),
        unknowns: system.unknowns(),
        residual_norm: solution.residual_norm,
        zero_mass_fills: system.zero_mass_fills,
    });
    memo.insert(subset.to_vec(), lifted);
    Ok(())
}

fn is_subset_of(a: &[usize], b: &[usize]) -> bool {
    a.iter().all(|x| b.contains(x))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tables::{Attribute, Dataset};
    use approx::assert_abs_diff_eq;

    fn schema(dims: &[usize]) -> Arc<Schema> {
        Arc::new(
            Schema::new(
                dims.iter()
                    .enumerate()
                    .map(|(i, &k)| Attribute::with_cardinality(format!("V{}", i + 1), k))
                    .collect(),
            )
            .unwrap(),
        )
    }

    /// Expands a full-table count vector into a dataset.
    fn dataset_from_counts(schema: &Arc<Schema>, counts: &[usize]) -> Dataset {
        let ix = CellIndexer::new(&schema.cardinalities()).unwrap();
        assert_eq!(ix.size(), counts.len());
        let mut rows = Vec::new();
        for (cell, &c) in counts.iter().enumerate() {
            let digits = ix.decode(cell);
            for _ in 0..c {
                rows.push(digits.iter().map(|&d| d as u32).collect::<Vec<u32>>());
            }
        }
        Dataset::from_rows(schema.clone(), &rows).unwrap()
    }

    fn two_way_sources(
        data: &Dataset,
        subsets: &[Vec<usize>],
    ) -> BTreeMap<Vec<usize>, JointDistribution> {
        let mut map = BTreeMap::new();
        for s in subsets {
            let (d, _) = ContingencyTable::tabulate(data, s).unwrap().to_distribution();
            map.insert(s.clone(), d);
        }
        map
    }

    fn tvd(p: &[f64], q: &[f64]) -> f64 {
        0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
    }

    #[test]
    fn system_dimensions_2x2x2() {
        let schema = schema(&[2, 2, 2]);
        let data = dataset_from_counts(&schema, &[5, 3, 2, 6, 4, 1, 7, 2]);
        let sources = two_way_sources(&data, &[vec![0, 1], vec![0, 2], vec![1, 2]]);
        let sys = build_system(&schema, &[0, 1, 2], 2, &sources).unwrap();
        assert_eq!(sys.equations(), 4);
        assert_eq!(sys.unknowns(), 4);
        assert_eq!(sys.row_blocks.len(), 2);
    }

    #[test]
    fn system_dimensions_2x3x3() {
        let schema = schema(&[2, 3, 3]);
        let counts: Vec<usize> = (1..=18).collect();
        let data = dataset_from_counts(&schema, &counts);
        let sources = two_way_sources(&data, &[vec![0, 1], vec![0, 2], vec![1, 2]]);
        let sys = build_system(&schema, &[0, 1, 2], 2, &sources).unwrap();
        assert_eq!(sys.equations(), 10);
        assert_eq!(sys.unknowns(), 12);
    }

    #[test]
    fn system_dimensions_2x2x3x3() {
        let schema = schema(&[2, 2, 3, 3]);
        let counts: Vec<usize> = (0..36).map(|i| i % 7 + 1).collect();
        let data = dataset_from_counts(&schema, &counts);
        let mut sources = BTreeMap::new();
        for s in crate::tables::k_subsets(4, 3).unwrap() {
            let (d, _) = ContingencyTable::tabulate(&data, &s).unwrap().to_distribution();
            sources.insert(s, d);
        }
        let sys = build_system(&schema, &[0, 1, 2, 3], 3, &sources).unwrap();
        assert_eq!(sys.equations(), 32);
        assert_eq!(sys.unknowns(), 24);
    }

    #[test]
    fn tikhonov_identity_cases() {
        let schema = schema(&[2, 2]);
        let _ = schema;
        let sys = BlockLinearSystem {
            subset: vec![0, 1],
            pivot: 0,
            pivot_cardinality: 2,
            matrix: DMatrix::identity(2, 2),
            rhs: vec![DVector::from_vec(vec![1.0, 0.0])],
            row_blocks: vec![(1, 0..2)],
            zero_mass_fills: 0,
        };
        let sol = tikhonov_solve(&sys, 1e-12).unwrap();
        assert_abs_diff_eq!(sol.z[0], 1.0, epsilon = 1e-9);
        assert_abs_diff_eq!(sol.z[1], 0.0, epsilon = 1e-9);

        // Identity with general lambda has the closed form b/(1+lambda).
        let sol = tikhonov_solve(&sys, 1.0).unwrap();
        assert_abs_diff_eq!(sol.z[0], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(sol.z[1], 0.0, epsilon = 1e-12);
    }

    // Minimum-norm oracle: the wide system [[1,1]] z = [1] has
    // pseudo-inverse solution (0.5, 0.5); tiny ridge must agree, and
    // both must match an independent SVD solve.
    #[test]
    fn tikhonov_matches_svd_minimum_norm() {
        let sys = BlockLinearSystem {
            subset: vec![0, 1],
            pivot: 0,
            pivot_cardinality: 2,
            matrix: DMatrix::from_row_slice(1, 2, &[1.0, 1.0]),
            rhs: vec![DVector::from_vec(vec![1.0])],
            row_blocks: vec![(1, 0..1)],
            zero_mass_fills: 0,
        };
        let sol = tikhonov_solve(&sys, 1e-10).unwrap();
        assert_abs_diff_eq!(sol.z[0], 0.5, epsilon = 1e-6);
        assert_abs_diff_eq!(sol.z[1], 0.5, epsilon = 1e-6);

        let (a, b) = sys.assembled();
        let svd = a.svd(true, true);
        let pinv = svd.solve(&b, 1e-12).unwrap();
        assert_abs_diff_eq!(sol.z[0], pinv[0], epsilon = 1e-6);
        assert_abs_diff_eq!(sol.z[1], pinv[1], epsilon = 1e-6);
    }

    // Solving blocks independently must equal solving the assembled
    // block-diagonal system.
    #[test]
    fn block_solve_equals_monolithic_solve() {
        let schema = schema(&[2, 3, 3]);
        let counts: Vec<usize> = (0..18).map(|i| (i * 5) % 11 + 1).collect();
        let data = dataset_from_counts(&schema, &counts);
        let sources = two_way_sources(&data, &[vec![0, 1], vec![0, 2], vec![1, 2]]);
        let sys = build_system(&schema, &[0, 1, 2], 2, &sources).unwrap();
        let lambda = 1e-6;
        let sol = tikhonov_solve(&sys, lambda).unwrap();

        let (a, b) = sys.assembled();
        let n = a.ncols();
        let mut gram = a.tr_mul(&a);
        for i in 0..n {
            gram[(i, i)] += lambda;
        }
        let mono = gram.cholesky().unwrap().solve(&a.tr_mul(&b));
        for i in 0..n {
            assert_abs_diff_eq!(sol.z[i], mono[i], epsilon = 1e-10);
        }
    }

    #[test]
    fn lift_propagates_negative_completion() {
        let schema = schema(&[3, 2]);
        let base = JointDistribution::new(schema.clone(), vec![1], vec![0.5, 0.5]).unwrap();
        let solution = ConditionalSolution {
            subset: vec![0, 1],
            pivot: 0,
            pivot_cardinality: 3,
            z: vec![0.7, 0.7, 0.6, 0.6],
            lambda_used: 1e-4,
            residual_norm: 0.0,
        };
        let lifted = lift_joint(&solution, &base).unwrap();
        // Third pivot level completes to 1 - 0.7 - 0.6 = -0.3.
        assert_abs_diff_eq!(lifted.probs[4], -0.3 * 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(lifted.probs.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn lift_recovers_known_joint_from_exact_conditionals() {
        let schema = schema(&[2, 2, 2]);
        let data = dataset_from_counts(&schema, &[5, 3, 2, 6, 4, 1, 7, 2]);
        let (full, _) = ContingencyTable::tabulate(&data, &[0, 1, 2]).unwrap().to_distribution();
        let (base, _) = ContingencyTable::tabulate(&data, &[1, 2]).unwrap().to_distribution();
        let cond = full.conditional(0, &[1, 2]).unwrap();
        let n_rest = 4;
        let z: Vec<f64> = (0..n_rest).map(|r| cond.prob(0, r)).collect();
        let solution = ConditionalSolution {
            subset: vec![0, 1, 2],
            pivot: 0,
            pivot_cardinality: 2,
            z,
            lambda_used: 1e-8,
            residual_norm: 0.0,
        };
        let lifted = lift_joint(&solution, &base).unwrap();
        for (a, b) in lifted.probs.iter().zip(full.probs.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    fn sanitized_two_ways(data: &Dataset) -> Vec<ContingencyTable> {
        let p = data.schema().len();
        crate::tables::k_subsets(p, 2)
            .unwrap()
            .into_iter()
            .map(|s| {
                let t = ContingencyTable::tabulate(data, &s).unwrap();
                ContingencyTable::from_values(
                    data.schema().clone(),
                    s,
                    t.values.clone(),
                    true,
                )
                .unwrap()
            })
            .collect()
    }

    // Noiseless consistency: exact two-way inputs are reproduced by the
    // reconstructed joint's marginals up to the regularization bias.
    #[test]
    fn noiseless_reconstruction_preserves_two_way_marginals() {
        for dims in [vec![2usize, 2, 2], vec![2, 3, 3]] {
            let schema = schema(&dims);
            let size: usize = dims.iter().product();
            let counts: Vec<usize> = (0..size).map(|i| (i * 7) % 13 + 2).collect();
            let data = dataset_from_counts(&schema, &counts);
            let tables = sanitized_two_ways(&data);
            let streams = StreamFactory::new(3);
            let (joint, diags) =
                reconstruct_full(&tables, 1e-8, PivotPolicy::Random, &streams, 0).unwrap();
            assert!(joint.is_proper(1e-9));
            for s in crate::tables::k_subsets(dims.len(), 2).unwrap() {
                let got = joint.marginalize(&s).unwrap();
                let (want, _) =
                    ContingencyTable::tabulate(&data, &s).unwrap().to_distribution();
                let d = tvd(&got.probs, &want.probs);
                assert!(d <= 1e-4, "dims {dims:?} subset {s:?} tvd {d}");
            }
            assert!(!diags.systems.is_empty());
        }
    }

    // The same reconstruction must hold no matter which pivot is used.
    #[test]
    fn noiseless_consistency_for_every_pivot() {
        let schema = schema(&[2, 3, 3]);
        let counts: Vec<usize> = (0..18).map(|i| (i * 3) % 9 + 1).collect();
        let data = dataset_from_counts(&schema, &counts);
        let sources = two_way_sources(&data, &[vec![0, 1], vec![0, 2], vec![1, 2]]);
        for pivot in 0..3 {
            let sys = build_system(&schema, &[0, 1, 2], pivot, &sources).unwrap();
            let sol = tikhonov_solve(&sys, 1e-8).unwrap();
            let rest: Vec<usize> = (0..3).filter(|&a| a != pivot).collect();
            let lifted = lift_joint(&sol, &sources[&rest]).unwrap();
            for s in [vec![0, 1], vec![0, 2], vec![1, 2]] {
                let got = lifted.marginalize(&s).unwrap();
                let d = tvd(&got.probs, &sources[&s].probs);
                assert!(d <= 1e-4, "pivot {pivot} subset {s:?} tvd {d}");
            }
        }
    }

    #[test]
    fn lambda_robustness_on_consistent_inputs() {
        let schema = schema(&[2, 3, 3]);
        let counts: Vec<usize> = (0..18).map(|i| (i * 5) % 17 + 1).collect();
        let data = dataset_from_counts(&schema, &counts);
        let tables = sanitized_two_ways(&data);
        let streams = StreamFactory::new(5);
        let (a, _) = reconstruct_full(&tables, 1e-4, PivotPolicy::Random, &streams, 0).unwrap();
        let (b, _) = reconstruct_full(&tables, 1e-8, PivotPolicy::Random, &streams, 0).unwrap();
        assert!(tvd(&a.probs, &b.probs) <= 1e-3);
    }

    #[test]
    fn full_table_query_set_is_used_directly() {
        let schema = schema(&[2, 2, 2]);
        let data = dataset_from_counts(&schema, &[5, 3, 2, 6, 4, 1, 7, 2]);
        let full = ContingencyTable::tabulate(&data, &[0, 1, 2]).unwrap();
        let tables = vec![ContingencyTable::from_values(
            schema.clone(),
            vec![0, 1, 2],
            full.values.clone(),
            true,
        )
        .unwrap()];
        let streams = StreamFactory::new(1);
        let (joint, diags) =
            reconstruct_full(&tables, 1e-4, PivotPolicy::Random, &streams, 0).unwrap();
        assert!(diags.systems.is_empty());
        let n = full.total();
        for (got, want) in joint.probs.iter().zip(full.values.iter()) {
            assert_abs_diff_eq!(got, &(want / n), epsilon = 1e-12);
        }
    }

    // Two tables disagreeing on a shared margin: the reconstruction
    // completes and lands between the disagreeing values.
    #[test]
    fn inconsistent_margins_are_averaged() {
        let schema = schema(&[2, 2, 2]);
        // P(V1=0) is 0.8 according to the (V1,V2) table but 0.6
        // according to the (V1,V3) table.
        let t12 = ContingencyTable::from_values(
            schema.clone(),
            vec![0, 1],
            vec![40.0, 40.0, 10.0, 10.0],
            true,
        )
        .unwrap();
        let t13 = ContingencyTable::from_values(
            schema.clone(),
            vec![0, 2],
            vec![30.0, 30.0, 20.0, 20.0],
            true,
        )
        .unwrap();
        let t23 = ContingencyTable::from_values(
            schema.clone(),
            vec![1, 2],
            vec![25.0, 25.0, 25.0, 25.0],
            true,
        )
        .unwrap();
        let streams = StreamFactory::new(9);
        let (joint, _) =
            reconstruct_full(&[t12, t13, t23], 1e-6, PivotPolicy::Random, &streams, 0).unwrap();
        let m1 = joint.marginalize(&[0]).unwrap();
        assert!(
            m1.probs[0] > 0.6 - 1e-6 && m1.probs[0] < 0.8 + 1e-6,
            "P(V1=0) = {} not between the disagreeing margins",
            m1.probs[0]
        );
    }

    #[test]
    fn reconstruction_is_deterministic() {
        let schema = schema(&[2, 3, 3]);
        let counts: Vec<usize> = (0..18).map(|i| (i * 11) % 7 + 1).collect();
        let data = dataset_from_counts(&schema, &counts);
        let tables = sanitized_two_ways(&data);
        let streams = StreamFactory::new(17);
        let (a, _) = reconstruct_full(&tables, 1e-4, PivotPolicy::Random, &streams, 3).unwrap();
        let (b, _) = reconstruct_full(&tables, 1e-4, PivotPolicy::Random, &streams, 3).unwrap();
        assert_eq!(a.probs, b.probs);
    }

    #[test]
    fn build_system_requires_all_sources() {
        let schema = schema(&[2, 2, 2]);
        let data = dataset_from_counts(&schema, &[5, 3, 2, 6, 4, 1, 7, 2]);
        let sources = two_way_sources(&data, &[vec![0, 1], vec![0, 2]]);
        assert!(build_system(&schema, &[0, 1, 2], 2, &sources).is_err());
    }
}
