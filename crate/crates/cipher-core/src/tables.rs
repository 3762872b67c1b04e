//! Attribute schemas, categorical microdata, and contingency tables.
//!
//! Cells of a table over an attribute subset are laid out row-major in
//! the mixed-radix order induced by the schema: the subset is always
//! kept sorted by schema position and the first attribute of the subset
//! is the most significant digit.

use std::collections::BTreeSet;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{CipherError, Result};

/// One categorical attribute: a name plus its ordered level labels.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Attribute {
    pub name: String,
    pub levels: Vec<String>,
}

impl Attribute {
    pub fn new(name: impl Into<String>, levels: Vec<String>) -> Self {
        Attribute { name: name.into(), levels }
    }

    /// Attribute with levels labeled "0".."k-1".
    pub fn with_cardinality(name: impl Into<String>, k: usize) -> Self {
        Attribute {
            name: name.into(),
            levels: (0..k).map(|v| v.to_string()).collect(),
        }
    }

    pub fn cardinality(&self) -> usize {
        self.levels.len()
    }
}

/// Ordered list of attributes; the order fixes cell layouts everywhere.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schema {
    pub attributes: Vec<Attribute>,
}

impl Schema {
    pub fn new(attributes: Vec<Attribute>) -> Result<Self> {
        if attributes.is_empty() {
            return Err(CipherError::invalid("schema has no attributes"));
        }
        let mut seen = BTreeSet::new();
        for a in &attributes {
            if a.name.is_empty() {
                return Err(CipherError::invalid("attribute with empty name"));
            }
            if a.cardinality() < 2 {
                return Err(CipherError::invalid(format!(
                    "attribute '{}' has cardinality {}, need at least 2",
                    a.name,
                    a.cardinality()
                )));
            }
            if !seen.insert(a.name.clone()) {
                return Err(CipherError::invalid(format!("duplicate attribute name '{}'", a.name)));
            }
        }
        Ok(Schema { attributes })
    }

    pub fn len(&self) -> usize {
        self.attributes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.attributes.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.attributes.iter().position(|a| a.name == name)
    }

    pub fn cardinality(&self, attr: usize) -> usize {
        self.attributes[attr].cardinality()
    }

    pub fn cardinalities(&self) -> Vec<usize> {
        self.attributes.iter().map(|a| a.cardinality()).collect()
    }

    /// All attribute positions, i.e. the full subset.
    pub fn full_subset(&self) -> Vec<usize> {
        (0..self.len()).collect()
    }

    pub fn subset_dims(&self, subset: &[usize]) -> Vec<usize> {
        subset.iter().map(|&i| self.cardinality(i)).collect()
    }

    pub fn subset_names(&self, subset: &[usize]) -> Vec<String> {
        subset.iter().map(|&i| self.attributes[i].name.clone()).collect()
    }

    /// Full-domain size, guarded against overflow.
    pub fn domain_size(&self) -> Result<u128> {
        product_u128(&self.cardinalities())
    }

    /// Resolves attribute names to a sorted, duplicate-free subset.
    pub fn resolve(&self, names: &[String]) -> Result<Vec<usize>> {
        let mut subset = Vec::with_capacity(names.len());
        for name in names {
            let idx = self
                .index_of(name)
                .ok_or_else(|| CipherError::invalid(format!("unknown attribute '{name}'")))?;
            subset.push(idx);
        }
        let len_before = subset.len();
        subset.sort_unstable();
        subset.dedup();
        if subset.len() != len_before {
            return Err(CipherError::invalid(format!("duplicate attribute in subset {names:?}")));
        }
        Ok(subset)
    }

    /// Validates a subset: sorted, in range, non-empty, no duplicates.
    pub fn check_subset(&self, subset: &[usize]) -> Result<()> {
        if subset.is_empty() {
            return Err(CipherError::invalid("empty attribute subset"));
        }
        for w in subset.windows(2) {
            if w[0] >= w[1] {
                return Err(CipherError::invalid(format!(
                    "subset {subset:?} is not strictly increasing"
                )));
            }
        }
        if *subset.last().unwrap() >= self.len() {
            return Err(CipherError::invalid(format!(
                "subset {subset:?} out of range for {} attributes",
                self.len()
            )));
        }
        Ok(())
    }
}

fn product_u128(dims: &[usize]) -> Result<u128> {
    let mut acc: u128 = 1;
    for &d in dims {
        acc = acc
            .checked_mul(d as u128)
            .ok_or_else(|| CipherError::invalid("cell count overflows u128"))?;
    }
    Ok(acc)
}

/// Row-major mixed-radix indexer; position 0 is most significant.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CellIndexer {
    dims: Vec<usize>,
    strides: Vec<usize>,
    size: usize,
}

impl CellIndexer {
    pub fn new(dims: &[usize]) -> Result<Self> {
        let total = product_u128(dims)?;
        if total > usize::MAX as u128 {
            return Err(CipherError::invalid("cell count exceeds addressable size"));
        }
        let mut strides = vec![1usize; dims.len()];
        for i in (0..dims.len().saturating_sub(1)).rev() {
            strides[i] = strides[i + 1]
                .checked_mul(dims[i + 1])
                .ok_or_else(|| CipherError::invalid("cell stride overflow"))?;
        }
        Ok(CellIndexer { dims: dims.to_vec(), strides, size: total as usize })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn strides(&self) -> &[usize] {
        &self.strides
    }

    pub fn encode(&self, levels: &[usize]) -> usize {
        debug_assert_eq!(levels.len(), self.dims.len());
        let mut flat = 0;
        for (i, &v) in levels.iter().enumerate() {
            debug_assert!(v < self.dims[i]);
            flat += v * self.strides[i];
        }
        flat
    }

    pub fn decode(&self, flat: usize) -> Vec<usize> {
        let mut out = vec![0usize; self.dims.len()];
        self.decode_into(flat, &mut out);
        out
    }

    pub fn decode_into(&self, flat: usize, out: &mut [usize]) {
        debug_assert!(flat < self.size);
        debug_assert_eq!(out.len(), self.dims.len());
        let mut rem = flat;
        for (slot, &stride) in out.iter_mut().zip(&self.strides) {
            *slot = rem / stride;
            rem %= stride;
        }
    }

    /// Digit of `flat` at position `pos`.
    pub fn digit(&self, flat: usize, pos: usize) -> usize {
        flat / self.strides[pos] % self.dims[pos]
    }
}

/// Categorical microdata: one record per row, 0-based level codes.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    schema: Arc<Schema>,
    n: usize,
    codes: Vec<u32>,
}

impl Dataset {
    pub fn from_rows(schema: Arc<Schema>, rows: &[Vec<u32>]) -> Result<Self> {
        let p = schema.len();
        let mut codes = Vec::with_capacity(rows.len() * p);
        for (r, row) in rows.iter().enumerate() {
            if row.len() != p {
                return Err(CipherError::invalid(format!(
                    "record {r} has {} fields, schema has {p}",
                    row.len()
                )));
            }
            codes.extend_from_slice(row);
        }
        Dataset::from_flat(schema, rows.len(), codes)
    }

    pub fn from_flat(schema: Arc<Schema>, n: usize, codes: Vec<u32>) -> Result<Self> {
        let p = schema.len();
        if codes.len() != n * p {
            return Err(CipherError::invalid("flat code buffer has wrong length"));
        }
        for (i, &c) in codes.iter().enumerate() {
            let attr = i % p;
            if c as usize >= schema.cardinality(attr) {
                return Err(CipherError::invalid(format!(
                    "record {} has code {} for attribute '{}' (cardinality {})",
                    i / p,
                    c,
                    schema.attributes[attr].name,
                    schema.cardinality(attr)
                )));
            }
        }
        Ok(Dataset { schema, n, codes })
    }

    pub fn schema(&self) -> &Arc<Schema> {
        &self.schema
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn record(&self, i: usize) -> &[u32] {
        let p = self.schema.len();
        &self.codes[i * p..(i + 1) * p]
    }

    /// Merges attributes `a` and `b` into one product attribute.
    ///
    /// The combined attribute sits at the earlier of the two positions,
    /// is named "a/b", and codes the pair as `code_a * K_b + code_b`.
    /// Returns the coupled dataset and the map that undoes it.
    pub fn couple(&self, a: &str, b: &str) -> Result<(Dataset, CoupleMap)> {
        let pa = self
            .schema
            .index_of(a)
            .ok_or_else(|| CipherError::invalid(format!("unknown attribute '{a}'")))?;
        let pb = self
            .schema
            .index_of(b)
            .ok_or_else(|| CipherError::invalid(format!("unknown attribute '{b}'")))?;
        if pa == pb {
            return Err(CipherError::invalid("cannot couple an attribute with itself"));
        }
        let (first_pos, second_pos) = if pa < pb { (pa, pb) } else { (pb, pa) };
        let first = self.schema.attributes[first_pos].clone();
        let second = self.schema.attributes[second_pos].clone();
        let kb = second.cardinality() as u32;

        let mut levels = Vec::with_capacity(first.cardinality() * second.cardinality());
        for la in &first.levels {
            for lb in &second.levels {
                levels.push(format!("{la}/{lb}"));
            }
        }
        let coupled_attr = Attribute::new(format!("{}/{}", first.name, second.name), levels);

        let mut attributes = Vec::with_capacity(self.schema.len() - 1);
        for (i, attr) in self.schema.attributes.iter().enumerate() {
            if i == first_pos {
                attributes.push(coupled_attr.clone());
            } else if i != second_pos {
                attributes.push(attr.clone());
            }
        }
        let coupled_schema = Arc::new(Schema::new(attributes)?);

        let p = self.schema.len();
        let mut codes = Vec::with_capacity(self.n * (p - 1));
        for r in 0..self.n {
            let row = self.record(r);
            for (i, &c) in row.iter().enumerate() {
                if i == first_pos {
                    codes.push(row[first_pos] * kb + row[second_pos]);
                } else if i != second_pos {
                    codes.push(c);
                }
            }
        }
        let map = CoupleMap {
            name: coupled_attr.name.clone(),
            position: first_pos,
            first,
            first_position: first_pos,
            second,
            second_position: second_pos,
        };
        Ok((Dataset::from_flat(coupled_schema, self.n, codes)?, map))
    }

    /// Splits a coupled attribute back into its two originals.
    pub fn decouple(&self, map: &CoupleMap) -> Result<Dataset> {
        let pos = self
            .schema
            .index_of(&map.name)
            .ok_or_else(|| CipherError::invalid(format!("unknown coupled attribute '{}'", map.name)))?;
        if pos != map.position {
            return Err(CipherError::invalid(format!(
                "coupled attribute '{}' moved from position {} to {}",
                map.name, map.position, pos
            )));
        }
        let expected_k = map.first.cardinality() * map.second.cardinality();
        if self.schema.cardinality(pos) != expected_k {
            return Err(CipherError::invalid(format!(
                "coupled attribute '{}' has cardinality {}, expected {}",
                map.name,
                self.schema.cardinality(pos),
                expected_k
            )));
        }
        let kb = map.second.cardinality() as u32;

        let mut attributes: Vec<Attribute> = Vec::with_capacity(self.schema.len() + 1);
        for (i, attr) in self.schema.attributes.iter().enumerate() {
            if i == pos {
                attributes.push(map.first.clone());
            } else {
                attributes.push(attr.clone());
            }
        }
        attributes.insert(map.second_position, map.second.clone());
        let restored_schema = Arc::new(Schema::new(attributes)?);

        let p = self.schema.len();
        let mut codes = Vec::with_capacity(self.n * (p + 1));
        for r in 0..self.n {
            let row = self.record(r);
            let mut restored: Vec<u32> = Vec::with_capacity(p + 1);
            for (i, &c) in row.iter().enumerate() {
                if i == pos {
                    restored.push(row[pos] / kb);
                } else {
                    restored.push(c);
                }
            }
            restored.insert(map.second_position, row[pos] % kb);
            codes.extend_from_slice(&restored);
        }
        Dataset::from_flat(restored_schema, self.n, codes)
    }
}

/// Record of a couple operation, sufficient to undo it exactly.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CoupleMap {
    pub name: String,
    pub position: usize,
    pub first: Attribute,
    pub first_position: usize,
    pub second: Attribute,
    pub second_position: usize,
}

/// Contingency table over an attribute subset; values are counts for
/// raw tabulations and arbitrary reals once sanitized.
#[derive(Clone, Debug)]
pub struct ContingencyTable {
    schema: Arc<Schema>,
    subset: Vec<usize>,
    indexer: CellIndexer,
    pub values: Vec<f64>,
    pub sanitized: bool,
}

impl ContingencyTable {
    pub fn from_values(
        schema: Arc<Schema>,
        subset: Vec<usize>,
        values: Vec<f64>,
        sanitized: bool,
    ) -> Result<Self> {
        schema.check_subset(&subset)?;
        let indexer = CellIndexer::new(&schema.subset_dims(&subset))?;
        if values.len() != indexer.size() {
            return Err(CipherError::invalid(format!(
                "table over {subset:?} needs {} cells, got {}",
                indexer.size(),
                values.len()
            )));
        }
        Ok(ContingencyTable { schema, subset, indexer, values, sanitized })
    }

    /// Counts the records of `data` falling in each cell of `subset`.
    pub fn tabulate(data: &Dataset, subset: &[usize]) -> Result<Self> {
        let schema = data.schema().clone();
        schema.check_subset(subset)?;
        let indexer = CellIndexer::new(&schema.subset_dims(subset))?;
        let mut values = vec![0.0; indexer.size()];
        let strides = indexer.strides();
        for r in 0..data.len() {
            let row = data.record(r);
            let mut flat = 0usize;
            for (j, &attr) in subset.iter().enumerate() {
                flat += row[attr] as usize * strides[j];
            }
            values[flat] += 1.0;
        }
        Ok(ContingencyTable {
            schema,
            subset: subset.to_vec(),
            indexer,
            values,
            sanitized: false,
        })
    }

    pub fn schema(&self) -> &Arc<Schema> {
        &self.schema
    }

    pub fn subset(&self) -> &[usize] {
        &self.subset
    }

    pub fn indexer(&self) -> &CellIndexer {
        &self.indexer
    }

    pub fn names(&self) -> Vec<String> {
        self.schema.subset_names(&self.subset)
    }

    pub fn total(&self) -> f64 {
        self.values.iter().sum()
    }

    /// Sums out the attributes of `subset` not in `target`.
    pub fn marginalize(&self, target: &[usize]) -> Result<ContingencyTable> {
        let values = project_values(
            &self.schema,
            &self.subset,
            &self.indexer,
            &self.values,
            target,
        )?;
        ContingencyTable::from_values(self.schema.clone(), target.to_vec(), values, self.sanitized)
    }

    /// Normalizes to a (possibly signed) probability vector by dividing
    /// by the table total. A nonpositive total falls back to uniform.
    pub fn to_distribution(&self) -> (JointDistribution, bool) {
        let total = self.total();
        let size = self.indexer.size();
        let (probs, fell_back) = if total > 0.0 && total.is_finite() {
            (self.values.iter().map(|v| v / total).collect(), false)
        } else {
            (vec![1.0 / size as f64; size], true)
        };
        (
            JointDistribution {
                schema: self.schema.clone(),
                subset: self.subset.clone(),
                indexer: self.indexer.clone(),
                probs,
            },
            fell_back,
        )
    }
}

/// Probability vector over the cells of an attribute subset.
///
/// Intermediate products of the reconstruction may carry negative
/// entries; [`correct_and_normalize`] is the single final correction.
#[derive(Clone, Debug)]
pub struct JointDistribution {
    schema: Arc<Schema>,
    subset: Vec<usize>,
    indexer: CellIndexer,
    pub probs: Vec<f64>,
}

impl JointDistribution {
    pub fn new(schema: Arc<Schema>, subset: Vec<usize>, probs: Vec<f64>) -> Result<Self> {
        schema.check_subset(&subset)?;
        let indexer = CellIndexer::new(&schema.subset_dims(&subset))?;
        if probs.len() != indexer.size() {
            return Err(CipherError::invalid(format!(
                "distribution over {subset:?} needs {} cells, got {}",
                indexer.size(),
                probs.len()
            )));
        }
        Ok(JointDistribution { schema, subset, indexer, probs })
    }

    pub fn uniform(schema: Arc<Schema>, subset: Vec<usize>) -> Result<Self> {
        schema.check_subset(&subset)?;
        let indexer = CellIndexer::new(&schema.subset_dims(&subset))?;
        let p = 1.0 / indexer.size() as f64;
        let probs = vec![p; indexer.size()];
        Ok(JointDistribution { schema, subset, indexer, probs })
    }

    pub fn schema(&self) -> &Arc<Schema> {
        &self.schema
    }

    pub fn subset(&self) -> &[usize] {
        &self.subset
    }

    pub fn indexer(&self) -> &CellIndexer {
        &self.indexer
    }

    pub fn marginalize(&self, target: &[usize]) -> Result<JointDistribution> {
        let probs = project_values(
            &self.schema,
            &self.subset,
            &self.indexer,
            &self.probs,
            target,
        )?;
        JointDistribution::new(self.schema.clone(), target.to_vec(), probs)
    }

    /// Conditional distribution of `target` given the remaining
    /// attributes `given`, both from this subset. Cells of `given` with
    /// nonpositive mass are filled uniformly and counted.
    pub fn conditional(&self, target: usize, given: &[usize]) -> Result<Conditional> {
        if !self.subset.contains(&target) {
            return Err(CipherError::invalid(format!(
                "conditional target {target} not in subset {:?}",
                self.subset
            )));
        }
        if !given.is_empty() {
            self.schema.check_subset(given)?;
        }
        let mut union: Vec<usize> = given.to_vec();
        union.push(target);
        union.sort_unstable();
        union.dedup();
        if union.len() != given.len() + 1 {
            return Err(CipherError::invalid("conditional target overlaps the given set"));
        }
        let joint = if union == self.subset {
            self.clone()
        } else {
            self.marginalize(&union)?
        };

        let k = self.schema.cardinality(target);
        let given_indexer = CellIndexer::new(&self.schema.subset_dims(given))?;
        let g_size = given_indexer.size();
        let pos = union.iter().position(|&a| a == target).unwrap();
        let joint_strides = joint.indexer.strides();
        let target_stride = joint_strides[pos];
        // Splitting a `given` cell around the target digit: digits before
        // `pos` are the high part, digits after are the low part.
        let low_size = if pos + 1 < union.len() {
            joint_strides[pos]
        } else {
            1
        };

        let mut probs = vec![0.0; g_size * k];
        let mut zero_fills = 0usize;
        for g in 0..g_size {
            let high = g / low_size;
            let low = g % low_size;
            let base = high * target_stride * k + low;
            let mut mass = 0.0;
            for v in 0..k {
                mass += joint.probs[base + v * target_stride];
            }
            if mass > 0.0 && mass.is_finite() {
                for v in 0..k {
                    probs[g * k + v] = joint.probs[base + v * target_stride] / mass;
                }
            } else {
                zero_fills += 1;
                for v in 0..k {
                    probs[g * k + v] = 1.0 / k as f64;
                }
            }
        }
        Ok(Conditional {
            target,
            target_cardinality: k,
            given: given.to_vec(),
            given_indexer,
            probs,
            zero_fills,
        })
    }

    /// True when nonnegative and summing to one within `tol`.
    pub fn is_proper(&self, tol: f64) -> bool {
        let sum: f64 = self.probs.iter().sum();
        self.probs.iter().all(|&p| p >= -tol) && (sum - 1.0).abs() <= tol
    }

    /// Single final correction: truncate negatives to zero, renormalize.
    /// Falls back to uniform when nothing positive remains.
    pub fn correct_and_normalize(&mut self) -> CorrectionStats {
        correct_and_normalize(&mut self.probs)
    }
}

/// Conditional P(target | given) stored as `given_cell * K + level`.
#[derive(Clone, Debug)]
pub struct Conditional {
    pub target: usize,
    pub target_cardinality: usize,
    pub given: Vec<usize>,
    pub given_indexer: CellIndexer,
    pub probs: Vec<f64>,
    pub zero_fills: usize,
}

impl Conditional {
    pub fn prob(&self, level: usize, given_cell: usize) -> f64 {
        self.probs[given_cell * self.target_cardinality + level]
    }
}

/// Outcome of the final nonnegativity correction.
#[derive(Clone, Copy, Debug, Default, Serialize)]
pub struct CorrectionStats {
    /// Total negative mass removed by truncation.
    pub negative_mass: f64,
    /// Number of cells truncated to zero.
    pub truncated_cells: usize,
    /// True when everything was nonpositive and uniform was substituted.
    pub uniform_fallback: bool,
}

/// Truncates negatives to zero and rescales to sum one.
pub fn correct_and_normalize(values: &mut [f64]) -> CorrectionStats {
    let mut stats = CorrectionStats::default();
    let mut sum = 0.0;
    for v in values.iter_mut() {
        if !v.is_finite() || *v < 0.0 {
            if v.is_finite() {
                stats.negative_mass += -*v;
            }
            stats.truncated_cells += 1;
            *v = 0.0;
        } else {
            sum += *v;
        }
    }
    if sum > 0.0 {
        for v in values.iter_mut() {
            *v /= sum;
        }
    } else {
        stats.uniform_fallback = true;
        let u = 1.0 / values.len() as f64;
        for v in values.iter_mut() {
            *v = u;
        }
    }
    stats
}

/// Sums `values` over the attributes of `subset` not in `target`.
fn project_values(
    schema: &Schema,
    subset: &[usize],
    indexer: &CellIndexer,
    values: &[f64],
    target: &[usize],
) -> Result<Vec<f64>> {
    schema.check_subset(target)?;
    let mut keep_pos = Vec::with_capacity(target.len());
    for &t in target {
        match subset.iter().position(|&a| a == t) {
            Some(pos) => keep_pos.push(pos),
            None => {
                return Err(CipherError::invalid(format!(
                    "target {target:?} is not a subset of {subset:?}"
                )))
            }
        }
    }
    let target_indexer = CellIndexer::new(&schema.subset_dims(target))?;
    let target_strides = target_indexer.strides();
    let mut out = vec![0.0; target_indexer.size()];
    let mut digits = vec![0usize; subset.len()];
    for (flat, &v) in values.iter().enumerate() {
        indexer.decode_into(flat, &mut digits);
        let mut t = 0usize;
        for (j, &pos) in keep_pos.iter().enumerate() {
            t += digits[pos] * target_strides[j];
        }
        out[t] += v;
    }
    Ok(out)
}

/// Which tables to count cells for.
#[derive(Clone, Debug)]
pub enum TableSelection {
    /// The single full table.
    Full,
    /// All k-way marginal tables.
    KWay(usize),
    /// An explicit list of attribute subsets.
    Queries(Vec<Vec<usize>>),
}

/// Total number of stored cells across the selected tables.
pub fn cell_count(schema: &Schema, selection: &TableSelection) -> Result<u128> {
    let subsets: Vec<Vec<usize>> = match selection {
        TableSelection::Full => vec![schema.full_subset()],
        TableSelection::KWay(k) => k_subsets(schema.len(), *k)?,
        TableSelection::Queries(qs) => qs.clone(),
    };
    let mut total: u128 = 0;
    for s in &subsets {
        schema.check_subset(s)?;
        total = total
            .checked_add(product_u128(&schema.subset_dims(s))?)
            .ok_or_else(|| CipherError::invalid("cell count overflows u128"))?;
    }
    Ok(total)
}

/// All k-element subsets of 0..p in lexicographic order.
pub fn k_subsets(p: usize, k: usize) -> Result<Vec<Vec<usize>>> {
    if k == 0 || k > p {
        return Err(CipherError::invalid(format!("k-way subsets need 1 <= k <= p, got k={k}, p={p}")));
    }
    let mut out = Vec::new();
    let mut current: Vec<usize> = (0..k).collect();
    loop {
        out.push(current.clone());
        // Advance the rightmost digit that can still move.
        let mut i = k;
        loop {
            if i == 0 {
                return Ok(out);
            }
            i -= 1;
            if current[i] < p - (k - i) {
                current[i] += 1;
                for j in i + 1..k {
                    current[j] = current[j - 1] + 1;
                }
                break;
            }
        }
    }
}

/// Set of attribute subsets to sanitize and reconstruct from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QuerySet {
    subsets: Vec<Vec<usize>>,
}

impl QuerySet {
    /// Validates: subsets sorted and in range, no duplicate subsets,
    /// every attribute covered by at least one subset.
    pub fn new(schema: &Schema, mut subsets: Vec<Vec<usize>>) -> Result<Self> {
        if subsets.is_empty() {
            return Err(CipherError::invalid("query set is empty"));
        }
        for s in subsets.iter_mut() {
            s.sort_unstable();
            s.dedup();
            schema.check_subset(s)?;
        }
        subsets.sort();
        for w in subsets.windows(2) {
            if w[0] == w[1] {
                return Err(CipherError::invalid(format!("duplicate query subset {:?}", w[0])));
            }
        }
        let covered: BTreeSet<usize> = subsets.iter().flatten().copied().collect();
        for attr in 0..schema.len() {
            if !covered.contains(&attr) {
                return Err(CipherError::invalid(format!(
                    "attribute '{}' is not covered by any query",
                    schema.attributes[attr].name
                )));
            }
        }
        Ok(QuerySet { subsets })
    }

    pub fn all_kway(schema: &Schema, k: usize) -> Result<Self> {
        QuerySet::new(schema, k_subsets(schema.len(), k)?)
    }

    pub fn full(schema: &Schema) -> Self {
        QuerySet { subsets: vec![schema.full_subset()] }
    }

    pub fn subsets(&self) -> &[Vec<usize>] {
        &self.subsets
    }

    pub fn len(&self) -> usize {
        self.subsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subsets.is_empty()
    }

    pub fn names(&self, schema: &Schema) -> Vec<Vec<String>> {
        self.subsets.iter().map(|s| schema.subset_names(s)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn schema_2233() -> Arc<Schema> {
        Arc::new(
            Schema::new(vec![
                Attribute::with_cardinality("V1", 2),
                Attribute::with_cardinality("V2", 2),
                Attribute::with_cardinality("V3", 3),
                Attribute::with_cardinality("V4", 3),
            ])
            .unwrap(),
        )
    }

    fn small_data() -> Dataset {
        let schema = Arc::new(
            Schema::new(vec![
                Attribute::with_cardinality("A", 2),
                Attribute::with_cardinality("B", 3),
                Attribute::with_cardinality("C", 2),
            ])
            .unwrap(),
        );
        let rows: Vec<Vec<u32>> = vec![
            vec![0, 0, 0],
            vec![0, 1, 1],
            vec![0, 2, 0],
            vec![1, 0, 1],
            vec![1, 1, 1],
            vec![1, 2, 0],
            vec![1, 2, 1],
            vec![0, 0, 0],
        ];
        Dataset::from_rows(schema, &rows).unwrap()
    }

    #[test]
    fn indexer_round_trip() {
        let ix = CellIndexer::new(&[2, 3, 4]).unwrap();
        assert_eq!(ix.size(), 24);
        for flat in 0..24 {
            let digits = ix.decode(flat);
            assert_eq!(ix.encode(&digits), flat);
        }
        // First position is the most significant digit.
        assert_eq!(ix.encode(&[1, 0, 0]), 12);
        assert_eq!(ix.encode(&[0, 1, 0]), 4);
        assert_eq!(ix.encode(&[0, 0, 1]), 1);
    }

    #[test]
    fn empty_indexer_is_the_single_empty_cell() {
        let ix = CellIndexer::new(&[]).unwrap();
        assert_eq!(ix.size(), 1);
        assert_eq!(ix.encode(&[]), 0);
    }

    #[test]
    fn tabulate_counts_records() {
        let data = small_data();
        let t = ContingencyTable::tabulate(&data, &[0, 2]).unwrap();
        // Cells in row-major order over (A, C): (0,0) (0,1) (1,0) (1,1).
        assert_eq!(t.values, vec![3.0, 1.0, 1.0, 3.0]);
        assert_abs_diff_eq!(t.total(), 8.0);
    }

    #[test]
    fn marginalize_commutes_with_direct_tabulation() {
        let data = small_data();
        let full = ContingencyTable::tabulate(&data, &[0, 1, 2]).unwrap();
        for target in [vec![0], vec![1], vec![2], vec![0, 1], vec![0, 2], vec![1, 2]] {
            let via_marginal = full.marginalize(&target).unwrap();
            let direct = ContingencyTable::tabulate(&data, &target).unwrap();
            assert_eq!(via_marginal.values, direct.values, "target {target:?}");
        }
    }

    #[test]
    fn conditional_matches_hand_computation() {
        let data = small_data();
        let (dist, fell_back) = ContingencyTable::tabulate(&data, &[0, 2])
            .unwrap()
            .to_distribution();
        assert!(!fell_back);
        let c = dist.conditional(2, &[0]).unwrap();
        // P(C | A=0) = (3/4, 1/4); P(C | A=1) = (1/4, 3/4).
        assert_abs_diff_eq!(c.prob(0, 0), 0.75);
        assert_abs_diff_eq!(c.prob(1, 0), 0.25);
        assert_abs_diff_eq!(c.prob(0, 1), 0.25);
        assert_abs_diff_eq!(c.prob(1, 1), 0.75);
        assert_eq!(c.zero_fills, 0);
    }

    #[test]
    fn conditional_on_empty_given_is_the_marginal() {
        let data = small_data();
        let (dist, _) = ContingencyTable::tabulate(&data, &[0, 1]).unwrap().to_distribution();
        let c = dist.conditional(1, &[]).unwrap();
        let (marg, _) = ContingencyTable::tabulate(&data, &[1]).unwrap().to_distribution();
        for v in 0..3 {
            assert_abs_diff_eq!(c.prob(v, 0), marg.probs[v], epsilon = 1e-12);
        }
    }

    #[test]
    fn conditional_zero_mass_fills_uniform() {
        let schema = Arc::new(
            Schema::new(vec![
                Attribute::with_cardinality("A", 2),
                Attribute::with_cardinality("B", 2),
            ])
            .unwrap(),
        );
        let dist =
            JointDistribution::new(schema, vec![0, 1], vec![0.5, 0.5, 0.0, 0.0]).unwrap();
        let c = dist.conditional(1, &[0]).unwrap();
        assert_eq!(c.zero_fills, 1);
        assert_abs_diff_eq!(c.prob(0, 1), 0.5);
        assert_abs_diff_eq!(c.prob(1, 1), 0.5);
    }

    #[test]
    fn correct_and_normalize_truncates_then_scales() {
        let mut v = vec![0.5, -0.25, 0.25, 0.25];
        let stats = correct_and_normalize(&mut v);
        assert_eq!(stats.truncated_cells, 1);
        assert_abs_diff_eq!(stats.negative_mass, 0.25);
        assert!(!stats.uniform_fallback);
        assert_abs_diff_eq!(v[0], 0.5);
        assert_abs_diff_eq!(v[1], 0.0);
        assert_abs_diff_eq!(v[2], 0.25);
        assert_abs_diff_eq!(v[3], 0.25);

        let mut all_bad = vec![-1.0, -2.0];
        let stats = correct_and_normalize(&mut all_bad);
        assert!(stats.uniform_fallback);
        assert_eq!(all_bad, vec![0.5, 0.5]);
    }

    #[test]
    fn correct_and_normalize_is_idempotent() {
        let mut v = vec![0.5, -0.25, 0.25, 0.25];
        correct_and_normalize(&mut v);
        let once = v.clone();
        let stats = correct_and_normalize(&mut v);
        assert_eq!(stats.truncated_cells, 0);
        assert_eq!(v, once);
    }

    #[test]
    fn couple_then_decouple_is_identity() {
        let data = small_data();
        let (coupled, map) = data.couple("A", "C").unwrap();
        assert_eq!(coupled.schema().attributes[0].name, "A/C");
        assert_eq!(coupled.schema().cardinality(0), 4);
        assert_eq!(coupled.schema().attributes[1].name, "B");
        let restored = coupled.decouple(&map).unwrap();
        assert_eq!(restored, data);
    }

    #[test]
    fn couple_preserves_joint_counts() {
        let data = small_data();
        let before = ContingencyTable::tabulate(&data, &[0, 2]).unwrap();
        let (coupled, _) = data.couple("A", "C").unwrap();
        let after = ContingencyTable::tabulate(&coupled, &[0]).unwrap();
        // Coupled code a*2+c enumerates (A,C) cells in the same order.
        assert_eq!(before.values, after.values);
    }

    // Frozen from an independent enumeration of the pairwise products:
    // (2,2,3,3) has pairs 2*2, 2*3, 2*3, 2*3, 2*3, 3*3 = 37 cells.
    #[test]
    fn cell_count_all_two_way() {
        let schema = schema_2233();
        let n = cell_count(&schema, &TableSelection::KWay(2)).unwrap();
        assert_eq!(n, 37);
    }

    // Frozen likewise: 3-way tables of (2,2,3,3) hold 12+12+18+18 = 60
    // cells, and the full table 2*2*3*3 = 36.
    #[test]
    fn cell_count_three_way_and_full() {
        let schema = schema_2233();
        assert_eq!(cell_count(&schema, &TableSelection::KWay(3)).unwrap(), 60);
        assert_eq!(cell_count(&schema, &TableSelection::Full).unwrap(), 36);
        let qs = vec![vec![0, 1], vec![2, 3]];
        assert_eq!(cell_count(&schema, &TableSelection::Queries(qs)).unwrap(), 13);
    }

    #[test]
    fn k_subsets_enumerates_combinations() {
        assert_eq!(k_subsets(4, 2).unwrap().len(), 6);
        assert_eq!(k_subsets(4, 4).unwrap(), vec![vec![0, 1, 2, 3]]);
        assert_eq!(
            k_subsets(3, 2).unwrap(),
            vec![vec![0, 1], vec![0, 2], vec![1, 2]]
        );
        assert!(k_subsets(3, 0).is_err());
        assert!(k_subsets(3, 4).is_err());
    }

    #[test]
    fn query_set_requires_coverage_and_uniqueness() {
        let schema = schema_2233();
        assert!(QuerySet::new(&schema, vec![vec![0, 1], vec![1, 2]]).is_err());
        assert!(QuerySet::new(&schema, vec![vec![0, 1], vec![0, 1], vec![2, 3]]).is_err());
        let q = QuerySet::new(&schema, vec![vec![0, 1], vec![2, 3]]).unwrap();
        assert_eq!(q.len(), 2);
        let all2 = QuerySet::all_kway(&schema, 2).unwrap();
        assert_eq!(all2.len(), 6);
    }

    #[test]
    fn schema_validation() {
        assert!(Schema::new(vec![]).is_err());
        assert!(Schema::new(vec![Attribute::with_cardinality("A", 1)]).is_err());
        assert!(Schema::new(vec![
            Attribute::with_cardinality("A", 2),
            Attribute::with_cardinality("A", 2),
        ])
        .is_err());
        let s = schema_2233();
        assert_eq!(s.domain_size().unwrap(), 36);
        assert!(s.resolve(&["V1".into(), "V1".into()]).is_err());
        assert_eq!(s.resolve(&["V3".into(), "V1".into()]).unwrap(), vec![0, 2]);
    }

    #[test]
    fn dataset_rejects_out_of_range_codes() {
        let schema = Arc::new(
            Schema::new(vec![
                Attribute::with_cardinality("A", 2),
                Attribute::with_cardinality("B", 2),
            ])
            .unwrap(),
        );
        assert!(Dataset::from_rows(schema.clone(), &[vec![0, 2]]).is_err());
        assert!(Dataset::from_rows(schema, &[vec![0]]).is_err());
    }
}
