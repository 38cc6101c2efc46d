//! Tabular datasets, preprocessing and Dirichlet client partitioning.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

/// Retry budget for Dirichlet draws that leave a client empty.
pub const MAX_PARTITION_RETRIES: usize = 200;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DataError {
    #[error("row {row}, column {column:?}: {message}")]
    Ingest { row: usize, column: String, message: String },
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error("partition failed: {0}")]
    Partition(String),
}

/// Row-major feature matrix with dense integer labels. `row_ids` records
/// each row's index in the originally loaded table so partitions can be
/// audited for disjointness.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    labels: Vec<usize>,
    in_dim: usize,
    n_classes: usize,
    feature_names: Vec<String>,
    class_names: Vec<String>,
    row_ids: Vec<usize>,
}

impl Dataset {
    pub fn new(
        features: Vec<f64>,
        in_dim: usize,
        labels: Vec<usize>,
        n_classes: usize,
    ) -> Result<Dataset, DataError> {
        let row_ids = (0..labels.len()).collect();
        let feature_names = (0..in_dim).map(|i| format!("x{i}")).collect();
        let class_names = (0..n_classes).map(|c| c.to_string()).collect();
        Dataset::from_parts(features, in_dim, labels, n_classes, feature_names, class_names, row_ids)
    }

    pub fn from_parts(
        features: Vec<f64>,
        in_dim: usize,
        labels: Vec<usize>,
        n_classes: usize,
        feature_names: Vec<String>,
        class_names: Vec<String>,
        row_ids: Vec<usize>,
    ) -> Result<Dataset, DataError> {
        if in_dim == 0 {
            return Err(DataError::Invalid("dataset has no feature columns".into()));
        }
        if labels.is_empty() {
            return Err(DataError::Invalid("dataset has no rows".into()));
        }
        if features.len() != labels.len() * in_dim {
            return Err(DataError::Invalid(format!(
                "{} feature values do not fill {} rows of width {}",
                features.len(),
                labels.len(),
                in_dim
            )));
        }
        if n_classes < 2 {
            return Err(DataError::Invalid("need at least two classes".into()));
        }
        if let Some(bad) = labels.iter().find(|&&y| y >= n_classes) {
            return Err(DataError::Invalid(format!("label {bad} out of range for {n_classes} classes")));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(DataError::Invalid("features contain NaN or infinite values".into()));
        }
        if feature_names.len() != in_dim || class_names.len() != n_classes || row_ids.len() != labels.len() {
            return Err(DataError::Invalid("metadata lengths do not match the data".into()));
        }
        Ok(Dataset { features, labels, in_dim, n_classes, feature_names, class_names, row_ids })
    }

    pub fn n_rows(&self) -> usize {
        self.labels.len()
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.in_dim..(i + 1) * self.in_dim]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn row_ids(&self) -> &[usize] {
        &self.row_ids
    }

    pub fn rows(&self) -> impl Iterator<Item = (&[f64], usize)> + '_ {
        self.features.chunks_exact(self.in_dim).zip(self.labels.iter().copied())
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// Class frequencies normalized to sum to one.
    pub fn class_distribution(&self) -> Vec<f64> {
        let n = self.n_rows() as f64;
        self.class_counts().into_iter().map(|c| c as f64 / n).collect()
    }

    /// Rows at the given local indices, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset, DataError> {
        let mut features = Vec::with_capacity(indices.len() * self.in_dim);
        let mut labels = Vec::with_capacity(indices.len());
        let mut row_ids = Vec::with_capacity(indices.len());
        for &i in indices {
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
            row_ids.push(self.row_ids[i]);
        }
        Dataset::from_parts(
            features,
            self.in_dim,
            labels,
            self.n_classes,
            self.feature_names.clone(),
            self.class_names.clone(),
            row_ids,
        )
    }

    /// Same rows with every feature vector replaced by `f(row)`.
    pub fn map_features<E: From<DataError>>(
        &self,
        names: Vec<String>,
        mut f: impl FnMut(&[f64]) -> Result<Vec<f64>, E>,
    ) -> Result<Dataset, E> {
        let width = names.len();
        let mut features = Vec::with_capacity(self.n_rows() * width);
        for i in 0..self.n_rows() {
            let mapped = f(self.row(i))?;
            if mapped.len() != width {
                return Err(DataError::Invalid(format!(
                    "mapped row has width {}, expected {}",
                    mapped.len(),
                    width
                ))
                .into());
            }
            features.extend(mapped);
        }
        Ok(Dataset::from_parts(
            features,
            width,
            self.labels.clone(),
            self.n_classes,
            names,
            self.class_names.clone(),
            self.row_ids.clone(),
        )?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnKind {
    Numeric,
    Categorical,
    Label,
}

/// Turns a raw string table into a [`Dataset`]. Numeric columns are
/// standardized with population statistics over the whole table;
/// categorical columns are one-hot encoded in first-appearance order;
/// the single label column is mapped to dense ids in first-appearance order.
pub fn preprocess(
    header: &[String],
    rows: &[Vec<String>],
    schema: &BTreeMap<String, ColumnKind>,
) -> Result<Dataset, DataError> {
    if rows.is_empty() {
        return Err(DataError::Ingest { row: 0, column: String::new(), message: "file has no data rows".into() });
    }
    for name in header {
        if !schema.contains_key(name) {
            return Err(DataError::Ingest {
                row: 0,
                column: name.clone(),
                message: "column is not listed in the schema".into(),
            });
        }
    }
    for name in schema.keys() {
        if !header.contains(name) {
            return Err(DataError::Ingest {
                row: 0,
                column: name.clone(),
                message: "schema column missing from the header".into(),
            });
        }
    }
    let label_cols: Vec<usize> =
        header.iter().enumerate().filter(|(_, h)| schema[*h] == ColumnKind::Label).map(|(i, _)| i).collect();
    if label_cols.len() != 1 {
        return Err(DataError::Invalid(format!("expected exactly one label column, found {}", label_cols.len())));
    }
    let label_col = label_cols[0];

    for (r, row) in rows.iter().enumerate() {
        if row.len() != header.len() {
            return Err(DataError::Ingest {
                row: r + 1,
                column: String::new(),
                message: format!("expected {} cells, found {}", header.len(), row.len()),
            });
        }
    }

    let n = rows.len();
    let mut columns: Vec<(Vec<String>, Vec<f64>)> = Vec::new();
    for (c, name) in header.iter().enumerate() {
        match schema[name] {
            ColumnKind::Label => {}
            ColumnKind::Numeric => {
                let mut values = Vec::with_capacity(n);
                for (r, row) in rows.iter().enumerate() {
                    let cell = row[c].trim();
                    let v: f64 = cell.parse().map_err(|_| DataError::Ingest {
                        row: r + 1,
                        column: name.clone(),
                        message: format!("cannot parse {cell:?} as a number"),
                    })?;
                    if !v.is_finite() {
                        return Err(DataError::Ingest {
                            row: r + 1,
                            column: name.clone(),
                            message: "value is not finite".into(),
                        });
                    }
                    values.push(v);
                }
                let (mean, std) = crate::math::mean_std(&values);
                for v in &mut values {
                    *v = if std > 0.0 { (*v - mean) / std } else { 0.0 };
                }
                columns.push((vec![name.clone()], values));
            }
            ColumnKind::Categorical => {
                let mut categories: Vec<&str> = Vec::new();
                let mut codes = Vec::with_capacity(n);
                for row in rows {
                    let cell = row[c].trim();
                    let code = match categories.iter().position(|k| *k == cell) {
                        Some(k) => k,
                        None => {
                            categories.push(cell);
                            categories.len() - 1
                        }
                    };
                    codes.push(code);
                }
                let k = categories.len();
                let mut values = vec![0.0; n * k];
                for (r, code) in codes.into_iter().enumerate() {
                    values[r * k + code] = 1.0;
                }
                let names = categories.iter().map(|cat| format!("{name}={cat}")).collect();
                columns.push((names, values));
            }
        }
    }

    let feature_names: Vec<String> = columns.iter().flat_map(|(names, _)| names.iter().cloned()).collect();
    let in_dim = feature_names.len();
    let mut features = Vec::with_capacity(n * in_dim);
    for r in 0..n {
        for (names, values) in &columns {
            let k = names.len();
            if k == 1 {
                features.push(values[r]);
            } else {
                features.extend_from_slice(&values[r * k..(r + 1) * k]);
            }
        }
    }

    let mut class_names: Vec<String> = Vec::new();
    let mut labels = Vec::with_capacity(n);
    for row in rows {
        let cell = row[label_col].trim();
        let id = match class_names.iter().position(|k| k == cell) {
            Some(id) => id,
            None => {
                class_names.push(cell.to_string());
                class_names.len() - 1
            }
        };
        labels.push(id);
    }
    if class_names.len() < 2 {
        return Err(DataError::Invalid("label column has fewer than two distinct values".into()));
    }
    let n_classes = class_names.len();
    Dataset::from_parts(features, in_dim, labels, n_classes, feature_names, class_names, (0..n).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PartitionMode {
    Imbalanced,
    NonIid,
    BankImbalanced,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub n_clients: usize,
    pub alpha: f64,
    pub mode: PartitionMode,
    pub seed: u64,
    pub test_fraction: f64,
}

impl PartitionSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.n_clients < 2 {
            return Err(DataError::Partition("n_clients must be at least 2".into()));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(DataError::Partition(format!("alpha must be positive, got {}", self.alpha)));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(DataError::Partition(format!(
                "test_fraction must lie in (0, 1), got {}",
                self.test_fraction
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    pub client_datasets: Vec<Dataset>,
    pub test_set: Dataset,
    pub spec: PartitionSpec,
}

impl Partition {
    /// Original-table row ids per client.
    pub fn client_rows(&self) -> Vec<Vec<usize>> {
        self.client_datasets.iter().map(|d| d.row_ids().to_vec()).collect()
    }
}

/// Carves a class-balanced test set of `floor(fraction * n / n_classes)`
/// rows per class; everything else is the training pool. Both keep the
/// original row order.
pub fn split_test(data: &Dataset, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset), DataError> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(DataError::Partition(format!("test_fraction must lie in (0, 1), got {test_fraction}")));
    }
    let per_class = libm::floor(test_fraction * data.n_rows() as f64 / data.n_classes() as f64) as usize;
    if per_class == 0 {
        return Err(DataError::Partition(format!(
            "test_fraction {test_fraction} yields zero test rows per class"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut in_test = vec![false; data.n_rows()];
    for class in 0..data.n_classes() {
        let mut idx: Vec<usize> = (0..data.n_rows()).filter(|&i| data.label(i) == class).collect();
        if idx.len() < 2 || idx.len() <= per_class {
            return Err(DataError::Partition(format!(
                "class {} ({:?}) has {} rows, cannot supply {} test rows and keep training rows",
                class,
                data.class_names()[class],
                idx.len(),
                per_class
            )));
        }
        idx.shuffle(&mut rng);
        for &i in &idx[..per_class] {
            in_test[i] = true;
        }
    }
    let test: Vec<usize> = (0..data.n_rows()).filter(|&i| in_test[i]).collect();
    let pool: Vec<usize> = (0..data.n_rows()).filter(|&i| !in_test[i]).collect();
    Ok((data.subset(&pool)?, data.subset(&test)?))
}

/// Splits off the balanced test set and partitions the rest per `spec.mode`.
pub fn build_partition(data: &Dataset, spec: &PartitionSpec) -> Result<Partition, DataError> {
    spec.validate()?;
    let (pool, test_set) = split_test(data, spec.test_fraction, spec.seed)?;
    let client_datasets = match spec.mode {
        PartitionMode::Imbalanced => partition_imbalanced(&pool, spec)?,
        PartitionMode::NonIid => partition_noniid(&pool, spec)?,
        PartitionMode::BankImbalanced => partition_bank(&pool, spec)?,
    };
    Ok(Partition { client_datasets, test_set, spec: *spec })
}

/// Client sizes from one Dirichlet draw; rows sampled uniformly without
/// replacement, so class mixes follow the pool.
pub fn partition_imbalanced(pool: &Dataset, spec: &PartitionSpec) -> Result<Vec<Dataset>, DataError> {
    spec.validate()?;
    let n = pool.n_rows();
    let mut rng = partition_rng(spec, 1);
    let counts = retry(spec, "a client received no rows", || {
        let p = dirichlet(&mut rng, spec.alpha, spec.n_clients)?;
        let counts = largest_remainder(&p, n);
        Some(counts).filter(|c| c.iter().all(|&k| k > 0))
    })?;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut start = 0;
    let mut out = Vec::with_capacity(spec.n_clients);
    for k in counts {
        let mut rows = order[start..start + k].to_vec();
        rows.sort_unstable();
        start += k;
        out.push(pool.subset(&rows)?);
    }
    Ok(out)
}

/// Independent Dirichlet draw per class over the clients.
pub fn partition_noniid(pool: &Dataset, spec: &PartitionSpec) -> Result<Vec<Dataset>, DataError> {
    spec.validate()?;
    let mut rng = partition_rng(spec, 2);
    let by_class = class_indices(pool);
    let per_class_counts = retry(spec, "a client received no rows", || {
        let mut all = Vec::with_capacity(by_class.len());
        for idx in &by_class {
            let q = dirichlet(&mut rng, spec.alpha, spec.n_clients)?;
            all.push(largest_remainder(&q, idx.len()));
        }
        let nonempty = (0..spec.n_clients).all(|i| all.iter().map(|c| c[i]).sum::<usize>() > 0);
        Some(all).filter(|_| nonempty)
    })?;
    let mut client_rows: Vec<Vec<usize>> = vec![Vec::new(); spec.n_clients];
    for (idx, counts) in by_class.iter().zip(&per_class_counts) {
        let mut idx = idx.clone();
        idx.shuffle(&mut rng);
        let mut start = 0;
        for (client, &k) in counts.iter().enumerate() {
            client_rows[client].extend_from_slice(&idx[start..start + k]);
            start += k;
        }
    }
    client_rows
        .into_iter()
        .map(|mut rows| {
            rows.sort_unstable();
            pool.subset(&rows)
        })
        .collect()
}

/// Dirichlet allocation of the positive class (label 1) only, then every
/// client is padded with uniformly sampled negatives up to the common size
/// `floor(N / n_clients)`.
pub fn partition_bank(pool: &Dataset, spec: &PartitionSpec) -> Result<Vec<Dataset>, DataError> {
    spec.validate()?;
    if pool.n_classes() != 2 {
        return Err(DataError::Partition(format!(
            "bank partitioning needs binary labels, found {} classes",
            pool.n_classes()
        )));
    }
    let n = pool.n_rows();
    let size = n / spec.n_clients;
    let by_class = class_indices(pool);
    let (negatives, positives) = (&by_class[0], &by_class[1]);
    if positives.len() > negatives.len() {
        return Err(DataError::Partition("label 1 must be the minority class".into()));
    }
    if size == 0 {
        return Err(DataError::Partition("fewer rows than clients".into()));
    }
    let mut rng = partition_rng(spec, 3);
    let pos_counts = retry(spec, "a client's positive share exceeds the common client size", || {
        let q = dirichlet(&mut rng, spec.alpha, spec.n_clients)?;
        let counts = largest_remainder(&q, positives.len());
        Some(counts).filter(|c| c.iter().all(|&k| k <= size))
    })?;
    let needed: usize = pos_counts.iter().map(|&k| size - k).sum();
    if needed > negatives.len() {
        return Err(DataError::Partition(format!(
            "padding needs {} negatives, pool has {}",
            needed,
            negatives.len()
        )));
    }
    let mut pos = positives.clone();
    pos.shuffle(&mut rng);
    let mut neg = negatives.clone();
    neg.shuffle(&mut rng);
    let (mut p_start, mut n_start) = (0, 0);
    let mut out = Vec::with_capacity(spec.n_clients);
    for &k in &pos_counts {
        let pad = size - k;
        let mut rows: Vec<usize> = pos[p_start..p_start + k].to_vec();
        rows.extend_from_slice(&neg[n_start..n_start + pad]);
        p_start += k;
        n_start += pad;
        rows.sort_unstable();
        out.push(pool.subset(&rows)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistogramRow {
    pub client_id: usize,
    pub class_id: usize,
    pub count: usize,
}

/// Per-client, per-class row counts (zeros included), client-major.
pub fn class_histogram(partition: &Partition) -> Vec<HistogramRow> {
    let mut rows = Vec::new();
    for (client_id, data) in partition.client_datasets.iter().enumerate() {
        for (class_id, count) in data.class_counts().into_iter().enumerate() {
            rows.push(HistogramRow { client_id, class_id, count });
        }
    }
    rows
}

/// Integer allocation of `total` proportional to `weights` whose sum is
/// exactly `total`: floors first, then leftover units go to the largest
/// fractional parts (lowest index wins ties).
pub fn largest_remainder(weights: &[f64], total: usize) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    let quotas: Vec<f64> = weights.iter().map(|w| w / sum * total as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| libm::floor(*q) as usize).collect();
    let assigned: usize = counts.iter().sum();
    if assigned > total {
        // Only reachable through float rounding on degenerate inputs.
        let mut excess = assigned - total;
        for c in counts.iter_mut().rev() {
            let take = excess.min(*c);
            *c -= take;
            excess -= take;
        }
        return counts;
    }
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - libm::floor(quotas[a]);
        let fb = quotas[b] - libm::floor(quotas[b]);
        fb.partial_cmp(&fa).unwrap_or(core::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    for k in 0..total - assigned {
        counts[order[k % order.len()]] += 1;
    }
    counts
}

/// One draw from a symmetric Dirichlet via normalized Gamma variates.
/// Returns `None` when every variate underflows to zero.
pub fn dirichlet<R: Rng>(rng: &mut R, alpha: f64, k: usize) -> Option<Vec<f64>> {
    let gamma = Gamma::new(alpha, 1.0).ok()?;
    let mut draw: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
    let sum: f64 = draw.iter().sum();
    if !(sum > 0.0 && sum.is_finite()) {
        return None;
    }
    for v in &mut draw {
        *v /= sum;
    }
    Some(draw)
}

fn class_indices(data: &Dataset) -> Vec<Vec<usize>> {
    let mut by_class = vec![Vec::new(); data.n_classes()];
    for (i, &y) in data.labels().iter().enumerate() {
        by_class[y].push(i);
    }
    by_class
}

fn partition_rng(spec: &PartitionSpec, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(stream);
    rng
}

fn retry<T>(spec: &PartitionSpec, what: &str, mut attempt: impl FnMut() -> Option<T>) -> Result<T, DataError> {
    for _ in 0..MAX_PARTITION_RETRIES {
        if let Some(v) = attempt() {
            return Ok(v);
        }
    }
    Err(DataError::Partition(format!(
        "{what} after {MAX_PARTITION_RETRIES} Dirichlet draws (alpha={}, n_clients={})",
        spec.alpha, spec.n_clients
    )))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(v: &str) -> String {
        v.to_string()
    }

    fn schema(cols: &[(&str, ColumnKind)]) -> BTreeMap<String, ColumnKind> {
        cols.iter().map(|(n, k)| (s(n), *k)).collect()
    }

    fn toy(n_per_class: &[usize]) -> Dataset {
        let mut labels = Vec::new();
        for (c, &k) in n_per_class.iter().enumerate() {
            labels.extend(core::iter::repeat(c).take(k));
        }
        let features = (0..labels.len()).map(|i| i as f64).collect();
        Dataset::new(features, 1, labels, n_per_class.len()).unwrap()
    }

    #[test]
    fn standardizes_two_rows() {
        let header = vec![s("x"), s("y")];
        let rows = vec![vec![s("1"), s("no")], vec![s("3"), s("yes")]];
        let d = preprocess(&header, &rows, &schema(&[("x", ColumnKind::Numeric), ("y", ColumnKind::Label)])).unwrap();
        assert_eq!(d.features(), &[-1.0, 1.0]);
    }

    #[test]
    fn one_hot_and_label_order() {
        let header = vec![s("job"), s("y")];
        let rows = vec![
            vec![s("b"), s("no")],
            vec![s("a"), s("yes")],
            vec![s("c"), s("no")],
        ];
        let d = preprocess(&header, &rows, &schema(&[("job", ColumnKind::Categorical), ("y", ColumnKind::Label)]))
            .unwrap();
        assert_eq!(d.in_dim(), 3);
        assert_eq!(d.feature_names(), &[s("job=b"), s("job=a"), s("job=c")]);
        assert_eq!(d.row(1), &[0.0, 1.0, 0.0]);
        assert_eq!(d.labels(), &[0, 1, 0]);
        assert_eq!(d.n_classes(), 2);
    }

    #[test]
    fn ingestion_errors_carry_context() {
        let header = vec![s("x"), s("y")];
        let sch = schema(&[("x", ColumnKind::Numeric), ("y", ColumnKind::Label)]);
        let rows = vec![vec![s("1"), s("a")], vec![s("oops"), s("b")]];
        match preprocess(&header, &rows, &sch) {
            Err(DataError::Ingest { row, column, .. }) => {
                assert_eq!(row, 2);
                assert_eq!(column, "x");
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(preprocess(&header, &[], &sch), Err(DataError::Ingest { .. })));
        let extra = vec![s("x"), s("z"), s("y")];
        assert!(matches!(
            preprocess(&extra, &[vec![s("1"), s("2"), s("a")]], &sch),
            Err(DataError::Ingest { column, .. }) if column == "z"
        ));
    }

    #[test]
    fn balanced_test_split() {
        let d = toy(&[50, 50]);
        let (pool, test) = split_test(&d, 0.2, 3).unwrap();
        assert_eq!(test.class_counts(), vec![10, 10]);
        assert_eq!(pool.n_rows(), 80);
        assert_eq!(split_test(&d, 0.2, 3).unwrap(), (pool, test));
        assert!(matches!(split_test(&d, 0.01, 3), Err(DataError::Partition(_))));
    }

    #[test]
    fn small_class_cannot_fill_test_quota() {
        let d = toy(&[95, 5]);
        let err = split_test(&d, 0.2, 0).unwrap_err();
        assert!(matches!(err, DataError::Partition(m) if m.contains("class 1")));
    }

    #[test]
    fn largest_remainder_conserves() {
        assert_eq!(largest_remainder(&[0.5, 0.25, 0.25], 10), vec![5, 3, 2]);
        assert_eq!(largest_remainder(&[1.0, 1.0, 1.0], 10).iter().sum::<usize>(), 10);
    }

    #[test]
    fn hand_built_histogram() {
        let c0 = Dataset::new(vec![0.0; 4], 1, vec![0, 0, 0, 1], 2).unwrap();
        let c1 = Dataset::new(vec![0.0; 4], 1, vec![1, 1, 1, 1], 2).unwrap();
        let spec = PartitionSpec {
            n_clients: 2,
            alpha: 1.0,
            mode: PartitionMode::NonIid,
            seed: 0,
            test_fraction: 0.1,
        };
        let p = Partition { client_datasets: vec![c0, c1.clone()], test_set: c1, spec };
        let h = class_histogram(&p);
        let counts: Vec<(usize, usize, usize)> = h.iter().map(|r| (r.client_id, r.class_id, r.count)).collect();
        assert_eq!(counts, vec![(0, 0, 3), (0, 1, 1), (1, 0, 0), (1, 1, 4)]);
    }

    #[test]
    fn bank_rejects_multiclass() {
        let d = toy(&[30, 30, 30]);
        let spec = PartitionSpec {
            n_clients: 3,
            alpha: 0.5,
            mode: PartitionMode::BankImbalanced,
            seed: 1,
            test_fraction: 0.1,
        };
        assert!(partition_bank(&d, &spec).is_err());
    }
}
