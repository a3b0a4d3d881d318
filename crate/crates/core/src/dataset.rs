//! Labeled datasets, CSV loading, synthetic Gaussian blobs and stratified
//! train/validation/test splits.

use std::collections::HashMap;
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("failed to read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("parse error at row {row}: {message}")]
    Parse { row: usize, message: String },
    #[error("file contains no data rows")]
    Empty,
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error("split fractions must be positive and sum to 1, got {0:?}")]
    BadFractions((f64, f64, f64)),
    #[error("split produced an empty {0} subset")]
    EmptySubset(&'static str),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    features: Array2<f64>,
    labels: Vec<usize>,
    class_count: usize,
}

impl LabeledDataset {
    pub fn new(features: Array2<f64>, labels: Vec<usize>, class_count: usize) -> Result<Self, DataError> {
        if labels.is_empty() {
            return Err(DataError::Invalid("dataset has no rows".into()));
        }
        if features.nrows() != labels.len() {
            return Err(DataError::Invalid(format!(
                "{} feature rows vs {} labels",
                features.nrows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(DataError::Invalid(format!("label {bad} >= class count {class_count}")));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(DataError::Invalid("non-finite feature value".into()));
        }
        Ok(Self { features, labels, class_count })
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }
    pub fn labels(&self) -> &[usize] {
        &self.labels
    }
    pub fn class_count(&self) -> usize {
        self.class_count
    }
    pub fn len(&self) -> usize {
        self.labels.len()
    }
    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }

    /// Rows at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self, DataError> {
        let features = self.features.select(Axis(0), indices);
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Self::new(features, labels, self.class_count)
    }
}

fn parse_row(record: &csv::StringRecord) -> Option<Vec<f64>> {
    record.iter().map(|cell| cell.trim().parse::<f64>().ok()).collect()
}

/// Reads a comma-separated file. A first row that does not parse as numbers is
/// treated as a header. Labels are remapped to `0..C` in order of first
/// appearance.
pub fn load_csv(path: impl AsRef<Path>, label_column: usize) -> Result<LabeledDataset, DataError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|source| DataError::Io { path: path.display().to_string(), source })?;
    parse_csv(&text, label_column)
}

pub fn parse_csv(text: &str, label_column: usize) -> Result<LabeledDataset, DataError> {
    let mut reader = csv::ReaderBuilder::new().has_headers(false).flexible(true).from_reader(text.as_bytes());
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut raw_labels: Vec<i64> = Vec::new();
    let mut arity = None;
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| DataError::Parse { row, message: e.to_string() })?;
        if record.iter().all(|c| c.trim().is_empty()) {
            continue;
        }
        let parsed = parse_row(&record);
        if i == 0 && parsed.is_none() {
            continue;
        }
        let values = parsed.ok_or_else(|| DataError::Parse { row, message: "non-numeric cell".into() })?;
        match arity {
            None => arity = Some(values.len()),
            Some(a) if a != values.len() => {
                return Err(DataError::Parse { row, message: format!("expected {a} columns, found {}", values.len()) })
            }
            _ => {}
        }
        if label_column >= values.len() {
            return Err(DataError::Parse { row, message: format!("no label column {label_column}") });
        }
        let label = values[label_column];
        if label.fract() != 0.0 {
            return Err(DataError::Parse { row, message: format!("label {label} is not an integer") });
        }
        raw_labels.push(label as i64);
        rows.push(values.iter().enumerate().filter(|&(c, _)| c != label_column).map(|(_, &v)| v).collect());
    }
    if rows.is_empty() {
        return Err(DataError::Empty);
    }
    let mut remap: HashMap<i64, usize> = HashMap::new();
    let labels: Vec<usize> = raw_labels
        .iter()
        .map(|l| {
            let next = remap.len();
            *remap.entry(*l).or_insert(next)
        })
        .collect();
    let dim = rows[0].len();
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    let features = Array2::from_shape_vec((labels.len(), dim), flat).map_err(|e| DataError::Invalid(e.to_string()))?;
    LabeledDataset::new(features, labels, remap.len())
}

/// Gaussian blobs around the scaled standard-simplex vertices `e_k` in `R^dim`.
/// Requires `dim >= classes`.
pub fn synth_blobs<R: Rng + ?Sized>(
    classes: usize,
    per_class: usize,
    dim: usize,
    spread: f64,
    rng: &mut R,
) -> Result<LabeledDataset, DataError> {
    if classes < 2 || per_class < 1 || !(spread > 0.0) || dim < classes {
        return Err(DataError::Invalid(format!(
            "blobs need classes >= 2, per_class >= 1, spread > 0, dim >= classes (got {classes}, {per_class}, {spread}, {dim})"
        )));
    }
    let n = classes * per_class;
    let mut features = Array2::zeros((n, dim));
    let mut labels = Vec::with_capacity(n);
    for (row, mut x) in features.axis_iter_mut(Axis(0)).enumerate() {
        let class = row / per_class;
        for (d, v) in x.iter_mut().enumerate() {
            let noise: f64 = StandardNormal.sample(rng);
            *v = if d == class { 1.0 } else { 0.0 } + spread * noise;
        }
        labels.push(class);
    }
    LabeledDataset::new(features, labels, classes)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataSplit {
    pub train: LabeledDataset,
    pub val: LabeledDataset,
    pub test: LabeledDataset,
    /// Source-row indices of each part.
    pub indices: [Vec<usize>; 3],
}

fn largest_remainder(total: usize, fractions: [f64; 3]) -> [usize; 3] {
    let quotas: Vec<f64> = fractions.iter().map(|f| f * total as f64).collect();
    let mut counts = [0usize; 3];
    for i in 0..3 {
        counts[i] = quotas[i].floor() as usize;
    }
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| (quotas[b] - quotas[b].floor()).total_cmp(&(quotas[a] - quotas[a].floor())).then(a.cmp(&b)));
    let mut left = total - counts.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    counts
}

/// Stratified split. Each class is shuffled and divided by the largest
/// remainder method; parts keep source-row order.
pub fn split<R: Rng + ?Sized>(
    data: &LabeledDataset,
    fractions: (f64, f64, f64),
    rng: &mut R,
) -> Result<DataSplit, DataError> {
    let f = [fractions.0, fractions.1, fractions.2];
    if f.iter().any(|v| !(*v > 0.0)) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(DataError::BadFractions(fractions));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); data.class_count()];
    for (i, &l) in data.labels().iter().enumerate() {
        by_class[l].push(i);
    }
    let mut parts: [Vec<usize>; 3] = Default::default();
    for mut members in by_class {
        members.shuffle(rng);
        let counts = largest_remainder(members.len(), f);
        let mut start = 0;
        for (part, &count) in parts.iter_mut().zip(counts.iter()) {
            part.extend_from_slice(&members[start..start + count]);
            start += count;
        }
    }
    for (part, name) in parts.iter_mut().zip(["train", "validation", "test"]) {
        if part.is_empty() {
            return Err(DataError::EmptySubset(name));
        }
        part.sort_unstable();
    }
    Ok(DataSplit {
        train: data.subset(&parts[0])?,
        val: data.subset(&parts[1])?,
        test: data.subset(&parts[2])?,
        indices: parts,
    })
}

impl DataSplit {
    /// Standardizes every column with mean and deviation measured on the
    /// training part. Constant columns are centred only.
    pub fn standardized(mut self) -> Self {
        let x = self.train.features();
        let mean = x.mean_axis(Axis(0)).expect("train is non-empty");
        let std: Array1<f64> = x
            .var_axis(Axis(0), 0.0)
            .mapv(|v| if v > 1e-24 { v.sqrt() } else { 1.0 });
        for part in [&mut self.train, &mut self.val, &mut self.test] {
            part.features = (&part.features - &mean) / &std;
        }
        self
    }

    pub fn feature_dim(&self) -> usize {
        self.train.feature_dim()
    }

    pub fn class_count(&self) -> usize {
        self.train.class_count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use proptest::prelude::*;

    #[test]
    fn labels_are_remapped_in_first_appearance_order() {
        let d = parse_csv("1.0,2.0,5\n3.0,4.0,5\n5.0,6.0,7\n", 2).unwrap();
        assert_eq!(d.labels(), &[0, 0, 1]);
        assert_eq!(d.class_count(), 2);
        assert_eq!(d.feature_dim(), 2);
        assert_eq!(d.features()[[2, 1]], 6.0);
    }

    #[test]
    fn header_row_is_skipped_and_label_column_can_be_first() {
        let d = parse_csv("label,a,b\n9,1,2\n4,3,4\n", 0).unwrap();
        assert_eq!(d.labels(), &[0, 1]);
        assert_eq!(d.features().row(1).to_vec(), vec![3.0, 4.0]);
    }

    #[test]
    fn malformed_row_names_the_row() {
        let err = parse_csv("a,b,label\n1,2,0\n1,x,1\n", 2).unwrap_err();
        match err {
            DataError::Parse { row, .. } => assert_eq!(row, 3),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(parse_csv("1,2,0\n1,2\n", 2), Err(DataError::Parse { row: 2, .. })));
    }

    #[test]
    fn empty_file_is_an_error() {
        assert!(matches!(parse_csv("", 0), Err(DataError::Empty)));
        assert!(matches!(parse_csv("a,b\n", 0), Err(DataError::Empty)));
    }

    #[test]
    fn digits_corpus_shape() {
        let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../data/digits.csv");
        let d = load_csv(path, 64).unwrap();
        assert_eq!(d.feature_dim(), 64);
        assert_eq!(d.class_count(), 10);
        assert_eq!(d.len(), 1797);
    }

    #[test]
    fn blobs_are_balanced_and_deterministic() {
        let a = synth_blobs(3, 10, 4, 0.5, &mut seeded(1)).unwrap();
        assert_eq!(a.len(), 30);
        for c in 0..3 {
            assert_eq!(a.labels().iter().filter(|&&l| l == c).count(), 10);
        }
        assert_eq!(a, synth_blobs(3, 10, 4, 0.5, &mut seeded(1)).unwrap());
        assert_ne!(a, synth_blobs(3, 10, 4, 0.5, &mut seeded(2)).unwrap());
    }

    #[test]
    fn tight_blobs_are_linearly_separable() {
        // Oracle: nearest-centroid rule is linear; it must classify tight blobs perfectly.
        let d = synth_blobs(2, 50, 2, 0.01, &mut seeded(4)).unwrap();
        let correct = d
            .features()
            .axis_iter(Axis(0))
            .zip(d.labels())
            .filter(|(x, &l)| (if x[0] > x[1] { 0 } else { 1 }) == l)
            .count();
        assert!(correct as f64 / d.len() as f64 >= 0.99);
    }

    #[test]
    fn split_sizes_and_stratification() {
        let d = synth_blobs(2, 50, 2, 0.3, &mut seeded(3)).unwrap();
        let s = split(&d, (0.6, 0.2, 0.2), &mut seeded(8)).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (60, 20, 20));
        for part in [&s.train, &s.val, &s.test] {
            let ones = part.labels().iter().filter(|&&l| l == 1).count() as i64;
            assert!((2 * ones - part.len() as i64).abs() <= 2);
        }
    }

    #[test]
    fn split_rejects_bad_fractions() {
        let d = synth_blobs(2, 5, 2, 0.3, &mut seeded(3)).unwrap();
        assert!(matches!(split(&d, (0.5, 0.5, 0.5), &mut seeded(0)), Err(DataError::BadFractions(_))));
        assert!(matches!(split(&d, (1.0, 0.0, 0.0), &mut seeded(0)), Err(DataError::BadFractions(_))));
        let tiny = synth_blobs(2, 1, 2, 0.3, &mut seeded(3)).unwrap();
        assert!(matches!(split(&tiny, (0.8, 0.1, 0.1), &mut seeded(0)), Err(DataError::EmptySubset(_))));
    }

    #[test]
    fn standardization_uses_training_statistics() {
        let d = synth_blobs(2, 40, 3, 0.7, &mut seeded(5)).unwrap();
        let s = split(&d, (0.5, 0.25, 0.25), &mut seeded(6)).unwrap().standardized();
        let mean = s.train.features().mean_axis(Axis(0)).unwrap();
        let var = s.train.features().var_axis(Axis(0), 0.0);
        for j in 0..3 {
            assert!(mean[j].abs() < 1e-12);
            assert!((var[j] - 1.0).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn split_is_a_deterministic_partition(n in 2usize..40, classes in 2usize..4, seed in any::<u64>()) {
            let d = synth_blobs(classes, n, 4, 1.0, &mut seeded(seed)).unwrap();
            let fr = (0.5, 0.25, 0.25);
            match split(&d, fr, &mut seeded(seed ^ 1)) {
                Ok(s) => {
                    let again = split(&d, fr, &mut seeded(seed ^ 1)).unwrap();
                    prop_assert_eq!(&s.indices, &again.indices);
                    let mut all: Vec<usize> = s.indices.iter().flatten().copied().collect();
                    all.sort_unstable();
                    prop_assert_eq!(all, (0..d.len()).collect::<Vec<_>>());
                }
                Err(e) => prop_assert!(matches!(e, DataError::EmptySubset(_))),
            }
        }
    }
}
