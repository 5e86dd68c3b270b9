//! Dataset representations, CSV ingestion and split bookkeeping.
//!
//! Everything downstream assumes the invariants enforced here: finite
//! features, binary labels, aligned lengths and unique sample ids.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Header name that marks the sample-id column in a dataset CSV.
pub const SAMPLE_ID_COLUMN: &str = "sample_id";
/// Header name used for the label column when writing a dataset.
pub const LABEL_COLUMN: &str = "label";

/// Dense row-major `rows × cols` matrix of finite reals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
    feature_names: Option<Vec<String>>,
}

impl FeatureMatrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidData(format!(
                "matrix must be at least 1x1, got {rows}x{cols}"
            )));
        }
        if values.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                expected: rows * cols,
                actual: values.len(),
            });
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                row: pos / cols,
                column: pos % cols,
            });
        }
        Ok(Self {
            rows,
            cols,
            values,
            feature_names: None,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut values = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(Error::DimensionMismatch {
                    expected: cols,
                    actual: row.len(),
                });
            }
            values.extend_from_slice(row);
        }
        Self::new(rows.len(), cols, values)
    }

    pub fn with_feature_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.cols {
            return Err(Error::DimensionMismatch {
                expected: self.cols,
                actual: names.len(),
            });
        }
        self.feature_names = Some(names);
        Ok(self)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn feature_names(&self) -> Option<&[String]> {
        self.feature_names.as_deref()
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols + j]
    }

    pub fn iter_rows(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.values.chunks_exact(self.cols)
    }

    /// Copies the given rows, in the order given.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::EmptySelection);
        }
        let mut values = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            if i >= self.rows {
                return Err(Error::IndexOutOfRange {
                    index: i,
                    len: self.rows,
                });
            }
            values.extend_from_slice(self.row(i));
        }
        Ok(Self {
            rows: indices.len(),
            cols: self.cols,
            values,
            feature_names: self.feature_names.clone(),
        })
    }

    /// Column names, falling back to `x0, x1, ...`.
    pub fn column_names(&self) -> Vec<String> {
        match &self.feature_names {
            Some(names) => names.clone(),
            None => (0..self.cols).map(|j| format!("x{j}")).collect(),
        }
    }
}

/// Binary labels, 1 being the positive class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<u8>", into = "Vec<u8>")]
pub struct LabelVector(Vec<u8>);

impl LabelVector {
    pub fn new(labels: Vec<u8>) -> Result<Self> {
        if let Some(pos) = labels.iter().position(|&y| y > 1) {
            return Err(Error::NonBinaryLabel {
                row: pos,
                value: labels[pos].to_string(),
            });
        }
        Ok(Self(labels))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.0
    }

    #[inline]
    pub fn value(&self, i: usize) -> f64 {
        f64::from(self.0[i])
    }

    /// `(count of 0, count of 1)`.
    pub fn class_counts(&self) -> (usize, usize) {
        let positives = self.0.iter().filter(|&&y| y == 1).count();
        (self.0.len() - positives, positives)
    }

    pub fn has_both_classes(&self) -> bool {
        let (neg, pos) = self.class_counts();
        neg > 0 && pos > 0
    }

    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        indices
            .iter()
            .map(|&i| {
                self.0.get(i).copied().ok_or(Error::IndexOutOfRange {
                    index: i,
                    len: self.0.len(),
                })
            })
            .collect::<Result<Vec<_>>>()
            .map(Self)
    }

    /// `y → 1 − y`.
    pub fn flipped(&self) -> Self {
        Self(self.0.iter().map(|&y| 1 - y).collect())
    }
}

impl TryFrom<Vec<u8>> for LabelVector {
    type Error = Error;

    fn try_from(v: Vec<u8>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<LabelVector> for Vec<u8> {
    fn from(v: LabelVector) -> Self {
        v.0
    }
}

/// Features, labels and stable sample ids, row-aligned.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub features: FeatureMatrix,
    pub labels: LabelVector,
    pub sample_ids: Vec<String>,
}

impl LabeledDataset {
    pub fn new(
        features: FeatureMatrix,
        labels: LabelVector,
        sample_ids: Vec<String>,
    ) -> Result<Self> {
        if labels.len() != features.rows() {
            return Err(Error::DimensionMismatch {
                expected: features.rows(),
                actual: labels.len(),
            });
        }
        if sample_ids.len() != features.rows() {
            return Err(Error::DimensionMismatch {
                expected: features.rows(),
                actual: sample_ids.len(),
            });
        }
        let mut seen = HashSet::with_capacity(sample_ids.len());
        if let Some(dup) = sample_ids.iter().find(|id| !seen.insert(id.as_str())) {
            return Err(Error::InvalidData(format!("duplicate sample id {dup:?}")));
        }
        Ok(Self {
            features,
            labels,
            sample_ids,
        })
    }

    /// Dataset whose sample ids are the row numbers.
    pub fn with_row_ids(features: FeatureMatrix, labels: LabelVector) -> Result<Self> {
        let ids = (0..features.rows()).map(|i| i.to_string()).collect();
        Self::new(features, labels, ids)
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    /// Rows at `indices`, taken as a set and returned in ascending order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::EmptySelection);
        }
        let mut sorted = indices.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        if let Some(&last) = sorted.last() {
            if last >= self.len() {
                return Err(Error::IndexOutOfRange {
                    index: last,
                    len: self.len(),
                });
            }
        }
        Ok(Self {
            features: self.features.select_rows(&sorted)?,
            labels: self.labels.select(&sorted)?,
            sample_ids: sorted.iter().map(|&i| self.sample_ids[i].clone()).collect(),
        })
    }
}

/// Disjoint, non-empty train/test index sets over one dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
}

impl SplitSpec {
    /// Validates against a dataset of `n` rows; indices are stored sorted.
    pub fn new(mut train: Vec<usize>, mut test: Vec<usize>, n: usize) -> Result<Self> {
        if train.is_empty() || test.is_empty() {
            return Err(Error::EmptySelection);
        }
        train.sort_unstable();
        train.dedup();
        test.sort_unstable();
        test.dedup();
        for &i in train.iter().chain(&test) {
            if i >= n {
                return Err(Error::IndexOutOfRange { index: i, len: n });
            }
        }
        let train_set: HashSet<usize> = train.iter().copied().collect();
        if let Some(&i) = test.iter().find(|i| train_set.contains(i)) {
            return Err(Error::InvalidData(format!(
                "index {i} appears in both train and test"
            )));
        }
        Ok(Self {
            train_indices: train,
            test_indices: test,
        })
    }
}

/// Label column reference: a header name or a zero-based field index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ColumnRef {
    Index(usize),
    Name(String),
}

impl FromStr for ColumnRef {
    type Err = std::convert::Infallible;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Ok(match s.parse::<usize>() {
            Ok(i) => ColumnRef::Index(i),
            Err(_) => ColumnRef::Name(s.to_string()),
        })
    }
}

impl fmt::Display for ColumnRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ColumnRef::Index(i) => write!(f, "#{i}"),
            ColumnRef::Name(n) => write!(f, "{n:?}"),
        }
    }
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Csv {
            path: path.to_path_buf(),
            message: format!("{other:?}"),
        },
    }
}

fn parse_label(field: &str, line: usize) -> Result<u8> {
    let bad = || Error::NonBinaryLabel {
        row: line,
        value: field.to_string(),
    };
    let v: f64 = field.parse().map_err(|_| bad())?;
    if v == 0.0 {
        Ok(0)
    } else if v == 1.0 {
        Ok(1)
    } else {
        Err(bad())
    }
}

/// Reads a comma-separated dataset.
///
/// When a header is present, a column named `sample_id` is taken as the
/// sample ids; otherwise ids are row numbers. Every other non-label column
/// is a feature.
pub fn load_csv(
    path: impl AsRef<Path>,
    label_column: &ColumnRef,
    has_header: bool,
) -> Result<LabeledDataset> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(has_header)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;

    let header: Option<Vec<String>> = if has_header {
        let h = reader.headers().map_err(|e| csv_error(path, e))?;
        Some(h.iter().map(str::to_string).collect())
    } else {
        None
    };

    let mut records = reader.records().peekable();
    let width = match (&header, records.peek()) {
        (Some(h), _) => h.len(),
        (None, Some(Ok(r))) => r.len(),
        (None, Some(Err(_))) | (None, None) => 0,
    };

    let label_idx = match label_column {
        ColumnRef::Index(i) if *i < width => *i,
        ColumnRef::Index(_) => return Err(Error::MissingLabelColumn(label_column.to_string())),
        ColumnRef::Name(name) => header
            .as_ref()
            .and_then(|h| h.iter().position(|c| c == name))
            .ok_or_else(|| Error::MissingLabelColumn(label_column.to_string()))?,
    };
    let id_idx = header
        .as_ref()
        .and_then(|h| h.iter().position(|c| c == SAMPLE_ID_COLUMN))
        .filter(|&i| i != label_idx);

    let feature_cols: Vec<usize> = (0..width)
        .filter(|&j| j != label_idx && Some(j) != id_idx)
        .collect();
    if feature_cols.is_empty() {
        return Err(Error::InvalidData("no feature columns".into()));
    }

    let mut values = Vec::new();
    let mut labels = Vec::new();
    let mut ids = Vec::new();
    for record in records {
        let record = record.map_err(|e| csv_error(path, e))?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        for &j in &feature_cols {
            let field = &record[j];
            let v: f64 = field.parse().map_err(|_| Error::Parse {
                row: line,
                column: j,
                value: field.to_string(),
            })?;
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    row: line,
                    column: j,
                });
            }
            values.push(v);
        }
        labels.push(parse_label(&record[label_idx], line)?);
        ids.push(match id_idx {
            Some(j) => record[j].to_string(),
            None => ids.len().to_string(),
        });
    }
    if labels.is_empty() {
        return Err(Error::InvalidData(format!(
            "{} has no data rows",
            path.display()
        )));
    }

    let mut features = FeatureMatrix::new(labels.len(), feature_cols.len(), values)?;
    if let Some(h) = &header {
        features =
            features.with_feature_names(feature_cols.iter().map(|&j| h[j].clone()).collect())?;
    }
    LabeledDataset::new(features, LabelVector::new(labels)?, ids)
}

/// 17 significant digits; parses back to the identical `f64`.
pub(crate) fn format_real(v: f64) -> String {
    format!("{v:.16e}")
}

/// Writes `sample_id, <features...>, label` with a header row.
pub fn save_csv(dataset: &LabeledDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if dataset.is_empty() {
        return Err(Error::EmptySelection);
    }
    let mut writer = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut header = vec![SAMPLE_ID_COLUMN.to_string()];
    header.extend(dataset.features.column_names());
    header.push(LABEL_COLUMN.to_string());
    writer
        .write_record(&header)
        .map_err(|e| csv_error(path, e))?;

    let mut record = Vec::with_capacity(header.len());
    for (i, row) in dataset.features.iter_rows().enumerate() {
        record.clear();
        record.push(dataset.sample_ids[i].clone());
        record.extend(row.iter().map(|&v| format_real(v)));
        record.push(dataset.labels.as_slice()[i].to_string());
        writer
            .write_record(&record)
            .map_err(|e| csv_error(path, e))?;
    }
    writer.flush().map_err(|e| Error::io(path, e))
}
