//! LIBSVM-format datasets.
//!
//! Each line of a LIBSVM file is `label idx:val idx:val ...` with 1-based,
//! strictly increasing feature indices and an optional `# comment` tail:
//!
//! ```text
//! 2 1:0.5 3:-1 # first instance
//! 1 2:4.25
//! ```
//!
//! Indices are stored 0-based in memory. Original labels are remapped to
//! dense class ids `0..m`, assigned in ascending order of the original value.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::io::BufRead;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: malformed token `{token}`: {reason}")]
    Malformed {
        line: usize,
        token: String,
        reason: &'static str,
    },
    #[error("line {line}: feature indices must be strictly increasing ({prev} then {next})")]
    NonIncreasingIndex { line: usize, prev: u32, next: u32 },
    #[error("empty dataset")]
    Empty,
    #[error("requested dimension {requested} is below the largest feature index {max_index}")]
    DimensionTooSmall { requested: usize, max_index: usize },
    #[error("test set contains label {0} which never appears in the training set")]
    UnseenLabel(i64),
    #[error("instance {index}: {reason}")]
    Invalid { index: usize, reason: String },
}

/// Sparse feature vector with strictly increasing 0-based indices.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FeatureVector {
    indices: Vec<u32>,
    values: Vec<f64>,
}

impl FeatureVector {
    /// Builds a vector from `(index, value)` pairs, checking ordering and finiteness.
    pub fn new(entries: Vec<(u32, f64)>) -> Result<Self, String> {
        let mut indices = Vec::with_capacity(entries.len());
        let mut values = Vec::with_capacity(entries.len());
        for (idx, val) in entries {
            if let Some(&prev) = indices.last() {
                if idx <= prev {
                    return Err(format!("indices not strictly increasing ({prev} then {idx})"));
                }
            }
            if !val.is_finite() {
                return Err(format!("non-finite value at index {idx}"));
            }
            indices.push(idx);
            values.push(val);
        }
        Ok(Self { indices, values })
    }

    /// Sparse view of a dense slice; exact zeros are dropped.
    pub fn from_dense(dense: &[f64]) -> Self {
        let (indices, values) = dense
            .iter()
            .enumerate()
            .filter(|(_, v)| **v != 0.0)
            .map(|(i, v)| (i as u32, *v))
            .unzip();
        Self { indices, values }
    }

    pub fn indices(&self) -> &[u32] {
        &self.indices
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.indices
            .iter()
            .zip(&self.values)
            .map(|(&i, &v)| (i as usize, v))
    }

    /// Smallest dimension able to hold this vector.
    pub fn min_dim(&self) -> usize {
        self.indices.last().map_or(0, |&i| i as usize + 1)
    }

    /// Dot product with a dense vector whose length is at least `min_dim()`.
    #[inline]
    pub fn dot(&self, dense: &[f64]) -> f64 {
        self.iter().map(|(i, v)| v * dense[i]).sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }

    /// Writes the vector into `out` (which is zeroed first).
    pub fn write_dense(&self, out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        for (i, v) in self.iter() {
            out[i] = v;
        }
    }

    pub fn to_dense(&self, dim: usize) -> Vec<f64> {
        let mut out = vec![0.0; dim];
        self.write_dense(&mut out);
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledInstance {
    pub features: FeatureVector,
    /// Dense class id in `0..m`.
    pub label: usize,
}

/// Immutable labeled dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    instances: Vec<LabeledInstance>,
    dim: usize,
    /// `labels[c]` is the original label of dense class `c`; sorted ascending.
    labels: Vec<i64>,
}

impl Dataset {
    /// Builds a dataset from instances carrying original labels.
    ///
    /// Dense ids are assigned by ascending original label. `dim` is raised to
    /// the largest feature index when smaller.
    pub fn from_labeled(rows: Vec<(FeatureVector, i64)>, dim: usize) -> Result<Self, DataError> {
        if rows.is_empty() {
            return Err(DataError::Empty);
        }
        let labels: Vec<i64> = rows
            .iter()
            .map(|(_, l)| *l)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let mut max_dim = dim;
        let instances = rows
            .into_iter()
            .map(|(features, label)| {
                max_dim = max_dim.max(features.min_dim());
                let label = labels.binary_search(&label).expect("label collected above");
                LabeledInstance { features, label }
            })
            .collect();
        Ok(Self {
            instances,
            dim: max_dim,
            labels,
        })
    }

    /// Dense rows with original labels. Zero entries are not stored.
    pub fn from_dense(rows: &[Vec<f64>], labels: &[i64]) -> Result<Self, DataError> {
        assert_eq!(rows.len(), labels.len(), "row/label count mismatch");
        let dim = rows.iter().map(Vec::len).max().unwrap_or(0);
        let mut out = Vec::with_capacity(rows.len());
        for (index, (row, &label)) in rows.iter().zip(labels).enumerate() {
            if let Some(bad) = row.iter().find(|v| !v.is_finite()) {
                return Err(DataError::Invalid {
                    index,
                    reason: format!("non-finite feature value {bad}"),
                });
            }
            out.push((FeatureVector::from_dense(row), label));
        }
        Self::from_labeled(out, dim)
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.labels.len()
    }

    pub fn instances(&self) -> &[LabeledInstance] {
        &self.instances
    }

    pub fn instance(&self, i: usize) -> &LabeledInstance {
        &self.instances[i]
    }

    /// Original label values indexed by dense class id.
    pub fn original_labels(&self) -> &[i64] {
        &self.labels
    }

    pub fn dense_label(&self, original: i64) -> Option<usize> {
        self.labels.binary_search(&original).ok()
    }

    /// Instance counts per dense class.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for inst in &self.instances {
            counts[inst.label] += 1;
        }
        counts
    }

    /// Returns a copy with the feature dimension raised to `dim`.
    pub fn with_dim(mut self, dim: usize) -> Result<Self, DataError> {
        let max_index = self
            .instances
            .iter()
            .map(|i| i.features.min_dim())
            .max()
            .unwrap_or(0);
        if dim < max_index {
            return Err(DataError::DimensionTooSmall {
                requested: dim,
                max_index,
            });
        }
        self.dim = dim;
        Ok(self)
    }

    /// Serializes back to LIBSVM text (1-based indices, original labels).
    pub fn to_libsvm(&self) -> String {
        let mut out = String::new();
        for inst in &self.instances {
            write!(out, "{}", self.labels[inst.label]).unwrap();
            for (i, v) in inst.features.iter() {
                write!(out, " {}:{}", i + 1, v).unwrap();
            }
            out.push('\n');
        }
        out
    }
}

/// Parses LIBSVM text. Blank and comment-only lines are skipped.
pub fn parse_libsvm<R: BufRead>(reader: R) -> Result<Dataset, DataError> {
    let mut rows = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if let Some(row) = parse_line(&line, lineno + 1)? {
            rows.push(row);
        }
    }
    Dataset::from_labeled(rows, 0)
}

pub fn parse_libsvm_str(text: &str) -> Result<Dataset, DataError> {
    parse_libsvm(text.as_bytes())
}

fn parse_line(line: &str, lineno: usize) -> Result<Option<(FeatureVector, i64)>, DataError> {
    let body = match line.find('#') {
        Some(pos) => &line[..pos],
        None => line,
    };
    let mut tokens = body.split_whitespace();
    let Some(label_tok) = tokens.next() else {
        return Ok(None);
    };
    let label = parse_label(label_tok).ok_or_else(|| DataError::Malformed {
        line: lineno,
        token: label_tok.to_owned(),
        reason: "label is not an integer",
    })?;

    let mut indices = Vec::new();
    let mut values = Vec::new();
    for tok in tokens {
        let malformed = |reason| DataError::Malformed {
            line: lineno,
            token: tok.to_owned(),
            reason,
        };
        let (idx, val) = tok.split_once(':').ok_or_else(|| malformed("expected idx:val"))?;
        let idx: u32 = idx.parse().map_err(|_| malformed("bad feature index"))?;
        if idx == 0 {
            return Err(malformed("feature indices are 1-based"));
        }
        let val: f64 = val.parse().map_err(|_| malformed("bad feature value"))?;
        if !val.is_finite() {
            return Err(malformed("non-finite feature value"));
        }
        let idx = idx - 1;
        if let Some(&prev) = indices.last() {
            if idx <= prev {
                return Err(DataError::NonIncreasingIndex {
                    line: lineno,
                    prev: prev + 1,
                    next: idx + 1,
                });
            }
        }
        indices.push(idx);
        values.push(val);
    }
    Ok(Some((FeatureVector { indices, values }, label)))
}

fn parse_label(tok: &str) -> Option<i64> {
    let tok = tok.strip_prefix('+').unwrap_or(tok);
    if let Ok(v) = tok.parse::<i64>() {
        return Some(v);
    }
    // some distributed files write labels as `1.0`
    let v: f64 = tok.parse().ok()?;
    (v.is_finite() && v.fract() == 0.0 && v.abs() < 9.0e15).then_some(v as i64)
}

/// Gives train and test a common dimension and the training label map.
///
/// Test labels are re-keyed to the training set's dense ids; a test label
/// absent from training is an error.
pub fn align(train: Dataset, test: Dataset) -> Result<(Dataset, Dataset), DataError> {
    let dim = train.dim.max(test.dim);
    let mut remap = Vec::with_capacity(test.labels.len());
    for &orig in &test.labels {
        remap.push(train.dense_label(orig).ok_or(DataError::UnseenLabel(orig))?);
    }
    let Dataset { instances, .. } = test;
    let instances = instances
        .into_iter()
        .map(|mut inst| {
            inst.label = remap[inst.label];
            inst
        })
        .collect();
    let test = Dataset {
        instances,
        dim,
        labels: train.labels.clone(),
    };
    let train = Dataset { dim, ..train };
    Ok((train, test))
}
