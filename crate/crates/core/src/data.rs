//! Labeled datasets and points.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DataError {
    #[error("features have {rows} rows but labels have {labels} entries")]
    LengthMismatch { rows: usize, labels: usize },
    #[error("classification label {value} at row {row} is not -1 or +1")]
    BadLabel { row: usize, value: f64 },
    #[error("dataset is empty")]
    Empty,
    #[error("row index {index} out of range for {n} rows")]
    RowOutOfRange { index: usize, n: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    /// Labels in {-1, +1}.
    Classification,
    /// Real-valued labels.
    Regression,
}

/// A labeled point `(x, y)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Point {
    pub x: DVector<f64>,
    pub y: f64,
}

impl Point {
    pub fn new(x: Vec<f64>, y: f64) -> Self {
        Self { x: DVector::from_vec(x), y }
    }
}

/// Per-feature affine map `(x - mean) / scale` fitted on a training set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    /// Columns of the original data that were kept (zero-variance ones are dropped).
    pub kept: Vec<usize>,
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    /// Source row ids the statistics were computed from.
    pub source_rows: Vec<usize>,
}

/// `n × d` feature matrix with labels. `rows` holds the id of every row in
/// the originally loaded file, so anything derived from a dataset can say
/// which rows it saw.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: DMatrix<f64>,
    pub labels: DVector<f64>,
    pub task: Task,
    pub rows: Vec<usize>,
    pub standardization: Option<Standardization>,
    pub feature_names: Vec<String>,
}

impl Dataset {
    pub fn new(features: DMatrix<f64>, labels: DVector<f64>, task: Task) -> Result<Self, DataError> {
        if features.nrows() != labels.len() {
            return Err(DataError::LengthMismatch { rows: features.nrows(), labels: labels.len() });
        }
        if task == Task::Classification {
            if let Some((row, &value)) = labels.iter().enumerate().find(|(_, v)| **v != 1.0 && **v != -1.0) {
                return Err(DataError::BadLabel { row, value });
            }
        }
        let n = features.nrows();
        let d = features.ncols();
        Ok(Self {
            features,
            labels,
            task,
            rows: (0..n).collect(),
            standardization: None,
            feature_names: (0..d).map(|j| format!("x{j}")).collect(),
        })
    }

    pub fn classification(features: DMatrix<f64>, labels: DVector<f64>) -> Result<Self, DataError> {
        Self::new(features, labels, Task::Classification)
    }

    pub fn regression(features: DMatrix<f64>, labels: DVector<f64>) -> Result<Self, DataError> {
        Self::new(features, labels, Task::Regression)
    }

    /// Builds from row slices, mostly for tests and examples.
    pub fn from_rows(rows: &[&[f64]], labels: &[f64], task: Task) -> Result<Self, DataError> {
        let n = rows.len();
        if n == 0 {
            return Err(DataError::Empty);
        }
        let d = rows[0].len();
        let features = DMatrix::from_fn(n, d, |i, j| rows[i][j]);
        Self::new(features, DVector::from_column_slice(labels), task)
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn x(&self, i: usize) -> DVector<f64> {
        self.features.row(i).transpose()
    }

    pub fn y(&self, i: usize) -> f64 {
        self.labels[i]
    }

    pub fn point(&self, i: usize) -> Point {
        Point { x: self.x(i), y: self.y(i) }
    }

    /// Rows `idx` (positions in this dataset), keeping row ids and metadata.
    pub fn subset(&self, idx: &[usize]) -> Result<Self, DataError> {
        let n = self.len();
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(DataError::RowOutOfRange { index: bad, n });
        }
        let features = DMatrix::from_fn(idx.len(), self.dim(), |r, c| self.features[(idx[r], c)]);
        let labels = DVector::from_iterator(idx.len(), idx.iter().map(|&i| self.labels[i]));
        Ok(Self {
            features,
            labels,
            task: self.task,
            rows: idx.iter().map(|&i| self.rows[i]).collect(),
            standardization: self.standardization.clone(),
            feature_names: self.feature_names.clone(),
        })
    }

    /// Same labels and row ids, new feature matrix.
    pub fn with_features(&self, features: DMatrix<f64>) -> Self {
        assert_eq!(features.nrows(), self.len());
        let d = features.ncols();
        let names = if d == self.dim() {
            self.feature_names.clone()
        } else {
            (0..d).map(|j| format!("phi{j}")).collect()
        };
        Self { features, labels: self.labels.clone(), task: self.task, rows: self.rows.clone(), standardization: self.standardization.clone(), feature_names: names }
    }
}
