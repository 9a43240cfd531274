//! Tabular ingestion: schema-validated CSV loading, one-hot/standardized
//! encoding, the joint-group index over selected sensitive attributes, and
//! seeded splits and mini-batches.

mod encode;
mod schema;
mod table;

pub use encode::{
    encode, map_to_group, project_group, unmap_group, EncodedDataset,
};
pub use schema::{DatasetSchema, FeatureKind, FeatureSpec, SensitiveSpec};
pub use table::{load_csv, RawTable};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("schema parse error: {0}")]
    SchemaParse(#[from] serde_json::Error),

    #[error("invalid schema: {0}")]
    InvalidSchema(String),

    #[error("column '{0}' not found in CSV header")]
    MissingColumn(String),

    #[error("row {row}, column '{column}': unknown category '{value}'")]
    UnknownCategory {
        row: usize,
        column: String,
        value: String,
    },

    #[error("row {row}, column '{column}': cannot parse '{value}' as a number")]
    UnparseableNumber {
        row: usize,
        column: String,
        value: String,
    },

    #[error("continuous column '{0}' has zero variance")]
    ZeroVariance(String),

    #[error("unknown sensitive attribute '{0}'")]
    UnknownSensitive(String),

    #[error("category index {index} out of range for cardinality {cardinality}")]
    IndexOutOfRange { index: usize, cardinality: usize },

    #[error("group index {index} out of range for {cardinality} groups")]
    GroupOutOfRange { index: usize, cardinality: usize },

    #[error("need at least {min} rows to split, got {n}")]
    TooFewRows { n: usize, min: usize },

    #[error("split fractions must be positive and sum to 1, got {0:?}")]
    BadFractions([f64; 3]),

    #[error("{0} split is empty")]
    EmptySplit(&'static str),
}

/// Dense row-major matrix of encoded features.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// New matrix with the given rows, in the given order.
    pub fn gather(&self, rows: &[usize]) -> Self {
        let mut data = Vec::with_capacity(rows.len() * self.cols);
        for &r in rows {
            data.extend_from_slice(self.row(r));
        }
        Self {
            rows: rows.len(),
            cols: self.cols,
            data,
        }
    }
}

/// Train/validation/test fractions plus the shuffle seed; assignment is a
/// pure function of (n, spec).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SplitSpec {
    pub fractions: [f64; 3],
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            fractions: [0.7, 0.1, 0.2],
            seed: 0,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        let sum: f64 = self.fractions.iter().sum();
        if self.fractions.iter().any(|&f| f <= 0.0) || (sum - 1.0).abs() > 1e-9 {
            return Err(DataError::BadFractions(self.fractions));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct DataSplits {
    pub train: EncodedDataset,
    pub validation: EncodedDataset,
    pub test: EncodedDataset,
    /// Original row indices assigned to each split.
    pub train_rows: Vec<usize>,
    pub validation_rows: Vec<usize>,
    pub test_rows: Vec<usize>,
}

impl DataSplits {
    /// FNV-1a over the split assignment; identical protocol runs must agree.
    pub fn assignment_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut eat = |x: u64| {
            for byte in x.to_le_bytes() {
                h ^= byte as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        };
        for set in [&self.train_rows, &self.validation_rows, &self.test_rows] {
            eat(set.len() as u64);
            for &i in set.iter() {
                eat(i as u64);
            }
        }
        h
    }
}

/// Disjoint, covering, seed-deterministic split. Continuous columns are
/// standardized with statistics from the training rows only, applied to all
/// three splits.
pub fn split(ds: &EncodedDataset, spec: &SplitSpec) -> Result<DataSplits, DataError> {
    spec.validate()?;
    let n = ds.len();
    if n < 10 {
        return Err(DataError::TooFewRows { n, min: 10 });
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    order.shuffle(&mut rng);

    let n_train = (spec.fractions[0] * n as f64).floor() as usize;
    let n_val = (spec.fractions[1] * n as f64).floor() as usize;
    if n_train == 0 {
        return Err(DataError::EmptySplit("train"));
    }
    if n_val == 0 {
        return Err(DataError::EmptySplit("validation"));
    }
    if n_train + n_val >= n {
        return Err(DataError::EmptySplit("test"));
    }

    let train_rows = order[..n_train].to_vec();
    let validation_rows = order[n_train..n_train + n_val].to_vec();
    let test_rows = order[n_train + n_val..].to_vec();

    let mut train = ds.subset(&train_rows);
    let mut validation = ds.subset(&validation_rows);
    let mut test = ds.subset(&test_rows);

    let stats = train.continuous_stats()?;
    train.standardize(&stats);
    validation.standardize(&stats);
    test.standardize(&stats);

    Ok(DataSplits {
        train,
        validation,
        test,
        train_rows,
        validation_rows,
        test_rows,
    })
}

/// Mini-batch index slices for one epoch: an epoch-dependent shuffle of all
/// rows, chunked; the final batch may be short.
pub fn batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch_size must be >= 1");
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(
        seed ^ (epoch as u64).wrapping_mul(0x9e3779b97f4a7c15),
    );
    order.shuffle(&mut rng);
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}
