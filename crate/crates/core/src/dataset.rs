use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::normalize_rows;
use crate::matrix::{norm, Matrix};
use crate::scalar::Scalar;


/// Unit-norm feature rows with dense identity labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingDataset<T> {
    pub features: Matrix<T>,
    pub labels: Vec<usize>,
    pub n_ids: usize,
    /// Original sample index of every row, when rows were filtered from a larger set.
    pub provenance: Option<Vec<usize>>,
}

impl<T: Scalar> EmbeddingDataset<T> {
    pub fn new(features: Matrix<T>, labels: Vec<usize>, n_ids: usize) -> Result<Self> {
        if labels.len() != features.rows() {
            return Err(Error::DimMismatch {
                expected: features.rows(),
                found: labels.len(),
            });
        }
        // f32 rows rounded from unit f64 vectors drift by a few ulps
        let tol = (64.0 * T::epsilon().to_f64_exact()).max(1e-6);
        for (row, r) in features.iter_rows().enumerate() {
            if (norm(r).to_f64_exact() - 1.0).abs() > tol {
                return Err(Error::NotUnitRow { row });
            }
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= n_ids) {
            return Err(Error::LabelOutOfRange {
                label,
                classes: n_ids,
            });
        }
        Ok(Self {
            features,
            labels,
            n_ids,
            provenance: None,
        })
    }

    /// Normalizes rows first and takes `n_ids` as one past the largest label.
    pub fn from_raw(features: &Matrix<T>, labels: Vec<usize>) -> Result<Self> {
        let n_ids = labels.iter().max().map_or(0, |&m| m + 1);
        Self::new(normalize_rows(features)?, labels, n_ids)
    }

    pub fn n(&self) -> usize {
        self.features.rows()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn original_index(&self, i: usize) -> usize {
        self.provenance.as_ref().map_or(i, |p| p[i])
    }

    pub fn original_indices(&self) -> Vec<usize> {
        (0..self.n()).map(|i| self.original_index(i)).collect()
    }

    pub fn class_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.n_ids];
        for &l in &self.labels {
            sizes[l] += 1;
        }
        sizes
    }

    /// Keeps the listed rows (in order), relabelling through `remap`; provenance follows.
    pub fn subset(&self, rows: &[usize], remap: &[usize], n_ids: usize) -> Self {
        let provenance = rows.iter().map(|&i| self.original_index(i)).collect();
        Self {
            features: self.features.select_rows(rows),
            labels: rows.iter().map(|&i| remap[self.labels[i]]).collect(),
            n_ids,
            provenance: Some(provenance),
        }
    }
}
