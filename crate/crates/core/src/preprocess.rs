//! Standardization followed by projection onto principal directions.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::FeatureMatrix;
use crate::error::{Error, Result};

/// Lower bound on a feature's scale.
pub const SCALE_FLOOR: f64 = 1e-12;
pub const DEFAULT_RANK_TOLERANCE: f64 = 1e-9;

/// Fitted standardization + orthonormal projection.
///
/// `apply` maps a row `x` to `components · ((x − mean) / scale)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaTransform {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    /// `k` rows of length `d`, orthonormal.
    pub components: Vec<Vec<f64>>,
    pub singular_values: Vec<f64>,
    pub k: usize,
}

fn column_means(data: &FeatureMatrix) -> Vec<f64> {
    let n = data.rows() as f64;
    let mut mean = vec![0.0; data.cols()];
    for row in data.iter_rows() {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    // second pass removes the first pass's rounding; constant columns come out exact
    let mut correction = vec![0.0; data.cols()];
    for row in data.iter_rows() {
        for ((c, &v), &m) in correction.iter_mut().zip(row).zip(&mean) {
            *c += v - m;
        }
    }
    mean.iter()
        .zip(&correction)
        .map(|(m, c)| m + c / n)
        .collect()
}

/// Fits the transform on training rows.
///
/// Components whose singular value does not exceed
/// `rank_tolerance × largest` are dropped, and at most `min(n − 1, d)` are kept.
pub fn fit_pca(train: &FeatureMatrix, rank_tolerance: f64) -> Result<PcaTransform> {
    let (n, d) = (train.rows(), train.cols());
    if n < 2 {
        return Err(Error::InvalidData(format!(
            "PCA needs at least 2 rows, got {n}"
        )));
    }
    if !(rank_tolerance > 0.0 && rank_tolerance < 1.0) {
        return Err(Error::Config(format!(
            "rank_tolerance must lie in (0, 1), got {rank_tolerance}"
        )));
    }

    let mean = column_means(train);
    let mut var = vec![0.0; d];
    for row in train.iter_rows() {
        for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let floored: Vec<bool> = var
        .iter()
        .map(|&s| (s / n as f64).sqrt() < SCALE_FLOOR)
        .collect();
    let scale: Vec<f64> = var
        .iter()
        .map(|&s| (s / n as f64).sqrt().max(SCALE_FLOOR))
        .collect();
    if floored.iter().all(|&f| f) {
        return Err(Error::NoVariance);
    }

    let z = DMatrix::from_fn(n, d, |i, j| (train.get(i, j) - mean[j]) / scale[j]);
    let svd = z.svd(false, true);
    let v_t = svd
        .v_t
        .ok_or_else(|| Error::InvalidData("SVD did not produce right singular vectors".into()))?;

    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| {
        svd.singular_values[b]
            .total_cmp(&svd.singular_values[a])
            .then(a.cmp(&b))
    });
    let largest = svd.singular_values[order[0]];
    if largest <= 0.0 {
        return Err(Error::NoVariance);
    }
    let max_k = (n - 1).min(d);

    let mut components = Vec::new();
    let mut singular_values = Vec::new();
    for &idx in order.iter().take(max_k) {
        let s = svd.singular_values[idx];
        if s <= rank_tolerance * largest {
            break;
        }
        let mut row: Vec<f64> = v_t.row(idx).iter().copied().collect();
        // floored features have an all-zero standardized column
        let mut touched = false;
        for (c, &f) in row.iter_mut().zip(&floored) {
            if f && *c != 0.0 {
                *c = 0.0;
                touched = true;
            }
        }
        if touched {
            let norm = row.iter().map(|c| c * c).sum::<f64>().sqrt();
            row.iter_mut().for_each(|c| *c /= norm);
        }
        let pivot =
            row.iter().enumerate().fold(
                0,
                |best, (j, c)| if c.abs() > row[best].abs() { j } else { best },
            );
        if row[pivot] < 0.0 {
            row.iter_mut().for_each(|c| *c = -*c);
        }
        components.push(row);
        singular_values.push(s);
    }

    Ok(PcaTransform {
        mean,
        scale,
        k: components.len(),
        components,
        singular_values,
    })
}

impl PcaTransform {
    pub fn input_dim(&self) -> usize {
        self.mean.len()
    }

    /// Projects a single row.
    pub fn apply_row(&self, row: &[f64], out: &mut [f64]) {
        let standardized: Vec<f64> = row
            .iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .map(|((&x, &m), &s)| (x - m) / s)
            .collect();
        for (o, comp) in out.iter_mut().zip(&self.components) {
            *o = comp.iter().zip(&standardized).map(|(c, z)| c * z).sum();
        }
    }

    /// Returns the `n × k` matrix of principal-component scores.
    pub fn apply(&self, data: &FeatureMatrix) -> Result<FeatureMatrix> {
        if data.cols() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                actual: data.cols(),
            });
        }
        let mut values = vec![0.0; data.rows() * self.k];
        for (row, out) in data.iter_rows().zip(values.chunks_exact_mut(self.k)) {
            self.apply_row(row, out);
        }
        FeatureMatrix::new(data.rows(), self.k, values)?
            .with_feature_names((0..self.k).map(|i| format!("pc{i}")).collect())
    }

    /// Content hash of the serialized transform, used to tie models to it.
    pub fn id(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("transform serializes");
        let digest = Sha256::digest(&bytes);
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let t: Self = serde_json::from_str(text)?;
        if t.components.len() != t.k
            || t.singular_values.len() != t.k
            || t.scale.len() != t.mean.len()
            || t.components.iter().any(|c| c.len() != t.mean.len())
        {
            return Err(Error::InvalidData("inconsistent transform shapes".into()));
        }
        Ok(t)
    }
}

/// Free-function form of [`PcaTransform::apply`].
pub fn apply_pca(transform: &PcaTransform, data: &FeatureMatrix) -> Result<FeatureMatrix> {
    transform.apply(data)
}
