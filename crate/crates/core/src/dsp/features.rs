use nalgebra::DMatrix;

use super::Spectrogram;
use crate::error::{Error, Result};
use crate::matrix::FeatureMatrix;

/// Floor added to bin power before the logarithm.
pub const LOG_EPSILON: f64 = 1e-10;

/// Log-power frames stacked with `context` neighbours on each side; edge
/// frames repeat the boundary frame. Dimension `n_bins · (2·context + 1)`.
pub fn extract_features(noisy: &Spectrogram, context: usize) -> Result<FeatureMatrix<f64>> {
    let frames = noisy.n_frames();
    let bins = noisy.n_bins();
    if frames == 0 || bins == 0 {
        return Err(Error::Signal("empty spectrogram".into()));
    }
    let logp = noisy.power().map(|p| (p + LOG_EPSILON).ln());
    let width = 2 * context + 1;
    let out = DMatrix::from_fn(frames, bins * width, |f, c| {
        let (slot, bin) = (c / bins, c % bins);
        let src = (f + slot).saturating_sub(context).min(frames - 1);
        logp[(src, bin)]
    });
    FeatureMatrix::new(out)
}

/// Per-dimension affine map to zero mean and unit variance, fitted on
/// training rows only. Constant dimensions map to 0.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    mean: Vec<f64>,
    /// Reciprocal standard deviation, 0 for constant dimensions.
    inv_std: Vec<f64>,
}

/// Variances at or below this are treated as zero.
const VARIANCE_FLOOR: f64 = 1e-12;

impl Standardizer {
    pub fn fit(x: &FeatureMatrix<f64>) -> Result<Self> {
        let n = x.nrows();
        if n == 0 {
            return Err(Error::Data(
                "cannot fit standardization on zero rows".into(),
            ));
        }
        let m = x.as_matrix();
        let mut mean = Vec::with_capacity(m.ncols());
        let mut inv_std = Vec::with_capacity(m.ncols());
        for col in m.column_iter() {
            let mu = col.iter().sum::<f64>() / n as f64;
            let var = col.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
            mean.push(mu);
            inv_std.push(if var > VARIANCE_FLOOR {
                1.0 / var.sqrt()
            } else {
                0.0
            });
        }
        Ok(Self { mean, inv_std })
    }

    pub fn from_parts(mean: Vec<f64>, inv_std: Vec<f64>) -> Result<Self> {
        if mean.len() != inv_std.len() {
            return Err(Error::dims("standardizer mean and scale lengths differ"));
        }
        if mean.iter().chain(&inv_std).any(|v| !v.is_finite()) || inv_std.iter().any(|&s| s < 0.0) {
            return Err(Error::Data("invalid standardization statistics".into()));
        }
        Ok(Self { mean, inv_std })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn inv_std(&self) -> &[f64] {
        &self.inv_std
    }

    pub fn apply(&self, x: &FeatureMatrix<f64>) -> Result<FeatureMatrix<f64>> {
        if x.ncols() != self.dim() {
            return Err(Error::dims(format!(
                "standardizer fitted on {} dimensions, got {}",
                self.dim(),
                x.ncols()
            )));
        }
        let mut m = x.as_matrix().clone();
        for (j, mut col) in m.column_iter_mut().enumerate() {
            let (mu, s) = (self.mean[j], self.inv_std[j]);
            col.apply(|v| *v = (*v - mu) * s);
        }
        FeatureMatrix::new(m)
    }
}
