//! Validated matrix newtypes: one sample (or frame) per row.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Feature vectors stored one sample per row. All entries are finite.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix<T: Scalar> {
    data: DMatrix<T>,
}

impl<T: Scalar> FeatureMatrix<T> {
    pub fn new(data: DMatrix<T>) -> Result<Self> {
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            let (r, c) = (pos % data.nrows(), pos / data.nrows());
            return Err(Error::Data(format!(
                "non-finite feature at row {r}, column {c}"
            )));
        }
        Ok(Self { data })
    }

    /// Builds a matrix from row-major values.
    pub fn from_row_slice(rows: usize, cols: usize, values: &[T]) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::dims(format!(
                "{} values for a {rows}x{cols} feature matrix",
                values.len()
            )));
        }
        Self::new(DMatrix::from_row_slice(rows, cols, values))
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::dims("rows of unequal length"));
        }
        let flat: Vec<T> = rows.iter().flatten().copied().collect();
        Self::from_row_slice(rows.len(), cols, &flat)
    }

    pub fn nrows(&self) -> usize {
        self.data.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.data.ncols()
    }

    pub fn as_matrix(&self) -> &DMatrix<T> {
        &self.data
    }

    pub fn into_matrix(self) -> DMatrix<T> {
        self.data
    }

    pub fn row_vec(&self, i: usize) -> Vec<T> {
        self.data.row(i).iter().copied().collect()
    }

    pub fn select_rows(&self, idx: &[usize]) -> Self {
        Self {
            data: self.data.select_rows(idx),
        }
    }

    /// Row-major copy of the values.
    pub fn to_row_major(&self) -> Vec<T> {
        self.data.transpose().as_slice().to_vec()
    }
}

/// Per-frame, per-channel gains. `n_frames x n_channels`.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskMatrix<T: Scalar> {
    values: DMatrix<T>,
}

impl<T: Scalar> MaskMatrix<T> {
    /// Accepts any finite matrix; use [`MaskMatrix::clipped`] to enforce the unit range.
    pub fn new(values: DMatrix<T>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("non-finite mask value".into()));
        }
        Ok(Self { values })
    }

    pub fn clipped(mut values: DMatrix<T>) -> Result<Self> {
        values.apply(|v| *v = v.clamp(T::zero(), T::one()));
        Self::new(values)
    }

    pub fn zeros(frames: usize, channels: usize) -> Self {
        Self {
            values: DMatrix::zeros(frames, channels),
        }
    }

    pub fn n_frames(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_channels(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &DMatrix<T> {
        &self.values
    }

    pub fn into_values(self) -> DMatrix<T> {
        self.values
    }

    pub fn get(&self, frame: usize, channel: usize) -> T {
        self.values[(frame, channel)]
    }

    pub fn in_unit_range(&self) -> bool {
        self.values.iter().all(|&v| v >= T::zero() && v <= T::one())
    }

    pub fn is_binary(&self) -> bool {
        self.values.iter().all(|&v| v == T::zero() || v == T::one())
    }

    /// Stacks masks along the frame axis.
    pub fn vstack(parts: &[MaskMatrix<T>]) -> Result<Self> {
        let channels = parts.first().map_or(0, |m| m.n_channels());
        if parts.iter().any(|m| m.n_channels() != channels) {
            return Err(Error::dims("masks with different channel counts"));
        }
        let frames: usize = parts.iter().map(|m| m.n_frames()).sum();
        let mut out = DMatrix::zeros(frames, channels);
        let mut row = 0;
        for p in parts {
            out.rows_mut(row, p.n_frames()).copy_from(&p.values);
            row += p.n_frames();
        }
        Ok(Self { values: out })
    }
}
