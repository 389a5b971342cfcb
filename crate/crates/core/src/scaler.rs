//! Per-column affine scalers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScalerKind {
    /// Column min maps to -1 and max to +1.
    MinmaxPm1,
    /// Zero mean, unit (population) standard deviation.
    Standardize,
}

/// `apply(x) = (x - shift) / scale`, column by column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineScaler {
    pub kind: ScalerKind,
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
}

impl AffineScaler {
    pub fn identity(cols: usize, kind: ScalerKind) -> Self {
        AffineScaler {
            kind,
            shift: vec![0.0; cols],
            scale: vec![1.0; cols],
        }
    }

    /// Fits on the finite entries of each column; NaN entries are ignored.
    pub fn fit(data: &Matrix, kind: ScalerKind) -> Result<Self> {
        let (n, d) = data.shape();
        if n < 2 {
            return Err(Error::arg(format!("need at least 2 rows to fit a scaler, got {n}")));
        }
        let mut shift = Vec::with_capacity(d);
        let mut scale = Vec::with_capacity(d);
        for j in 0..d {
            let col: Vec<f64> = data.column(j).iter().copied().filter(|v| v.is_finite()).collect();
            if col.len() < 2 {
                return Err(Error::DegenerateColumn { column: j });
            }
            let (s, c) = match kind {
                ScalerKind::MinmaxPm1 => {
                    let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
                    let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    (0.5 * (hi + lo), 0.5 * (hi - lo))
                }
                ScalerKind::Standardize => {
                    let m = col.iter().sum::<f64>() / col.len() as f64;
                    let var = col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / col.len() as f64;
                    (m, var.sqrt())
                }
            };
            if !(c > 0.0) || c <= 1e-14 * s.abs() {
                return Err(Error::DegenerateColumn { column: j });
            }
            shift.push(s);
            scale.push(c);
        }
        Ok(AffineScaler { kind, shift, scale })
    }

    pub fn cols(&self) -> usize {
        self.shift.len()
    }

    fn check(&self, data: &Matrix) -> Result<()> {
        if data.ncols() != self.cols() {
            return Err(Error::dim(format!(
                "scaler fitted on {} columns applied to {}",
                self.cols(),
                data.ncols()
            )));
        }
        Ok(())
    }

    pub fn apply(&self, data: &Matrix) -> Result<Matrix> {
        self.check(data)?;
        Ok(Matrix::from_fn(data.nrows(), data.ncols(), |i, j| {
            (data[(i, j)] - self.shift[j]) / self.scale[j]
        }))
    }

    pub fn invert(&self, data: &Matrix) -> Result<Matrix> {
        self.check(data)?;
        Ok(Matrix::from_fn(data.nrows(), data.ncols(), |i, j| {
            data[(i, j)] * self.scale[j] + self.shift[j]
        }))
    }

    pub fn apply_value(&self, col: usize, v: f64) -> f64 {
        (v - self.shift[col]) / self.scale[col]
    }

    pub fn invert_value(&self, col: usize, v: f64) -> f64 {
        v * self.scale[col] + self.shift[col]
    }

    /// Restriction to a subset of columns.
    pub fn select(&self, cols: &[usize]) -> AffineScaler {
        AffineScaler {
            kind: self.kind,
            shift: cols.iter().map(|&c| self.shift[c]).collect(),
            scale: cols.iter().map(|&c| self.scale[c]).collect(),
        }
    }
}

/// Fits a scaler of `kind` on `data`.
pub fn fit_scaler(data: &Matrix, kind: ScalerKind) -> Result<AffineScaler> {
    AffineScaler::fit(data, kind)
}

pub fn apply_scaler(scaler: &AffineScaler, data: &Matrix) -> Result<Matrix> {
    scaler.apply(data)
}

pub fn invert_scaler(scaler: &AffineScaler, data: &Matrix) -> Result<Matrix> {
    scaler.invert(data)
}
