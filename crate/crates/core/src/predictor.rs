//! Predictive distributions and the projected form shared by every GP flavour.
//!
//! Exact, collapsed-sparse and stochastic-variational GPs all predict as
//!
//!   mean = mu + K(F, Z) a
//!   cov  = K(F, F) - K(F, Z) B K(Z, F)  (+ noise I for targets)
//!
//! for support points `Z`, weights `a` and a symmetric correction `B`; only
//! how `a` and `B` are computed differs. `B` is held as `AᵀA − CᵀC` so that
//! variances come from squared norms of triangular solves rather than from
//! an explicit inverse.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{gram, gram_backprop, gram_sym, InputGrads, KernelHyper};
use crate::linalg::{chol, symmetrize, Matrix, Vector};

#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveGaussian {
    pub mean: Vector,
    pub cov: Matrix,
}

impl PredictiveGaussian {
    /// Symmetrizes the covariance and clamps slightly negative variances to zero.
    pub fn finalize(mean: Vector, mut cov: Matrix) -> Self {
        symmetrize(&mut cov);
        for i in 0..cov.nrows() {
            if cov[(i, i)] < 0.0 && cov[(i, i)] >= -1e-10 {
                cov[(i, i)] = 0.0;
            }
        }
        PredictiveGaussian { mean, cov }
    }

    pub fn variances(&self) -> Vector {
        self.cov.diagonal()
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }
}

/// Cached statistics for n-independent prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectedPredictor {
    pub hyper: KernelHyper,
    pub mean_const: f64,
    #[serde(with = "crate::serde_matrix")]
    pub points: Matrix,
    #[serde(with = "crate::serde_matrix::vector")]
    pub weights: Vector,
    /// `A` in `B = AᵀA − CᵀC`; r×m.
    #[serde(with = "crate::serde_matrix")]
    pub root_plus: Matrix,
    /// `C` in `B = AᵀA − CᵀC`; s×m, possibly with no rows.
    #[serde(with = "crate::serde_matrix")]
    pub root_minus: Matrix,
}

/// Upstream gradients of a scalar with respect to a predictive mean and covariance.
pub struct PredictiveUpstream<'a> {
    pub mean: &'a Vector,
    pub cov: &'a Matrix,
}

impl ProjectedPredictor {
    pub fn feature_dim(&self) -> usize {
        self.points.ncols()
    }

    /// The dense correction `B = AᵀA − CᵀC`.
    pub fn correction(&self) -> Matrix {
        let mut b = self.root_plus.transpose() * &self.root_plus - self.root_minus.transpose() * &self.root_minus;
        symmetrize(&mut b);
        b
    }

    /// `K(Z, F)` mapped through both roots: `(A K(Z,F), C K(Z,F))`.
    fn rooted(&self, kzq: &Matrix) -> (Matrix, Matrix) {
        (&self.root_plus * kzq, &self.root_minus * kzq)
    }

    /// Predictive distribution at feature rows `f`; `noisy` adds the noise
    /// variance to the diagonal (distribution of targets rather than latents).
    pub fn predict(&self, f: &Matrix, noisy: bool) -> Result<PredictiveGaussian> {
        if f.ncols() != self.feature_dim() {
            return Err(Error::dim(format!(
                "query has {} columns, model expects {}",
                f.ncols(),
                self.feature_dim()
            )));
        }
        let kqz = gram(f, &self.points, &self.hyper)?;
        let mean = kqz.clone() * &self.weights + Vector::from_element(f.nrows(), self.mean_const);
        let mut cov = gram_sym(f, &self.hyper)?;
        let (pa, pc) = self.rooted(&kqz.transpose());
        cov -= pa.transpose() * pa;
        cov += pc.transpose() * pc;
        if noisy {
            for i in 0..cov.nrows() {
                cov[(i, i)] += self.hyper.noise;
            }
        }
        Ok(PredictiveGaussian::finalize(mean, cov))
    }

    /// Mean and variance at each row, without forming the joint covariance.
    pub fn predict_marginals(&self, f: &Matrix, noisy: bool) -> Result<(Vector, Vector)> {
        if f.ncols() != self.feature_dim() {
            return Err(Error::dim(format!(
                "query has {} columns, model expects {}",
                f.ncols(),
                self.feature_dim()
            )));
        }
        let kqz = gram(f, &self.points, &self.hyper)?;
        let mean = &kqz * &self.weights + Vector::from_element(f.nrows(), self.mean_const);
        let (pa, pc) = self.rooted(&kqz.transpose());
        let noise = if noisy { self.hyper.noise } else { 0.0 };
        let var = Vector::from_fn(f.nrows(), |i, _| {
            let v = self.hyper.scale - pa.column(i).norm_squared() + pc.column(i).norm_squared() + noise;
            if v < 0.0 && v >= -1e-10 {
                0.0
            } else {
                v
            }
        });
        Ok((mean, var))
    }

    /// Gradient with respect to the feature rows of a scalar whose partial
    /// derivatives in the predictive mean and covariance are `up`.
    pub fn backprop_features(&self, f: &Matrix, up: PredictiveUpstream<'_>) -> Result<Matrix> {
        let kqz = gram(f, &self.points, &self.hyper)?;
        let kqq = gram_sym(f, &self.hyper)?;
        // d/dKqz of gm·(Kqz a) and of <gC, -Kqz B Kzq>
        let mut g_kqz = up.mean * self.weights.transpose();
        let gc_sym = 0.5 * (up.cov + up.cov.transpose());
        let kqz_b = (&kqz * self.root_plus.transpose()) * &self.root_plus
            - (&kqz * self.root_minus.transpose()) * &self.root_minus;
        g_kqz -= 2.0 * &gc_sym * kqz_b;
        let from_cross = gram_backprop(
            f,
            &self.points,
            &kqz,
            &g_kqz,
            &self.hyper,
            InputGrads { a: true, b: false },
        );
        let from_self = gram_backprop(
            f,
            f,
            &kqq,
            &gc_sym,
            &self.hyper,
            InputGrads { a: true, b: true },
        );
        let mut g = from_cross.wrt_a.expect("requested");
        g += from_self.wrt_a.expect("requested");
        g += from_self.wrt_b.expect("requested");
        Ok(g)
    }
}

/// Log-density of `observed` under a predictive Gaussian plus the upstream
/// gradients in its mean and covariance.
pub fn logpdf_with_upstream(
    pred: &PredictiveGaussian,
    observed: &Vector,
    diagonal_only: bool,
) -> Result<(f64, Vector, Matrix)> {
    let n = observed.len();
    if pred.len() != n {
        return Err(Error::dim(format!(
            "observed has {n} entries, prediction has {}",
            pred.len()
        )));
    }
    let r = observed - &pred.mean;
    if diagonal_only {
        let mut value = -0.5 * n as f64 * crate::linalg::LN_2PI;
        let mut gm = Vector::zeros(n);
        let mut gc = Matrix::zeros(n, n);
        for i in 0..n {
            let v = pred.cov[(i, i)];
            if !(v > 0.0) {
                return Err(Error::Singular { jitter: 0.0 });
            }
            value -= 0.5 * (r[i] * r[i] / v + v.ln());
            gm[i] = r[i] / v;
            gc[(i, i)] = 0.5 * (r[i] * r[i] / (v * v) - 1.0 / v);
        }
        return Ok((value, gm, gc));
    }
    let factor = chol(&pred.cov)?;
    let z = factor.solve_lower_vec(&r);
    let value = -0.5 * (z.norm_squared() + factor.log_det() + n as f64 * crate::linalg::LN_2PI);
    let beta = factor.solve_vec(&r);
    let cinv = factor.inverse();
    let gc = 0.5 * (&beta * beta.transpose() - cinv);
    Ok((value, beta, gc))
}
