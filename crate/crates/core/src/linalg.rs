//! Dense linear-algebra helpers: jittered Cholesky and Gaussian log-density.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;

pub const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Escalating diagonal jitter tried by [`chol_jitter`], starting with none.
pub const JITTER_LADDER: [f64; 5] = [0.0, 1e-10, 1e-8, 1e-6, 1e-4];

/// Lower-triangular factor `L` with `L Lᵀ = A + jitter·I`.
#[derive(Debug, Clone)]
pub struct CholFactor {
    chol: Cholesky<f64, Dyn>,
    pub jitter: f64,
}

impl CholFactor {
    pub fn l(&self) -> Matrix {
        self.chol.l()
    }

    pub fn dim(&self) -> usize {
        self.chol.l_dirty().nrows()
    }

    /// Solves `(L Lᵀ) X = B`.
    pub fn solve(&self, b: &Matrix) -> Matrix {
        self.chol.solve(b)
    }

    pub fn solve_vec(&self, b: &Vector) -> Vector {
        self.chol.solve(b)
    }

    /// Solves `L X = B`.
    pub fn solve_lower(&self, b: &Matrix) -> Matrix {
        let mut out = b.clone();
        self.chol.l_dirty().solve_lower_triangular_mut(&mut out);
        out
    }

    pub fn solve_lower_vec(&self, b: &Vector) -> Vector {
        let mut out = b.clone();
        self.chol.l_dirty().solve_lower_triangular_mut(&mut out);
        out
    }

    /// Solves `Lᵀ X = B`.
    pub fn solve_upper(&self, b: &Matrix) -> Matrix {
        let mut out = b.clone();
        self.chol.l_dirty().tr_solve_lower_triangular_mut(&mut out);
        out
    }

    pub fn solve_upper_vec(&self, b: &Vector) -> Vector {
        let mut out = b.clone();
        self.chol.l_dirty().tr_solve_lower_triangular_mut(&mut out);
        out
    }

    pub fn inverse(&self) -> Matrix {
        self.chol.inverse()
    }

    /// `log |L Lᵀ|`
    pub fn log_det(&self) -> f64 {
        let l = self.chol.l_dirty();
        2.0 * (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>()
    }
}

fn check_symmetric(a: &Matrix, rel_tol: f64) -> Result<()> {
    if !a.is_square() {
        return Err(Error::dim(format!("expected a square matrix, got {:?}", a.shape())));
    }
    let scale = a.amax().max(f64::MIN_POSITIVE);
    let n = a.nrows();
    for j in 0..n {
        for i in (j + 1)..n {
            if (a[(i, j)] - a[(j, i)]).abs() > rel_tol * scale {
                return Err(Error::arg(format!(
                    "matrix is not symmetric at ({i}, {j}): {} vs {}",
                    a[(i, j)],
                    a[(j, i)]
                )));
            }
        }
    }
    Ok(())
}

/// Cholesky factorization with the smallest succeeding jitter from `ladder`.
pub fn chol_jitter(a: &Matrix, ladder: &[f64]) -> Result<CholFactor> {
    check_symmetric(a, 1e-10)?;
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::Singular {
            jitter: ladder.first().copied().unwrap_or(0.0),
        });
    }
    let mut last = 0.0;
    for &jitter in ladder {
        last = jitter;
        let mut m = a.clone();
        if jitter > 0.0 {
            for i in 0..m.nrows() {
                m[(i, i)] += jitter;
            }
        }
        if let Some(chol) = Cholesky::new(m) {
            let l = chol.l_dirty();
            if (0..l.nrows()).all(|i| l[(i, i)] > 0.0 && l[(i, i)].is_finite()) {
                return Ok(CholFactor { chol, jitter });
            }
        }
    }
    Err(Error::Singular { jitter: last })
}

/// [`chol_jitter`] with [`JITTER_LADDER`].
pub fn chol(a: &Matrix) -> Result<CholFactor> {
    chol_jitter(a, &JITTER_LADDER)
}

/// Multivariate normal log-density evaluated through the Cholesky factor.
pub fn gaussian_logpdf(y: &Vector, mean: &Vector, cov: &Matrix) -> Result<f64> {
    let n = y.len();
    if mean.len() != n || cov.shape() != (n, n) {
        return Err(Error::dim(format!(
            "logpdf with y of length {n}, mean of length {}, covariance {:?}",
            mean.len(),
            cov.shape()
        )));
    }
    let factor = chol(cov)?;
    let r = y - mean;
    let z = factor.solve_lower_vec(&r);
    Ok(-0.5 * (z.norm_squared() + factor.log_det() + n as f64 * LN_2PI))
}

/// `(A + Aᵀ) / 2`
pub fn symmetrize(a: &mut Matrix) {
    let n = a.nrows();
    for j in 0..n {
        for i in (j + 1)..n {
            let v = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = v;
            a[(j, i)] = v;
        }
    }
}

pub fn add_diagonal(a: &mut Matrix, v: f64) {
    for i in 0..a.nrows().min(a.ncols()) {
        a[(i, i)] += v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_spd(rng: &mut ChaCha8Rng, n: usize) -> Matrix {
        let a = Matrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let mut s = &a * a.transpose();
        add_diagonal(&mut s, 0.5);
        s
    }

    #[test]
    fn identity_factor_without_jitter() {
        let f = chol(&Matrix::identity(3, 3)).unwrap();
        assert_eq!(f.jitter, 0.0);
        assert_eq!(f.l(), Matrix::identity(3, 3));
    }

    #[test]
    fn two_by_two_hand_factor() {
        let a = Matrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 1.0]);
        let f = chol(&a).unwrap();
        let l = f.l();
        assert_eq!(f.jitter, 0.0);
        assert!((l[(0, 0)] - 1.0).abs() < 1e-15);
        assert_eq!(l[(0, 1)], 0.0);
        assert!((l[(1, 0)] - 0.5).abs() < 1e-15);
        assert!((l[(1, 1)] - 0.75f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn rank_deficient_needs_jitter_and_is_minimal() {
        let a = Matrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let f = chol(&a).unwrap();
        assert!(f.jitter > 0.0);
        let l = f.l();
        let mut target = a.clone();
        add_diagonal(&mut target, f.jitter);
        assert!((&l * l.transpose() - target).amax() < 1e-10);

        let pos = JITTER_LADDER.iter().position(|j| *j == f.jitter).unwrap();
        assert!(chol_jitter(&a, &JITTER_LADDER[..pos]).is_err());
    }

    #[test]
    fn exhausted_ladder_reports_last_jitter() {
        let a = Matrix::from_row_slice(2, 2, &[-1.0, 0.0, 0.0, -1.0]);
        match chol(&a) {
            Err(Error::Singular { jitter }) => assert_eq!(jitter, 1e-4),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn asymmetric_input_rejected() {
        let a = Matrix::from_row_slice(2, 2, &[1.0, 0.5, 0.4, 1.0]);
        assert!(matches!(chol(&a), Err(Error::Argument(_))));
    }

    #[test]
    fn logpdf_closed_forms() {
        let v = gaussian_logpdf(
            &Vector::from_element(1, 0.0),
            &Vector::from_element(1, 0.0),
            &Matrix::identity(1, 1),
        )
        .unwrap();
        assert!((v + 0.5 * (2.0 * std::f64::consts::PI).ln()).abs() < 1e-15);
        assert!((v + 0.9189385).abs() < 1e-7);

        let y = Vector::from_vec(vec![0.3, -2.0]);
        let v = gaussian_logpdf(&y, &y, &Matrix::identity(2, 2)).unwrap();
        assert!((v + (2.0 * std::f64::consts::PI).ln()).abs() < 1e-14);
    }

    #[test]
    fn logpdf_matches_dense_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for n in [5usize, 12, 20] {
            let cov = random_spd(&mut rng, n);
            let y = Vector::from_fn(n, |_, _| rng.random_range(-2.0..2.0));
            let mean = Vector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
            let r = &y - &mean;
            let inv = cov.clone().try_inverse().unwrap();
            let det = cov.determinant();
            let dense = -0.5 * ((r.transpose() * inv * &r)[0] + det.ln() + n as f64 * LN_2PI);
            let v = gaussian_logpdf(&y, &mean, &cov).unwrap();
            assert!((v - dense).abs() <= 1e-8 * dense.abs(), "{v} vs {dense}");
        }
    }

    #[test]
    fn logpdf_shape_errors() {
        let y = Vector::zeros(2);
        assert!(gaussian_logpdf(&y, &Vector::zeros(3), &Matrix::identity(2, 2)).is_err());
    }
}
