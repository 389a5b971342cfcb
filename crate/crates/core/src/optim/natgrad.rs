use crate::error::{Error, Result};
use crate::linalg::{chol_jitter, symmetrize, Matrix, Vector};
use crate::sparse::VariationalState;

const MAX_HALVINGS: usize = 10;

/// Euclidean gradients of an objective with respect to the mean and the
/// (symmetric) covariance of a Gaussian q(u).
///
/// `cov` follows the convention `dL = tr(cov · dΣ)` for symmetric `dΣ`.
#[derive(Debug, Clone)]
pub struct QGradient {
    pub mean: Vector,
    pub cov: Matrix,
}

impl QGradient {
    pub fn zeros(m: usize) -> Self {
        QGradient {
            mean: Vector::zeros(m),
            cov: Matrix::zeros(m, m),
        }
    }

    fn is_zero(&self) -> bool {
        self.mean.iter().all(|v| *v == 0.0) && self.cov.iter().all(|v| *v == 0.0)
    }
}

/// Natural-gradient ascent step on q(u) = N(μ, Σ).
///
/// With natural parameters θ₁ = Σ⁻¹μ, θ₂ = −½Σ⁻¹ the natural gradient equals
/// the gradient in expectation parameters (μ, μμᵀ + Σ), which is
/// (g_μ − 2 G_Σ μ, G_Σ). If the updated precision is not SPD the step is
/// halved, at most ten times.
pub fn natgrad_step(state: &VariationalState, grad: &QGradient, lr: f64) -> Result<VariationalState> {
    let m = state.q_mean.len();
    if grad.mean.len() != m || grad.cov.shape() != (m, m) {
        return Err(Error::dim(format!(
            "natural gradient for {m} inducing values has shapes {} and {:?}",
            grad.mean.len(),
            grad.cov.shape()
        )));
    }
    if let Some(index) = grad
        .mean
        .iter()
        .chain(grad.cov.iter())
        .position(|v| !v.is_finite())
    {
        return Err(Error::NonFiniteGradient { index });
    }
    if lr == 0.0 || grad.is_zero() {
        return Ok(state.clone());
    }
    let l = &state.q_cov_factor;
    let sigma = l * l.transpose();
    let lf = chol_jitter(&sigma, &[0.0])?;
    let precision = lf.inverse();
    let theta1 = &precision * &state.q_mean;

    let mut g_cov = grad.cov.clone();
    symmetrize(&mut g_cov);
    let d1 = &grad.mean - 2.0 * &g_cov * &state.q_mean;

    let mut step = lr;
    for _ in 0..=MAX_HALVINGS {
        // -2 θ₂ after the step
        let mut new_prec = &precision - 2.0 * step * &g_cov;
        symmetrize(&mut new_prec);
        if let Ok(pf) = chol_jitter(&new_prec, &[0.0]) {
            let new_theta1 = &theta1 + step * &d1;
            let mut new_sigma = pf.inverse();
            symmetrize(&mut new_sigma);
            if let Ok(sf) = chol_jitter(&new_sigma, &[0.0]) {
                let q_mean = pf.solve_vec(&new_theta1);
                if q_mean.iter().all(|v| v.is_finite()) {
                    return Ok(VariationalState {
                        inducing: state.inducing.clone(),
                        q_mean,
                        q_cov_factor: sf.l(),
                    });
                }
            }
        }
        step *= 0.5;
    }
    Err(Error::NaturalGradientStep)
}
