//! Query-time emulator interfaces.
//!
//! A [`BlockEmulator`] maps a simulator parameter vector θ to a joint
//! Gaussian over a fixed block of outputs (one per nuclide). Pointwise GP
//! emulators become block emulators by appending each block row to θ.

use serde::{Deserialize, Serialize};

use crate::deep_kernel::MlpParams;
use crate::error::{Error, Result};
use crate::linalg::{Matrix, Vector};
use crate::predictor::{logpdf_with_upstream, PredictiveGaussian, PredictiveUpstream, ProjectedPredictor};

pub trait BlockEmulator {
    fn param_dim(&self) -> usize;

    fn n_outputs(&self) -> usize;

    /// Predictive distribution of the observable block at θ.
    fn predict_block(&self, theta: &[f64]) -> Result<PredictiveGaussian>;

    /// `log N(observed | predict_block(θ))` and, if requested, its gradient in θ.
    fn block_logpdf(
        &self,
        theta: &[f64],
        observed: &Vector,
        diagonal_only: bool,
        with_grad: bool,
    ) -> Result<(f64, Option<Vec<f64>>)>;
}

impl<T: BlockEmulator + ?Sized> BlockEmulator for &T {
    fn param_dim(&self) -> usize {
        (**self).param_dim()
    }

    fn n_outputs(&self) -> usize {
        (**self).n_outputs()
    }

    fn predict_block(&self, theta: &[f64]) -> Result<PredictiveGaussian> {
        (**self).predict_block(theta)
    }

    fn block_logpdf(
        &self,
        theta: &[f64],
        observed: &Vector,
        diagonal_only: bool,
        with_grad: bool,
    ) -> Result<(f64, Option<Vec<f64>>)> {
        (**self).block_logpdf(theta, observed, diagonal_only, with_grad)
    }
}

/// A fitted GP (any family) ready for prediction, with its optional feature map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpEmulator {
    pub predictor: ProjectedPredictor,
    pub feature_map: Option<MlpParams>,
}

impl GpEmulator {
    pub fn new(predictor: ProjectedPredictor, feature_map: Option<MlpParams>) -> Self {
        GpEmulator { predictor, feature_map }
    }

    pub fn input_dim(&self) -> usize {
        match &self.feature_map {
            Some(net) => net.input_dim(),
            None => self.predictor.feature_dim(),
        }
    }

    fn features(&self, x: &Matrix) -> Result<Matrix> {
        if x.ncols() != self.input_dim() {
            return Err(Error::dim(format!(
                "query has {} columns, emulator expects {}",
                x.ncols(),
                self.input_dim()
            )));
        }
        match &self.feature_map {
            Some(net) => net.forward(x),
            None => Ok(x.clone()),
        }
    }

    /// Predictive distribution at the query rows; `noisy` adds the noise variance.
    pub fn predict(&self, x: &Matrix, noisy: bool) -> Result<PredictiveGaussian> {
        self.predictor.predict(&self.features(x)?, noisy)
    }

    pub fn predict_marginals(&self, x: &Matrix, noisy: bool) -> Result<(Vector, Vector)> {
        self.predictor.predict_marginals(&self.features(x)?, noisy)
    }

    /// Log-density of `observed` under the noisy joint predictive at `x`, and
    /// its gradient with respect to the rows of `x`.
    pub fn logpdf_query_grad(&self, x: &Matrix, observed: &Vector, diagonal_only: bool) -> Result<(f64, Matrix)> {
        let f = self.features(x)?;
        let pred = self.predictor.predict(&f, true)?;
        let (value, gm, gc) = logpdf_with_upstream(&pred, observed, diagonal_only)?;
        let gf = self
            .predictor
            .backprop_features(&f, PredictiveUpstream { mean: &gm, cov: &gc })?;
        let gx = match &self.feature_map {
            Some(net) => net.backward(x, &gf)?.input,
            None => gf,
        };
        Ok((value, gx))
    }
}

/// A pointwise emulator queried on `[θ, block row]` for every row of `block`.
#[derive(Debug, Clone)]
pub struct Broadcast<'a> {
    pub emulator: &'a GpEmulator,
    /// Fixed trailing input columns, one row per output (scaled Z, N).
    pub block: Matrix,
}

impl Broadcast<'_> {
    fn query(&self, theta: &[f64]) -> Result<Matrix> {
        let p = theta.len();
        if p + self.block.ncols() != self.emulator.input_dim() {
            return Err(Error::dim(format!(
                "θ of length {p} plus {} block columns does not match emulator input {}",
                self.block.ncols(),
                self.emulator.input_dim()
            )));
        }
        Ok(Matrix::from_fn(self.block.nrows(), p + self.block.ncols(), |i, j| {
            if j < p {
                theta[j]
            } else {
                self.block[(i, j - p)]
            }
        }))
    }
}

impl BlockEmulator for Broadcast<'_> {
    fn param_dim(&self) -> usize {
        self.emulator.input_dim() - self.block.ncols()
    }

    fn n_outputs(&self) -> usize {
        self.block.nrows()
    }

    fn predict_block(&self, theta: &[f64]) -> Result<PredictiveGaussian> {
        self.emulator.predict(&self.query(theta)?, true)
    }

    fn block_logpdf(
        &self,
        theta: &[f64],
        observed: &Vector,
        diagonal_only: bool,
        with_grad: bool,
    ) -> Result<(f64, Option<Vec<f64>>)> {
        let q = self.query(theta)?;
        if !with_grad {
            let pred = self.emulator.predict(&q, true)?;
            return Ok((logpdf_with_upstream(&pred, observed, diagonal_only)?.0, None));
        }
        let (value, gx) = self.emulator.logpdf_query_grad(&q, observed, diagonal_only)?;
        let grad = (0..theta.len()).map(|j| gx.column(j).sum()).collect();
        Ok((value, Some(grad)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::deep_kernel::MlpParams;
    use crate::kernel::KernelHyper;
    use crate::optim::finite_diff_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy(rng: &mut ChaCha8Rng, d: usize) -> ProjectedPredictor {
        let m = 5;
        let a = Matrix::from_fn(m, m, |_, _| rng.random_range(-0.2..0.2));
        ProjectedPredictor {
            hyper: KernelHyper::new(1.0, (0..d).map(|_| rng.random_range(0.6..1.4)).collect(), 0.05).unwrap(),
            mean_const: 0.1,
            points: Matrix::from_fn(m, d, |_, _| rng.random_range(-1.0..1.0)),
            weights: Vector::from_fn(m, |_, _| rng.random_range(-1.0..1.0)),
            root_plus: a.transpose(),
            root_minus: Matrix::zeros(0, m),
        }
    }

    fn check_theta_gradient(em: &GpEmulator, p: usize, rng: &mut ChaCha8Rng, diagonal: bool) {
        let block = Matrix::from_fn(3, em.input_dim() - p, |_, _| rng.random_range(-1.0..1.0));
        let b = Broadcast { emulator: em, block };
        let theta: Vec<f64> = (0..p).map(|_| rng.random_range(-0.8..0.8)).collect();
        let obs = Vector::from_fn(3, |_, _| rng.random_range(-1.0..1.0));
        let (_, g) = b.block_logpdf(&theta, &obs, diagonal, true).unwrap();
        let f = |t: &[f64]| b.block_logpdf(t, &obs, diagonal, false).unwrap().0;
        let idx: Vec<usize> = (0..p).collect();
        let err = finite_diff_check(f, &theta, &g.unwrap(), &idx, 1e-5);
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn theta_gradient_through_plain_emulator() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let em = GpEmulator::new(toy(&mut rng, 4), None);
        check_theta_gradient(&em, 2, &mut rng, false);
        check_theta_gradient(&em, 2, &mut rng, true);
    }

    #[test]
    fn theta_gradient_through_feature_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = MlpParams::init(&[5, 8, 2], &mut rng).unwrap();
        let em = GpEmulator::new(toy(&mut rng, 2), Some(net));
        check_theta_gradient(&em, 3, &mut rng, false);
    }

    #[test]
    fn broadcast_rows_append_block() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let em = GpEmulator::new(toy(&mut rng, 3), None);
        let block = Matrix::from_row_slice(2, 1, &[0.5, -0.5]);
        let b = Broadcast { emulator: &em, block };
        assert_eq!(b.param_dim(), 2);
        let q = b.query(&[0.1, 0.2]).unwrap();
        assert_eq!(q, Matrix::from_row_slice(2, 3, &[0.1, 0.2, 0.5, 0.1, 0.2, -0.5]));
        assert!(b.query(&[0.1]).is_err());
    }
}
