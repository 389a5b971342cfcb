//! Dense GP regression: exact log marginal likelihood and predictive distribution.

use std::sync::OnceLock;

use crate::error::{Error, Result};
use crate::kernel::{gram, gram_backprop, gram_sym, pack_hyper_mean, unpack_hyper_mean, InputGrads, KernelHyper};
use crate::linalg::{chol, CholFactor, Matrix, Vector, LN_2PI};
use crate::optim::{lbfgs_minimize, OptimizerConfig};
use crate::predictor::{PredictiveGaussian, ProjectedPredictor};

#[derive(Debug, Clone)]
pub struct ExactGp {
    train_inputs: Matrix,
    train_targets: Vector,
    hyper: KernelHyper,
    mean_const: f64,
    /// Factor of K(X, X) + noise·I; reset whenever data or hyperparameters change.
    cached_factor: OnceLock<CholFactor>,
}

impl ExactGp {
    pub fn new(train_inputs: Matrix, train_targets: Vector, hyper: KernelHyper, mean_const: f64) -> Result<Self> {
        if train_inputs.nrows() != train_targets.len() {
            return Err(Error::dim(format!(
                "{} input rows but {} targets",
                train_inputs.nrows(),
                train_targets.len()
            )));
        }
        if train_inputs.nrows() == 0 {
            return Err(Error::arg("exact GP needs at least one training point"));
        }
        if train_inputs.ncols() != hyper.dim() {
            return Err(Error::dim(format!(
                "inputs have {} columns, kernel has {} lengthscales",
                train_inputs.ncols(),
                hyper.dim()
            )));
        }
        hyper.validate()?;
        Ok(ExactGp {
            train_inputs,
            train_targets,
            hyper,
            mean_const,
            cached_factor: OnceLock::new(),
        })
    }

    pub fn inputs(&self) -> &Matrix {
        &self.train_inputs
    }

    pub fn targets(&self) -> &Vector {
        &self.train_targets
    }

    pub fn hyper(&self) -> &KernelHyper {
        &self.hyper
    }

    pub fn mean_const(&self) -> f64 {
        self.mean_const
    }

    pub fn set_params(&mut self, hyper: KernelHyper, mean_const: f64) -> Result<()> {
        if hyper.dim() != self.train_inputs.ncols() {
            return Err(Error::dim("hyperparameter dimension changed"));
        }
        hyper.validate()?;
        self.hyper = hyper;
        self.mean_const = mean_const;
        self.cached_factor = OnceLock::new();
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.train_targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.train_targets.is_empty()
    }

    fn train_cov(&self) -> Result<Matrix> {
        let mut k = gram_sym(&self.train_inputs, &self.hyper)?;
        for i in 0..k.nrows() {
            k[(i, i)] += self.hyper.noise;
        }
        Ok(k)
    }

    fn factor(&self) -> Result<&CholFactor> {
        if let Some(f) = self.cached_factor.get() {
            return Ok(f);
        }
        let f = chol(&self.train_cov()?)?;
        Ok(self.cached_factor.get_or_init(|| f))
    }

    fn residual(&self) -> Vector {
        self.train_targets.add_scalar(-self.mean_const)
    }

    pub fn log_marginal_likelihood(&self) -> Result<f64> {
        let f = self.factor()?;
        let z = f.solve_lower_vec(&self.residual());
        Ok(-0.5 * (z.norm_squared() + f.log_det() + self.len() as f64 * LN_2PI))
    }

    /// Value and gradient in `[log scale, log lengthscales.., noise logit, mean]`.
    pub fn lml_with_grad(&self) -> Result<(f64, Vec<f64>)> {
        let f = self.factor()?;
        let r = self.residual();
        let alpha = f.solve_vec(&r);
        let value = -0.5 * (r.dot(&alpha) + f.log_det() + self.len() as f64 * LN_2PI);
        let kinv = f.inverse();
        let g_k = 0.5 * (&alpha * alpha.transpose() - &kinv);
        let k = gram_sym(&self.train_inputs, &self.hyper)?;
        let gk = gram_backprop(
            &self.train_inputs,
            &self.train_inputs,
            &k,
            &g_k,
            &self.hyper,
            InputGrads::default(),
        );
        let mut grad = Vec::with_capacity(self.hyper.n_free() + 1);
        grad.push(gk.log_scale);
        grad.extend(gk.log_lengthscales);
        grad.push(g_k.trace() * self.hyper.noise_jacobian());
        grad.push(alpha.sum());
        Ok((value, grad))
    }

    /// Cached prediction statistics: support points X, weights K⁻¹r, correction
    /// K⁻¹ held as `L⁻ᵀL⁻¹`.
    pub fn predictor(&self) -> Result<ProjectedPredictor> {
        let f = self.factor()?;
        Ok(ProjectedPredictor {
            hyper: self.hyper.clone(),
            mean_const: self.mean_const,
            points: self.train_inputs.clone(),
            weights: f.solve_vec(&self.residual()),
            root_plus: f.solve_lower(&Matrix::identity(f.dim(), f.dim())),
            root_minus: Matrix::zeros(0, f.dim()),
        })
    }

    /// Latent predictive distribution at the query rows.
    pub fn predict(&self, query: &Matrix) -> Result<PredictiveGaussian> {
        if query.ncols() != self.train_inputs.ncols() {
            return Err(Error::dim(format!(
                "query has {} columns, model expects {}",
                query.ncols(),
                self.train_inputs.ncols()
            )));
        }
        let f = self.factor()?;
        let kqx = gram(query, &self.train_inputs, &self.hyper)?;
        let alpha = f.solve_vec(&self.residual());
        let mean = &kqx * alpha + Vector::from_element(query.nrows(), self.mean_const);
        let v = f.solve_lower(&kqx.transpose());
        let cov = gram_sym(query, &self.hyper)? - v.transpose() * v;
        Ok(PredictiveGaussian::finalize(mean, cov))
    }

    /// Maximizes the LML over hyperparameters and mean with LBFGS.
    ///
    /// Returns the LML trace; parameters are left at the best point found.
    pub fn fit_hyper(&mut self, config: &OptimizerConfig, max_iters: usize) -> Result<Vec<f64>> {
        let x0 = pack_hyper_mean(&self.hyper, self.mean_const);
        let template = self.clone();
        let objective = |raw: &[f64]| {
            let (h, mu) = unpack_hyper_mean(raw);
            let mut gp = template.clone();
            gp.set_params(h, mu).ok()?;
            let (v, g) = gp.lml_with_grad().ok()?;
            Some((-v, g.into_iter().map(|x| -x).collect()))
        };
        let res = lbfgs_minimize(objective, &x0, config, max_iters)?;
        let (h, mu) = unpack_hyper_mean(&res.x);
        self.set_params(h, mu)?;
        Ok(res.trace.iter().map(|v| -v).collect())
    }
}

/// [`ExactGp::log_marginal_likelihood`]
pub fn log_marginal_likelihood(gp: &ExactGp) -> Result<f64> {
    gp.log_marginal_likelihood()
}

/// [`ExactGp::predict`]
pub fn predict(gp: &ExactGp, query: &Matrix) -> Result<PredictiveGaussian> {
    gp.predict(query)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::finite_diff_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_gp(rng: &mut ChaCha8Rng, n: usize, d: usize, noise: f64) -> ExactGp {
        let x = Matrix::from_fn(n, d, |_, _| rng.random_range(-1.0..1.0));
        let y = Vector::from_fn(n, |i, _| (2.0 * x[(i, 0)]).sin() + rng.random_range(-0.1..0.1));
        let ls = (0..d).map(|_| rng.random_range(0.4..1.5)).collect();
        let hyper = KernelHyper::new(rng.random_range(0.5..2.0), ls, noise).unwrap();
        ExactGp::new(x, y, hyper, rng.random_range(-0.3..0.3)).unwrap()
    }

    /// Explicit inverse and determinant, no Cholesky.
    fn dense_lml(gp: &ExactGp) -> f64 {
        let mut k = Matrix::from_fn(gp.len(), gp.len(), |i, j| {
            let xi: Vec<f64> = gp.inputs().row(i).iter().copied().collect();
            let xj: Vec<f64> = gp.inputs().row(j).iter().copied().collect();
            crate::kernel::ard_se_kernel(&xi, &xj, gp.hyper()).unwrap()
        });
        for i in 0..gp.len() {
            k[(i, i)] += gp.hyper().noise;
        }
        let r = gp.targets().add_scalar(-gp.mean_const());
        let quad = r.dot(&(k.clone().try_inverse().unwrap() * &r));
        -0.5 * (quad + k.determinant().ln() + gp.len() as f64 * (2.0 * std::f64::consts::PI).ln())
    }

    #[test]
    fn single_point_at_mean() {
        let gp = ExactGp::new(
            Matrix::from_element(1, 1, 0.3),
            Vector::from_element(1, 0.5),
            KernelHyper::new(1.0, vec![1.0], 1e-8).unwrap(),
            0.5,
        )
        .unwrap();
        let expect = -0.5 * (2.0 * std::f64::consts::PI).ln();
        assert!((gp.log_marginal_likelihood().unwrap() - expect).abs() < 1e-7);
    }

    #[test]
    fn lml_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let gp = random_gp(&mut rng, 5, 2, 0.05);
        let a = gp.log_marginal_likelihood().unwrap();
        let b = dense_lml(&gp);
        assert!((a - b).abs() <= 1e-8 * b.abs().max(1.0), "{a} {b}");
    }

    #[test]
    fn large_scale_favoured_by_large_residuals() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Matrix::from_fn(6, 1, |_, _| rng.random_range(-1.0..1.0));
        let y = Vector::from_fn(6, |_, _| 20.0 + rng.random_range(-5.0..5.0));
        let lml = |scale: f64| {
            let h = KernelHyper::new(scale, vec![0.5], 1e-3).unwrap();
            ExactGp::new(x.clone(), y.clone(), h, 0.0).unwrap().log_marginal_likelihood().unwrap()
        };
        assert!(lml(10.0) > lml(0.01));
    }

    #[test]
    fn interpolates_training_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let gp = random_gp(&mut rng, 8, 2, 1e-8);
        let q = gp.inputs().rows(2, 1).into_owned();
        let pred = gp.predict(&q).unwrap();
        assert!((pred.mean[0] - gp.targets()[2]).abs() < 1e-4);
        assert!(pred.cov[(0, 0)] < 1e-4);
    }

    #[test]
    fn far_query_reverts_to_prior() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let gp = random_gp(&mut rng, 8, 2, 1e-4);
        let q = Matrix::from_row_slice(1, 2, &[1e3, -1e3]);
        let pred = gp.predict(&q).unwrap();
        assert!((pred.mean[0] - gp.mean_const()).abs() < 1e-6);
        assert!((pred.cov[(0, 0)] - gp.hyper().scale).abs() < 1e-6);
    }

    #[test]
    fn predict_matches_dense_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let gp = random_gp(&mut rng, 6, 3, 0.02);
        let q = Matrix::from_fn(3, 3, |_, _| rng.random_range(-1.0..1.0));
        let pred = gp.predict(&q).unwrap();
        let mut k = gram(gp.inputs(), gp.inputs(), gp.hyper()).unwrap();
        for i in 0..6 {
            k[(i, i)] += gp.hyper().noise;
        }
        let kinv = k.try_inverse().unwrap();
        let kqx = gram(&q, gp.inputs(), gp.hyper()).unwrap();
        let r = gp.targets().add_scalar(-gp.mean_const());
        let mean = (&kqx * &kinv * r).add_scalar(gp.mean_const());
        let cov = gram(&q, &q, gp.hyper()).unwrap() - &kqx * &kinv * kqx.transpose();
        assert!((pred.mean - mean).amax() < 1e-8);
        assert!((pred.cov - cov).amax() < 1e-8);
    }

    #[test]
    fn predictor_agrees_with_direct_predict() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let gp = random_gp(&mut rng, 10, 2, 0.01);
        let q = Matrix::from_fn(4, 2, |_, _| rng.random_range(-1.0..1.0));
        let a = gp.predict(&q).unwrap();
        let b = gp.predictor().unwrap().predict(&q, false).unwrap();
        assert!((a.mean - b.mean).amax() < 1e-9);
        assert!((a.cov - b.cov).amax() < 1e-9);
    }

    #[test]
    fn variance_bounded_by_prior_plus_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let gp = random_gp(&mut rng, 12, 2, 0.1);
        let q = Matrix::from_fn(20, 2, |_, _| rng.random_range(-3.0..3.0));
        let pred = gp.predict(&q).unwrap();
        let bound = gp.hyper().scale + gp.hyper().noise + 1e-10;
        assert!(pred.cov.diagonal().iter().all(|v| *v <= bound && *v >= 0.0));
    }

    #[test]
    fn lml_is_row_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let gp = random_gp(&mut rng, 9, 2, 0.05);
        let perm = [3, 0, 8, 1, 7, 2, 6, 4, 5];
        let x = Matrix::from_fn(9, 2, |i, j| gp.inputs()[(perm[i], j)]);
        let y = Vector::from_fn(9, |i, _| gp.targets()[perm[i]]);
        let gp2 = ExactGp::new(x, y, gp.hyper().clone(), gp.mean_const()).unwrap();
        let (a, b) = (gp.log_marginal_likelihood().unwrap(), gp2.log_marginal_likelihood().unwrap());
        assert!((a - b).abs() < 1e-10 * a.abs().max(1.0));
    }

    #[test]
    fn mean_contracts_with_noise() {
        let x = Matrix::from_column_slice(3, 1, &[-1.5, 0.0, 1.2]);
        let y = Vector::from_vec(vec![1.0, 2.0, 0.5]);
        let q = Matrix::from_row_slice(1, 1, &[0.1]);
        let dev: Vec<f64> = [0.01, 0.1, 0.9]
            .iter()
            .map(|&noise| {
                let h = KernelHyper::new(1.0, vec![0.7], noise).unwrap();
                let gp = ExactGp::new(x.clone(), y.clone(), h, 0.0).unwrap();
                gp.predict(&q).unwrap().mean[0].abs()
            })
            .collect();
        assert!(dev[0] > dev[1] && dev[1] > dev[2], "{dev:?}");
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let gp = random_gp(&mut rng, 10, 3, 0.05);
        let x0 = pack_hyper_mean(gp.hyper(), gp.mean_const());
        let (_, g) = gp.lml_with_grad().unwrap();
        let f = |raw: &[f64]| {
            let (h, mu) = unpack_hyper_mean(raw);
            let mut m = gp.clone();
            m.set_params(h, mu).unwrap();
            m.log_marginal_likelihood().unwrap()
        };
        let idx: Vec<usize> = (0..x0.len()).collect();
        let err = finite_diff_check(f, &x0, &g, &idx, 1e-5);
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn fitting_does_not_decrease_lml() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut gp = random_gp(&mut rng, 20, 1, 0.3);
        let before = gp.log_marginal_likelihood().unwrap();
        gp.fit_hyper(&OptimizerConfig::lbfgs(0.01), 50).unwrap();
        assert!(gp.log_marginal_likelihood().unwrap() >= before);
    }

    #[test]
    fn mismatched_shapes_rejected() {
        let h = KernelHyper::isotropic(2, 1.0, 0.1);
        assert!(ExactGp::new(Matrix::zeros(3, 2), Vector::zeros(2), h.clone(), 0.0).is_err());
        let gp = ExactGp::new(Matrix::zeros(1, 2), Vector::zeros(1), h, 0.0).unwrap();
        assert!(gp.predict(&Matrix::zeros(1, 3)).is_err());
    }
}
