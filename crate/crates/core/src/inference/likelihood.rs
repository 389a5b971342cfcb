use crate::emulator::BlockEmulator;
use crate::error::{Error, Result};
use crate::linalg::Vector;

/// A differentiable log-density over simulator parameters θ.
pub trait LogDensity {
    fn dim(&self) -> usize;

    /// Value and, if requested, gradient at θ.
    fn eval(&self, theta: &[f64], with_grad: bool) -> Result<(f64, Option<Vec<f64>>)>;
}

/// Wraps a closure returning value and gradient.
pub struct FnDensity<F> {
    pub dim: usize,
    pub f: F,
}

impl<F> LogDensity for FnDensity<F>
where
    F: Fn(&[f64]) -> (f64, Vec<f64>),
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval(&self, theta: &[f64], with_grad: bool) -> Result<(f64, Option<Vec<f64>>)> {
        let (v, g) = (self.f)(theta);
        Ok((v, with_grad.then_some(g)))
    }
}

/// `log N(observed | emulator predictive at θ)` in standardized units.
pub struct ObsLikelihood<'a> {
    pub emulator: &'a dyn BlockEmulator,
    pub observed: Vector,
    pub diagonal_only: bool,
    /// Central-difference gradients instead of the analytic ones (debugging).
    pub fd_gradient: bool,
}

impl<'a> ObsLikelihood<'a> {
    pub fn new(emulator: &'a dyn BlockEmulator, observed: Vector) -> Result<Self> {
        if observed.len() != emulator.n_outputs() {
            return Err(Error::dim(format!(
                "{} observations for {} emulator outputs",
                observed.len(),
                emulator.n_outputs()
            )));
        }
        Ok(ObsLikelihood {
            emulator,
            observed,
            diagonal_only: false,
            fd_gradient: false,
        })
    }

    fn raw(&self, theta: &[f64], with_grad: bool) -> Result<(f64, Option<Vec<f64>>)> {
        let wrap = |e: Error| Error::Evaluation {
            theta: theta.to_vec(),
            reason: e.to_string(),
        };
        if theta.iter().any(|t| !t.is_finite()) {
            return Err(wrap(Error::arg("non-finite θ")));
        }
        let (v, g) = self
            .emulator
            .block_logpdf(theta, &self.observed, self.diagonal_only, with_grad && !self.fd_gradient)
            .map_err(wrap)?;
        if !v.is_finite() {
            return Err(wrap(Error::arg("non-finite log-likelihood")));
        }
        if with_grad && self.fd_gradient {
            let h = 1e-6;
            let mut grad = Vec::with_capacity(theta.len());
            let mut t = theta.to_vec();
            for k in 0..theta.len() {
                t[k] = theta[k] + h;
                let fp = self.emulator.block_logpdf(&t, &self.observed, self.diagonal_only, false).map_err(wrap)?.0;
                t[k] = theta[k] - h;
                let fm = self.emulator.block_logpdf(&t, &self.observed, self.diagonal_only, false).map_err(wrap)?.0;
                t[k] = theta[k];
                grad.push((fp - fm) / (2.0 * h));
            }
            return Ok((v, Some(grad)));
        }
        Ok((v, g))
    }
}

impl LogDensity for ObsLikelihood<'_> {
    fn dim(&self) -> usize {
        self.emulator.param_dim()
    }

    fn eval(&self, theta: &[f64], with_grad: bool) -> Result<(f64, Option<Vec<f64>>)> {
        self.raw(theta, with_grad)
    }
}

/// Log-likelihood of `observed` (standardized) under the emulator's joint
/// predictive over the observable block at θ (scaled parameters).
pub fn obs_log_likelihood(
    emulator: &dyn BlockEmulator,
    theta: &[f64],
    observed: &Vector,
    diagonal_only: bool,
) -> Result<f64> {
    let mut lik = ObsLikelihood::new(emulator, observed.clone())?;
    lik.diagonal_only = diagonal_only;
    Ok(lik.eval(theta, false)?.0)
}
