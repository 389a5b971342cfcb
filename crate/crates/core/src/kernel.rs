//! ARD squared-exponential kernel and its hyperparameters.
//!
//! k(x, x') = scale * exp(-1/2 * sum_i ((x_i - x'_i) / l_i)^2)
//!
//! Positive hyperparameters are optimized in log space; the noise variance
//! goes through a scaled logistic onto `[NOISE_MIN, NOISE_MAX]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

pub const NOISE_MIN: f64 = 1e-8;
pub const NOISE_MAX: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelHyper {
    /// Process variance.
    pub scale: f64,
    pub lengthscales: Vec<f64>,
    /// Likelihood noise variance, added to the diagonal of train-train covariances.
    pub noise: f64,
}

impl KernelHyper {
    pub fn new(scale: f64, lengthscales: Vec<f64>, noise: f64) -> Result<Self> {
        let hyper = KernelHyper {
            scale,
            lengthscales,
            noise,
        };
        hyper.validate()?;
        Ok(hyper)
    }

    /// Unit scale and lengthscales with the given noise.
    pub fn isotropic(dim: usize, lengthscale: f64, noise: f64) -> Self {
        KernelHyper {
            scale: 1.0,
            lengthscales: vec![lengthscale; dim],
            noise,
        }
    }

    pub fn dim(&self) -> usize {
        self.lengthscales.len()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::arg(format!("kernel scale must be positive, got {}", self.scale)));
        }
        if let Some(l) = self.lengthscales.iter().find(|l| !(**l > 0.0 && l.is_finite())) {
            return Err(Error::arg(format!("lengthscales must be positive, got {l}")));
        }
        if !(NOISE_MIN..=NOISE_MAX).contains(&self.noise) {
            return Err(Error::arg(format!(
                "noise {} outside [{NOISE_MIN:e}, {NOISE_MAX}]",
                self.noise
            )));
        }
        Ok(())
    }

    /// Number of unconstrained coordinates: log scale, log lengthscales, noise logit.
    pub fn n_free(&self) -> usize {
        self.dim() + 2
    }

    /// `[log scale, log l_1, .., log l_d, noise_logit]`
    pub fn to_unconstrained(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_free());
        out.push(self.scale.ln());
        out.extend(self.lengthscales.iter().map(|l| l.ln()));
        out.push(noise_to_logit(self.noise));
        out
    }

    pub fn from_unconstrained(raw: &[f64]) -> Self {
        let d = raw.len() - 2;
        KernelHyper {
            scale: raw[0].exp(),
            lengthscales: raw[1..=d].iter().map(|v| v.exp()).collect(),
            noise: logit_to_noise(raw[d + 1]),
        }
    }

    /// Derivative of the noise variance with respect to its logit.
    pub fn noise_jacobian(&self) -> f64 {
        let s = (self.noise - NOISE_MIN) / (NOISE_MAX - NOISE_MIN);
        (NOISE_MAX - NOISE_MIN) * s * (1.0 - s)
    }
}

/// Hyperparameters followed by the constant prior mean, all unconstrained.
pub fn pack_hyper_mean(hyper: &KernelHyper, mean_const: f64) -> Vec<f64> {
    let mut out = hyper.to_unconstrained();
    out.push(mean_const);
    out
}

pub fn unpack_hyper_mean(raw: &[f64]) -> (KernelHyper, f64) {
    let n = raw.len();
    (KernelHyper::from_unconstrained(&raw[..n - 1]), raw[n - 1])
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit_to_noise(raw: f64) -> f64 {
    (NOISE_MIN + (NOISE_MAX - NOISE_MIN) * sigmoid(raw)).clamp(NOISE_MIN, NOISE_MAX)
}

pub fn noise_to_logit(noise: f64) -> f64 {
    let s = ((noise - NOISE_MIN) / (NOISE_MAX - NOISE_MIN)).clamp(1e-300, 1.0 - 1e-16);
    (s / (1.0 - s)).ln()
}

/// Kernel value between two points.
pub fn ard_se_kernel(x: &[f64], x_prime: &[f64], hyper: &KernelHyper) -> Result<f64> {
    if x.len() != x_prime.len() || x.len() != hyper.dim() {
        return Err(Error::dim(format!(
            "kernel inputs of length {} and {} with {} lengthscales",
            x.len(),
            x_prime.len(),
            hyper.dim()
        )));
    }
    let r2: f64 = x
        .iter()
        .zip(x_prime)
        .zip(&hyper.lengthscales)
        .map(|((a, b), l)| {
            let t = (a - b) / l;
            t * t
        })
        .sum();
    Ok(hyper.scale * (-0.5 * r2).exp())
}

/// Rows scaled by inverse lengthscales, stored row-major for tight inner loops.
fn scaled_rows(a: &Matrix, hyper: &KernelHyper) -> Vec<f64> {
    let (n, d) = a.shape();
    let mut out = vec![0.0; n * d];
    for j in 0..d {
        let inv = 1.0 / hyper.lengthscales[j];
        for i in 0..n {
            out[i * d + j] = a[(i, j)] * inv;
        }
    }
    out
}

/// Covariance matrix between the rows of `a` and the rows of `b`.
pub fn gram(a: &Matrix, b: &Matrix, hyper: &KernelHyper) -> Result<Matrix> {
    let d = hyper.dim();
    if a.ncols() != d || b.ncols() != d {
        return Err(Error::dim(format!(
            "gram inputs have {} and {} columns, kernel expects {d}",
            a.ncols(),
            b.ncols()
        )));
    }
    let (na, nb) = (a.nrows(), b.nrows());
    let sa = scaled_rows(a, hyper);
    let sb = scaled_rows(b, hyper);
    let mut k = Matrix::zeros(na, nb);
    for j in 0..nb {
        let bj = &sb[j * d..(j + 1) * d];
        for i in 0..na {
            let ai = &sa[i * d..(i + 1) * d];
            let mut r2 = 0.0;
            for t in 0..d {
                let diff = ai[t] - bj[t];
                r2 += diff * diff;
            }
            k[(i, j)] = hyper.scale * (-0.5 * r2).exp();
        }
    }
    Ok(k)
}

/// Symmetric Gram matrix of `a` with itself; the diagonal is exactly `scale`.
pub fn gram_sym(a: &Matrix, hyper: &KernelHyper) -> Result<Matrix> {
    let mut k = gram(a, a, hyper)?;
    for i in 0..k.nrows() {
        k[(i, i)] = hyper.scale;
        for j in 0..i {
            let v = k[(i, j)];
            k[(j, i)] = v;
        }
    }
    Ok(k)
}

/// Gradients of `sum_ij upstream_ij * K_ij` where `K = gram(a, b)`.
#[derive(Debug, Clone)]
pub struct GramGrad {
    pub log_scale: f64,
    pub log_lengthscales: Vec<f64>,
    pub wrt_a: Option<Matrix>,
    pub wrt_b: Option<Matrix>,
}

/// Which input-side gradients [`gram_backprop`] should produce.
#[derive(Debug, Clone, Copy, Default)]
pub struct InputGrads {
    pub a: bool,
    pub b: bool,
}

/// Reverse-mode pass through `K = gram(a, b)` given the already computed `k`.
pub fn gram_backprop(
    a: &Matrix,
    b: &Matrix,
    k: &Matrix,
    upstream: &Matrix,
    hyper: &KernelHyper,
    inputs: InputGrads,
) -> GramGrad {
    let d = hyper.dim();
    let (na, nb) = (a.nrows(), b.nrows());
    debug_assert_eq!(k.shape(), (na, nb));
    debug_assert_eq!(upstream.shape(), (na, nb));
    let inv_l2: Vec<f64> = hyper.lengthscales.iter().map(|l| 1.0 / (l * l)).collect();
    let ra: Vec<f64> = (0..na * d).map(|idx| a[(idx / d, idx % d)]).collect();
    let rb: Vec<f64> = (0..nb * d).map(|idx| b[(idx / d, idx % d)]).collect();

    let mut log_scale = 0.0;
    let mut log_len = vec![0.0; d];
    let mut ga = vec![0.0; if inputs.a { na * d } else { 0 }];
    let mut gb = vec![0.0; if inputs.b { nb * d } else { 0 }];
    let mut diff = vec![0.0; d];

    for j in 0..nb {
        let bj = &rb[j * d..(j + 1) * d];
        for i in 0..na {
            let w = upstream[(i, j)] * k[(i, j)];
            if w == 0.0 {
                continue;
            }
            log_scale += w;
            let ai = &ra[i * d..(i + 1) * d];
            for t in 0..d {
                diff[t] = (ai[t] - bj[t]) * inv_l2[t];
                log_len[t] += w * (ai[t] - bj[t]) * diff[t];
            }
            if inputs.a {
                for t in 0..d {
                    ga[i * d + t] -= w * diff[t];
                }
            }
            if inputs.b {
                for t in 0..d {
                    gb[j * d + t] += w * diff[t];
                }
            }
        }
    }
    GramGrad {
        log_scale,
        log_lengthscales: log_len,
        wrt_a: inputs.a.then(|| Matrix::from_row_slice(na, d, &ga)),
        wrt_b: inputs.b.then(|| Matrix::from_row_slice(nb, d, &gb)),
    }
}
