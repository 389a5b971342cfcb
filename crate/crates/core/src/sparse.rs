//! Inducing-point approximations: the collapsed sparse bound (SGP) and the
//! stochastic variational GP (SVGP), each optionally behind an MLP feature map.
//!
//! The objectives are evaluated in feature space; gradients with respect to
//! the features are chained through the MLP when a feature map is present.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::deep_kernel::MlpParams;
use crate::error::{Error, Result};
use crate::kernel::{gram, gram_backprop, gram_sym, pack_hyper_mean, unpack_hyper_mean, InputGrads, KernelHyper};
use crate::linalg::{chol, chol_jitter, symmetrize, Matrix, Vector, LN_2PI};
use crate::optim::QGradient;
use crate::predictor::{PredictiveGaussian, ProjectedPredictor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InducingPoints {
    #[serde(with = "crate::serde_matrix")]
    pub locations: Matrix,
}

impl InducingPoints {
    pub fn new(locations: Matrix) -> Result<Self> {
        if locations.nrows() == 0 {
            return Err(Error::arg("need at least one inducing point"));
        }
        Ok(InducingPoints { locations })
    }

    /// Distinct rows of `x` chosen uniformly at random.
    pub fn random_subset<R: Rng + ?Sized>(x: &Matrix, m: usize, rng: &mut R) -> Result<Self> {
        if m == 0 || m > x.nrows() {
            return Err(Error::arg(format!(
                "cannot choose {m} inducing points from {} rows",
                x.nrows()
            )));
        }
        let idx = sample(rng, x.nrows(), m).into_vec();
        Self::new(x.select_rows(idx.iter()))
    }

    pub fn len(&self) -> usize {
        self.locations.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.locations.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.locations.ncols()
    }
}

/// Inducing points with the Gaussian q(u) = N(q_mean, L Lᵀ).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariationalState {
    pub inducing: InducingPoints,
    #[serde(with = "crate::serde_matrix::vector")]
    pub q_mean: Vector,
    /// Lower-triangular with positive diagonal.
    #[serde(with = "crate::serde_matrix")]
    pub q_cov_factor: Matrix,
}

impl VariationalState {
    /// q(u) equal to the prior N(mean_const·1, K(Z, Z)).
    pub fn prior(inducing: InducingPoints, hyper: &KernelHyper, mean_const: f64) -> Result<Self> {
        let p = gram_sym(&inducing.locations, hyper)?;
        let l = chol(&p)?.l();
        Ok(VariationalState {
            q_mean: Vector::from_element(inducing.len(), mean_const),
            q_cov_factor: l,
            inducing,
        })
    }

    pub fn q_cov(&self) -> Matrix {
        &self.q_cov_factor * self.q_cov_factor.transpose()
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.inducing.len();
        if self.q_mean.len() != m || self.q_cov_factor.shape() != (m, m) {
            return Err(Error::dim("variational parameters do not match the inducing count"));
        }
        let l = &self.q_cov_factor;
        for i in 0..m {
            if !(l[(i, i)] > 0.0) {
                return Err(Error::arg(format!("covariance factor diagonal {i} is not positive")));
            }
            for j in (i + 1)..m {
                if l[(i, j)] != 0.0 {
                    return Err(Error::arg("covariance factor is not lower triangular"));
                }
            }
        }
        Ok(())
    }
}

/// Collapsed-bound value and gradients in feature space.
#[derive(Debug, Clone)]
pub struct CollapsedEval {
    pub value: f64,
    /// `[log scale, log lengthscales.., noise logit, mean]`
    pub hyper_mean: Vec<f64>,
    pub inducing: Matrix,
    pub features: Option<Matrix>,
}

/// Titsias bound `log N(y | μ1, Q + σ²I) − tr(K − Q) / (2σ²)` with
/// `Q = Kₙₘ Kₘₘ⁻¹ Kₘₙ`, optionally with gradients.
pub fn collapsed_eval(
    hyper: &KernelHyper,
    mean_const: f64,
    z: &Matrix,
    f: &Matrix,
    y: &Vector,
    with_grad: bool,
    feature_grad: bool,
) -> Result<(f64, Option<CollapsedEval>)> {
    let n = f.nrows();
    if y.len() != n || n == 0 {
        return Err(Error::dim(format!("{n} feature rows but {} targets", y.len())));
    }
    let s2 = hyper.noise;
    let sig = s2.sqrt();
    let p = gram_sym(z, hyper)?;
    let lp = chol(&p)?;
    let u = gram(z, f, hyper)?;
    let r = y.add_scalar(-mean_const);
    let a = lp.solve_lower(&u) / sig;
    let m = z.nrows();
    let b = Matrix::identity(m, m) + &a * a.transpose();
    let lb = chol(&b)?;
    let c = lb.solve_lower_vec(&(&a * &r)) / sig;
    let rr = r.norm_squared();
    let a2 = a.norm_squared();
    let nf = n as f64;
    let value = -0.5 * nf * (LN_2PI + s2.ln()) - 0.5 * lb.log_det() - 0.5 * rr / s2 + 0.5 * c.norm_squared()
        - 0.5 * nf * hyper.scale / s2
        + 0.5 * a2;
    if !with_grad {
        return Ok((value, None));
    }

    let w = lp.solve_upper_vec(&lb.solve_upper_vec(&c));
    let pinv_u = lp.solve_upper(&a) * sig;
    let minv_u = lp.solve_upper(&lb.solve(&a)) * sig;
    let pinv = lp.inverse();
    let linv = lp.solve_lower(&Matrix::identity(m, m));
    let minv = linv.transpose() * lb.inverse() * &linv;
    let ut_w = u.transpose() * &w;

    let g_p = 0.5 * (&pinv - &minv - &w * w.transpose() - &pinv_u * pinv_u.transpose() / s2);
    let g_u = (-&minv_u + &w * r.transpose() - &w * ut_w.transpose() + &pinv_u) / s2;

    let tr_minv_uu = minv_u.component_mul(&u).sum();
    let tr_pinv_uu = a2 * s2;
    let d_s2 = (0.5 * tr_minv_uu + 0.5 * rr + 0.5 * ut_w.norm_squared() - r.dot(&ut_w) + 0.5 * nf * hyper.scale
        - 0.5 * tr_pinv_uu)
        / (s2 * s2)
        - 0.5 * nf / s2;
    let d_mu = (&r - &ut_w).sum() / s2;

    let bp_p = gram_backprop(z, z, &p, &g_p, hyper, InputGrads { a: true, b: true });
    let bp_u = gram_backprop(z, f, &u, &g_u, hyper, InputGrads { a: true, b: feature_grad });

    let mut hyper_mean = Vec::with_capacity(hyper.n_free() + 1);
    hyper_mean.push(bp_p.log_scale + bp_u.log_scale - 0.5 * nf * hyper.scale / s2);
    hyper_mean.extend(bp_p.log_lengthscales.iter().zip(&bp_u.log_lengthscales).map(|(x, y)| x + y));
    hyper_mean.push(d_s2 * hyper.noise_jacobian());
    hyper_mean.push(d_mu);

    let inducing = bp_p.wrt_a.expect("requested") + bp_p.wrt_b.expect("requested") + bp_u.wrt_a.expect("requested");
    Ok((
        value,
        Some(CollapsedEval {
            value,
            hyper_mean,
            inducing,
            features: bp_u.wrt_b,
        }),
    ))
}

/// Projected-process predictor of the collapsed model: weights `M⁻¹Kₘₙr/σ²`,
/// correction `Kₘₘ⁻¹ − M⁻¹` with `M = Kₘₘ + KₘₙKₙₘ/σ²`.
pub fn collapsed_predictor(
    hyper: &KernelHyper,
    mean_const: f64,
    z: &Matrix,
    f: &Matrix,
    y: &Vector,
) -> Result<ProjectedPredictor> {
    let post = collapsed_posterior(hyper, mean_const, z, f, y)?;
    Ok(ProjectedPredictor {
        hyper: hyper.clone(),
        mean_const,
        points: z.clone(),
        weights: post.weights,
        root_plus: post.kmm_root,
        root_minus: post.m_root,
    })
}

struct CollapsedPosterior {
    kmm: Matrix,
    m_inv: Matrix,
    weights: Vector,
    /// `Lₚ⁻¹`, so `Kₘₘ⁻¹ = rootᵀroot`.
    kmm_root: Matrix,
    /// `M⁻¹ = rootᵀroot`.
    m_root: Matrix,
}

fn collapsed_posterior(
    hyper: &KernelHyper,
    mean_const: f64,
    z: &Matrix,
    f: &Matrix,
    y: &Vector,
) -> Result<CollapsedPosterior> {
    if y.len() != f.nrows() {
        return Err(Error::dim(format!("{} feature rows but {} targets", f.nrows(), y.len())));
    }
    let s2 = hyper.noise;
    let sig = s2.sqrt();
    let m = z.nrows();
    let p = gram_sym(z, hyper)?;
    let lp = chol(&p)?;
    let u = gram(z, f, hyper)?;
    let r = y.add_scalar(-mean_const);
    let a = lp.solve_lower(&u) / sig;
    let lb = chol(&(Matrix::identity(m, m) + &a * a.transpose()))?;
    let c = lb.solve_lower_vec(&(&a * &r)) / sig;
    let w = lp.solve_upper_vec(&lb.solve_upper_vec(&c));
    let linv = lp.solve_lower(&Matrix::identity(m, m));
    let m_root = lb.solve_lower(&linv);
    let mut m_inv = m_root.transpose() * &m_root;
    symmetrize(&mut m_inv);
    Ok(CollapsedPosterior {
        kmm: p,
        m_inv,
        weights: w,
        kmm_root: linv,
        m_root,
    })
}

/// The q(u) maximizing the full-batch ELBO for fixed hyperparameters:
/// Σ = Kₘₘ M⁻¹ Kₘₘ, μ = μ·1 + Kₘₘ M⁻¹ Kₘₙ r / σ².
pub fn optimal_variational(
    hyper: &KernelHyper,
    mean_const: f64,
    inducing: &InducingPoints,
    f: &Matrix,
    y: &Vector,
) -> Result<VariationalState> {
    let CollapsedPosterior {
        kmm: p,
        m_inv: minv,
        weights: w,
        ..
    } = collapsed_posterior(hyper, mean_const, &inducing.locations, f, y)?;
    let mut cov = &p * minv * &p;
    symmetrize(&mut cov);
    let q_mean = (&p * w).add_scalar(mean_const);
    Ok(VariationalState {
        inducing: inducing.clone(),
        q_mean,
        q_cov_factor: chol(&cov)?.l(),
    })
}

/// ELBO value and gradients in feature space.
#[derive(Debug, Clone)]
pub struct ElboEval {
    pub value: f64,
    pub hyper_mean: Vec<f64>,
    pub inducing: Matrix,
    pub q_mean: Vector,
    /// Symmetric gradient in Σᵤ, as used by natural-gradient steps.
    pub q_cov: Matrix,
    /// Gradient in the lower-triangular factor entries.
    pub q_factor: Matrix,
    pub features: Option<Matrix>,
}

/// Mini-batch ELBO `(n_total/b) Σ E_q log N(yᵢ | fᵢ, σ²) − KL(q(u) ‖ p(u))`.
pub fn elbo_eval(
    hyper: &KernelHyper,
    mean_const: f64,
    vs: &VariationalState,
    f: &Matrix,
    y: &Vector,
    n_total: usize,
    with_grad: bool,
    feature_grad: bool,
) -> Result<(f64, Option<ElboEval>)> {
    let b = f.nrows();
    if y.len() != b || b == 0 {
        return Err(Error::dim(format!("{b} batch rows but {} targets", y.len())));
    }
    if n_total < b {
        return Err(Error::arg(format!("n_total {n_total} smaller than batch {b}")));
    }
    vs.validate()?;
    let z = &vs.inducing.locations;
    let m = z.nrows();
    let s2 = hyper.noise;
    let cfac = n_total as f64 / b as f64;
    let s = &vs.q_cov_factor;

    let p = gram_sym(z, hyper)?;
    let lp = chol(&p)?;
    let u = gram(z, f, hyper)?;
    let a = lp.solve(&u);
    let delta = vs.q_mean.add_scalar(-mean_const);
    let ainv_delta = lp.solve_vec(&delta);
    let mean = (u.transpose() * &ainv_delta).add_scalar(mean_const);
    let v1 = lp.solve_lower(&u);
    let sa = s.transpose() * &a;
    let var = Vector::from_fn(b, |i, _| {
        hyper.scale - v1.column(i).norm_squared() + sa.column(i).norm_squared()
    });
    let e = y - &mean;
    let ell: f64 = (0..b)
        .map(|i| -0.5 * (LN_2PI + s2.ln()) - (e[i] * e[i] + var[i]) / (2.0 * s2))
        .sum();

    let ls = lp.solve_lower(s);
    let log_det_sigma = 2.0 * (0..m).map(|i| s[(i, i)].ln()).sum::<f64>();
    let kl = 0.5 * (ls.norm_squared() + delta.dot(&ainv_delta) - m as f64 + lp.log_det() - log_det_sigma);
    let value = cfac * ell - kl;
    if !with_grad {
        return Ok((value, None));
    }

    let gm = &e * (cfac / s2);
    let gv = -cfac / (2.0 * s2);
    let ainv = lp.inverse();
    let sigma = s * s.transpose();
    let sg = &ainv * &sigma * &ainv;
    let bq = &sg - &ainv;

    let g_u = &ainv_delta * gm.transpose() + 2.0 * gv * &bq * &u;
    let g_delta = &a * &gm - &ainv_delta;
    let h = gv * &u * u.transpose();
    let g_p = -(&a * &gm) * ainv_delta.transpose() + &ainv * &h * &ainv - &ainv * &h * &sg - &sg * &h * &ainv
        + 0.5 * (&sg + &ainv_delta * ainv_delta.transpose() - &ainv);

    let s_inv = s
        .solve_lower_triangular(&Matrix::identity(m, m))
        .ok_or(Error::Singular { jitter: 0.0 })?;
    let sigma_inv = s_inv.transpose() * &s_inv;
    let mut g_sigma = gv * &a * a.transpose() - 0.5 * (&ainv - sigma_inv);
    symmetrize(&mut g_sigma);
    let g_factor = (2.0 * &g_sigma * s).lower_triangle();

    let d_s2: f64 = (0..b)
        .map(|i| cfac * (-0.5 / s2 + (e[i] * e[i] + var[i]) / (2.0 * s2 * s2)))
        .sum();
    let d_mu = gm.sum() - g_delta.sum();

    let bp_p = gram_backprop(z, z, &p, &g_p, hyper, InputGrads { a: true, b: true });
    let bp_u = gram_backprop(z, f, &u, &g_u, hyper, InputGrads { a: true, b: feature_grad });

    let mut hyper_mean = Vec::with_capacity(hyper.n_free() + 1);
    hyper_mean.push(bp_p.log_scale + bp_u.log_scale + b as f64 * gv * hyper.scale);
    hyper_mean.extend(bp_p.log_lengthscales.iter().zip(&bp_u.log_lengthscales).map(|(x, y)| x + y));
    hyper_mean.push(d_s2 * hyper.noise_jacobian());
    hyper_mean.push(d_mu);
    let inducing = bp_p.wrt_a.expect("requested") + bp_p.wrt_b.expect("requested") + bp_u.wrt_a.expect("requested");

    Ok((
        value,
        Some(ElboEval {
            value,
            hyper_mean,
            inducing,
            q_mean: g_delta,
            q_cov: g_sigma,
            q_factor: g_factor,
            features: bp_u.wrt_b,
        }),
    ))
}

/// Predictor for q(u): weights `Kₘₘ⁻¹(μᵤ − μ1)`, correction `Kₘₘ⁻¹(Kₘₘ − Σᵤ)Kₘₘ⁻¹`.
pub fn variational_predictor(hyper: &KernelHyper, mean_const: f64, vs: &VariationalState) -> Result<ProjectedPredictor> {
    let z = &vs.inducing.locations;
    let lp = chol(&gram_sym(z, hyper)?)?;
    let m = z.nrows();
    let weights = lp.solve_vec(&vs.q_mean.add_scalar(-mean_const));
    // Σᵤ = SSᵀ gives Kₘₘ⁻¹ΣᵤKₘₘ⁻¹ = (SᵀKₘₘ⁻¹)ᵀ(SᵀKₘₘ⁻¹)
    let root_minus = lp.solve(&vs.q_cov_factor).transpose();
    Ok(ProjectedPredictor {
        hyper: hyper.clone(),
        mean_const,
        points: z.clone(),
        weights,
        root_plus: lp.solve_lower(&Matrix::identity(m, m)),
        root_minus,
    })
}

fn check_model_dims(hyper: &KernelHyper, z: &Matrix, feature_map: Option<&MlpParams>) -> Result<()> {
    hyper.validate()?;
    if z.ncols() != hyper.dim() {
        return Err(Error::dim(format!(
            "inducing points have {} columns, kernel has {} lengthscales",
            z.ncols(),
            hyper.dim()
        )));
    }
    if let Some(mlp) = feature_map {
        if mlp.output_dim() != hyper.dim() {
            return Err(Error::dim(format!(
                "feature map outputs {} dimensions, kernel has {} lengthscales",
                mlp.output_dim(),
                hyper.dim()
            )));
        }
    }
    Ok(())
}

fn map_features(feature_map: Option<&MlpParams>, x: &Matrix) -> Result<Matrix> {
    match feature_map {
        Some(mlp) => mlp.forward(x),
        None => Ok(x.clone()),
    }
}

fn flat_rows(m: &Matrix) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

fn unflat_rows(v: &[f64], rows: usize, cols: usize) -> Matrix {
    Matrix::from_row_slice(rows, cols, v)
}

/// Collapsed sparse GP with free inducing locations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SgpModel {
    pub hyper: KernelHyper,
    pub mean_const: f64,
    pub inducing: InducingPoints,
    pub feature_map: Option<MlpParams>,
}

/// Gradients of an SGP objective, flattened by [`SgpGrad::to_flat`] in
/// [`SgpModel::to_flat`] order.
#[derive(Debug, Clone)]
pub struct SgpGrad {
    pub hyper_mean: Vec<f64>,
    pub inducing: Matrix,
    pub mlp: Option<Vec<f64>>,
}

impl SgpGrad {
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = self.hyper_mean.clone();
        out.extend(flat_rows(&self.inducing));
        if let Some(g) = &self.mlp {
            out.extend(g);
        }
        out
    }
}

impl SgpModel {
    pub fn new(hyper: KernelHyper, mean_const: f64, inducing: InducingPoints) -> Result<Self> {
        check_model_dims(&hyper, &inducing.locations, None)?;
        Ok(SgpModel {
            hyper,
            mean_const,
            inducing,
            feature_map: None,
        })
    }

    pub fn with_feature_map(mut self, mlp: MlpParams) -> Result<Self> {
        check_model_dims(&self.hyper, &self.inducing.locations, Some(&mlp))?;
        self.feature_map = Some(mlp);
        Ok(self)
    }

    pub fn features(&self, x: &Matrix) -> Result<Matrix> {
        map_features(self.feature_map.as_ref(), x)
    }

    pub fn collapsed_bound(&self, x: &Matrix, y: &Vector) -> Result<f64> {
        let f = self.features(x)?;
        Ok(collapsed_eval(&self.hyper, self.mean_const, &self.inducing.locations, &f, y, false, false)?.0)
    }

    pub fn collapsed_bound_grad(&self, x: &Matrix, y: &Vector) -> Result<(f64, SgpGrad)> {
        let f = self.features(x)?;
        let deep = self.feature_map.is_some();
        let (value, ev) = collapsed_eval(&self.hyper, self.mean_const, &self.inducing.locations, &f, y, true, deep)?;
        let ev = ev.expect("requested");
        let mlp = match (&self.feature_map, &ev.features) {
            (Some(net), Some(gf)) => Some(net.backward(x, gf)?.to_flat()),
            _ => None,
        };
        Ok((
            value,
            SgpGrad {
                hyper_mean: ev.hyper_mean,
                inducing: ev.inducing,
                mlp,
            },
        ))
    }

    pub fn predictor(&self, x: &Matrix, y: &Vector) -> Result<ProjectedPredictor> {
        let f = self.features(x)?;
        collapsed_predictor(&self.hyper, self.mean_const, &self.inducing.locations, &f, y)
    }

    /// `[log-hypers, mean, inducing rows.., network parameters..]`
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = pack_hyper_mean(&self.hyper, self.mean_const);
        out.extend(flat_rows(&self.inducing.locations));
        if let Some(net) = &self.feature_map {
            out.extend(net.to_flat());
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        let nh = self.hyper.n_free() + 1;
        let (m, d) = self.inducing.locations.shape();
        let nn = self.feature_map.as_ref().map_or(0, MlpParams::n_params);
        if flat.len() != nh + m * d + nn {
            return Err(Error::dim(format!("{} values for {} model parameters", flat.len(), nh + m * d + nn)));
        }
        let (h, mu) = unpack_hyper_mean(&flat[..nh]);
        self.hyper = h;
        self.mean_const = mu;
        self.inducing.locations = unflat_rows(&flat[nh..nh + m * d], m, d);
        if let Some(net) = &mut self.feature_map {
            net.set_flat(&flat[nh + m * d..])?;
        }
        Ok(())
    }

    /// Flat-layout mask of network weights (for weight decay).
    pub fn decay_mask(&self) -> Vec<bool> {
        let mut out = vec![false; self.hyper.n_free() + 1 + self.inducing.locations.len()];
        if let Some(net) = &self.feature_map {
            out.extend(net.weight_mask());
        }
        out
    }
}

/// Stochastic variational GP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvgpModel {
    pub hyper: KernelHyper,
    pub mean_const: f64,
    pub variational: VariationalState,
    pub feature_map: Option<MlpParams>,
}

#[derive(Debug, Clone)]
pub struct SvgpGrad {
    pub hyper_mean: Vec<f64>,
    pub inducing: Matrix,
    pub q_mean: Vector,
    pub q_cov: Matrix,
    pub q_factor: Matrix,
    pub mlp: Option<Vec<f64>>,
}

impl SvgpGrad {
    /// Natural-gradient input for q(u).
    pub fn q_gradient(&self) -> QGradient {
        QGradient {
            mean: self.q_mean.clone(),
            cov: self.q_cov.clone(),
        }
    }

    /// Gradient over [`SvgpModel::hyper_flat`] coordinates.
    pub fn hyper_flat(&self) -> Vec<f64> {
        let mut out = self.hyper_mean.clone();
        if let Some(g) = &self.mlp {
            out.extend(g);
        }
        out
    }
}

impl SvgpModel {
    /// q(u) initialized at the prior.
    pub fn new(hyper: KernelHyper, mean_const: f64, inducing: InducingPoints) -> Result<Self> {
        check_model_dims(&hyper, &inducing.locations, None)?;
        let variational = VariationalState::prior(inducing, &hyper, mean_const)?;
        Ok(SvgpModel {
            hyper,
            mean_const,
            variational,
            feature_map: None,
        })
    }

    pub fn with_feature_map(mut self, mlp: MlpParams) -> Result<Self> {
        check_model_dims(&self.hyper, &self.variational.inducing.locations, Some(&mlp))?;
        self.feature_map = Some(mlp);
        Ok(self)
    }

    pub fn features(&self, x: &Matrix) -> Result<Matrix> {
        map_features(self.feature_map.as_ref(), x)
    }

    pub fn elbo(&self, x: &Matrix, y: &Vector, n_total: usize) -> Result<f64> {
        let f = self.features(x)?;
        Ok(elbo_eval(&self.hyper, self.mean_const, &self.variational, &f, y, n_total, false, false)?.0)
    }

    pub fn elbo_grad(&self, x: &Matrix, y: &Vector, n_total: usize) -> Result<(f64, SvgpGrad)> {
        let f = self.features(x)?;
        let deep = self.feature_map.is_some();
        let (value, ev) = elbo_eval(&self.hyper, self.mean_const, &self.variational, &f, y, n_total, true, deep)?;
        let ev = ev.expect("requested");
        let mlp = match (&self.feature_map, &ev.features) {
            (Some(net), Some(gf)) => Some(net.backward(x, gf)?.to_flat()),
            _ => None,
        };
        Ok((
            value,
            SvgpGrad {
                hyper_mean: ev.hyper_mean,
                inducing: ev.inducing,
                q_mean: ev.q_mean,
                q_cov: ev.q_cov,
                q_factor: ev.q_factor,
                mlp,
            },
        ))
    }

    pub fn predictor(&self) -> Result<ProjectedPredictor> {
        variational_predictor(&self.hyper, self.mean_const, &self.variational)
    }

    /// `[log-hypers, mean, network parameters..]`: the coordinates trained by Adam.
    pub fn hyper_flat(&self) -> Vec<f64> {
        let mut out = pack_hyper_mean(&self.hyper, self.mean_const);
        if let Some(net) = &self.feature_map {
            out.extend(net.to_flat());
        }
        out
    }

    pub fn set_hyper_flat(&mut self, flat: &[f64]) -> Result<()> {
        let nh = self.hyper.n_free() + 1;
        let nn = self.feature_map.as_ref().map_or(0, MlpParams::n_params);
        if flat.len() != nh + nn {
            return Err(Error::dim(format!("{} values for {} parameters", flat.len(), nh + nn)));
        }
        let (h, mu) = unpack_hyper_mean(&flat[..nh]);
        self.hyper = h;
        self.mean_const = mu;
        if let Some(net) = &mut self.feature_map {
            net.set_flat(&flat[nh..])?;
        }
        Ok(())
    }

    pub fn decay_mask(&self) -> Vec<bool> {
        let mut out = vec![false; self.hyper.n_free() + 1];
        if let Some(net) = &self.feature_map {
            out.extend(net.weight_mask());
        }
        out
    }
}

/// [`SgpModel::collapsed_bound`]
pub fn collapsed_bound(model: &SgpModel, x: &Matrix, y: &Vector) -> Result<f64> {
    model.collapsed_bound(x, y)
}

/// Latent predictive of a collapsed model conditioned on `(x, y)`.
pub fn sgp_predict(model: &SgpModel, x: &Matrix, y: &Vector, query: &Matrix) -> Result<PredictiveGaussian> {
    model.predictor(x, y)?.predict(&model.features(query)?, false)
}

/// [`SvgpModel::elbo`]
pub fn svgp_elbo(model: &SvgpModel, batch_x: &Matrix, batch_y: &Vector, n_total: usize) -> Result<f64> {
    model.elbo(batch_x, batch_y, n_total)
}

/// Latent predictive under q(u).
pub fn svgp_predict(model: &SvgpModel, query: &Matrix) -> Result<PredictiveGaussian> {
    model.predictor()?.predict(&model.features(query)?, false)
}

/// Positive-definiteness check of K(Z, Z) without jitter.
pub fn inducing_gram_is_spd(hyper: &KernelHyper, z: &Matrix) -> bool {
    gram_sym(z, hyper).ok().is_some_and(|p| chol_jitter(&p, &[0.0]).is_ok())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exact_gp::ExactGp;
    use crate::optim::{finite_diff_check, natgrad_step};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    struct Case {
        x: Matrix,
        y: Vector,
        hyper: KernelHyper,
        mu: f64,
    }

    fn case(rng: &mut ChaCha8Rng, n: usize, d: usize, noise: f64) -> Case {
        let x = Matrix::from_fn(n, d, |_, _| rng.random_range(-1.0..1.0));
        let y = Vector::from_fn(n, |i, _| (2.5 * x[(i, 0)]).sin() + 0.3 * x[(i, d - 1)] + rng.random_range(-0.1..0.1));
        let ls = (0..d).map(|_| rng.random_range(0.5..1.2)).collect();
        Case {
            x,
            y,
            hyper: KernelHyper::new(rng.random_range(0.6..1.5), ls, noise).unwrap(),
            mu: rng.random_range(-0.2..0.2),
        }
    }

    fn exact_lml(c: &Case) -> f64 {
        ExactGp::new(c.x.clone(), c.y.clone(), c.hyper.clone(), c.mu)
            .unwrap()
            .log_marginal_likelihood()
            .unwrap()
    }

    fn sgp(c: &Case, z: Matrix) -> SgpModel {
        SgpModel::new(c.hyper.clone(), c.mu, InducingPoints::new(z).unwrap()).unwrap()
    }

    #[test]
    fn bound_is_tight_at_full_inducing_set() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = case(&mut rng, 20, 2, 0.05);
        let b = sgp(&c, c.x.clone()).collapsed_bound(&c.x, &c.y).unwrap();
        assert!((b - exact_lml(&c)).abs() < 1e-6, "{b} {}", exact_lml(&c));
    }

    #[test]
    fn bound_below_exact_and_trace_nonnegative() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..5 {
            let c = case(&mut rng, 40, 2, 0.05);
            let z = InducingPoints::random_subset(&c.x, 7, &mut rng).unwrap();
            let b = sgp(&c, z.locations.clone()).collapsed_bound(&c.x, &c.y).unwrap();
            assert!(b <= exact_lml(&c) + 1e-8);
            let p = gram_sym(&z.locations, &c.hyper).unwrap();
            let u = gram(&z.locations, &c.x, &c.hyper).unwrap();
            let q = u.transpose() * p.try_inverse().unwrap() * &u;
            assert!(40.0 * c.hyper.scale - q.trace() >= -1e-8);
        }
    }

    #[test]
    fn bound_invariant_to_inducing_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = case(&mut rng, 30, 2, 0.1);
        let z = InducingPoints::random_subset(&c.x, 5, &mut rng).unwrap().locations;
        let zr = Matrix::from_fn(5, 2, |i, j| z[(4 - i, j)]);
        let a = sgp(&c, z).collapsed_bound(&c.x, &c.y).unwrap();
        let b = sgp(&c, zr).collapsed_bound(&c.x, &c.y).unwrap();
        assert!((a - b).abs() < 1e-10 * a.abs().max(1.0));
    }

    #[test]
    fn full_inducing_prediction_recovers_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let c = case(&mut rng, 25, 2, 0.05);
        let q = Matrix::from_fn(4, 2, |_, _| rng.random_range(-1.0..1.0));
        let a = sgp_predict(&sgp(&c, c.x.clone()), &c.x, &c.y, &q).unwrap();
        let b = ExactGp::new(c.x.clone(), c.y.clone(), c.hyper.clone(), c.mu)
            .unwrap()
            .predict(&q)
            .unwrap();
        assert!((a.mean - b.mean).amax() < 1e-6);
        assert!((a.cov - b.cov).amax() < 1e-6);
    }

    #[test]
    fn far_query_target_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let c = case(&mut rng, 25, 2, 0.05);
        let model = sgp(&c, InducingPoints::random_subset(&c.x, 6, &mut rng).unwrap().locations);
        let q = Matrix::from_row_slice(1, 2, &[100.0, 100.0]);
        let pred = model.predictor(&c.x, &c.y).unwrap().predict(&q, true).unwrap();
        assert!((pred.cov[(0, 0)] - (c.hyper.scale + c.hyper.noise)).abs() < 1e-6);
    }

    #[test]
    fn sparse_rmse_close_to_exact_on_sine() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Matrix::from_fn(200, 1, |_, _| rng.random_range(-3.0..3.0));
        let y = Vector::from_fn(200, |i, _| x[(i, 0)].sin() + 0.05 * rng.random_range(-1.0..1.0));
        let q = Matrix::from_fn(50, 1, |i, _| -2.9 + 5.8 * i as f64 / 49.0);
        let truth = q.map(f64::sin);
        let h = KernelHyper::new(1.0, vec![1.0], 0.01).unwrap();
        let z = Matrix::from_fn(8, 1, |i, _| -3.0 + 6.0 * i as f64 / 7.0);
        let model = SgpModel::new(h.clone(), 0.0, InducingPoints::new(z).unwrap()).unwrap();
        let rmse = |m: &Vector| ((m - truth.column(0)).norm_squared() / 50.0).sqrt();
        let sparse = rmse(&sgp_predict(&model, &x, &y, &q).unwrap().mean);
        let exact = rmse(&ExactGp::new(x, y, h, 0.0).unwrap().predict(&q).unwrap().mean);
        assert!(sparse < 10.0 * exact, "{sparse} {exact}");
    }

    #[test]
    fn collapsed_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let c = case(&mut rng, 30, 2, 0.08);
        let mut z = InducingPoints::random_subset(&c.x, 6, &mut rng).unwrap().locations;
        z.apply(|v| *v += rng.random_range(-0.05..0.05));
        let model = sgp(&c, z);
        let (_, g) = model.collapsed_bound_grad(&c.x, &c.y).unwrap();
        let g = g.to_flat();
        let x0 = model.to_flat();
        let f = |v: &[f64]| {
            let mut m = model.clone();
            m.set_flat(v).unwrap();
            m.collapsed_bound(&c.x, &c.y).unwrap()
        };
        let idx: Vec<usize> = (0..x0.len()).collect();
        let err = finite_diff_check(f, &x0, &g, &idx, 1e-5);
        assert!(err < 1e-4, "{err}");
    }

    fn perturbed_svgp(c: &Case, m: usize, rng: &mut ChaCha8Rng) -> SvgpModel {
        let z = InducingPoints::random_subset(&c.x, m, rng).unwrap();
        let mut model = SvgpModel::new(c.hyper.clone(), c.mu, z).unwrap();
        let vs = &mut model.variational;
        vs.q_mean.apply(|v| *v += rng.random_range(-0.5..0.5));
        let mut l = vs.q_cov_factor.clone();
        for i in 0..m {
            for j in 0..=i {
                l[(i, j)] *= rng.random_range(0.5..1.0);
            }
        }
        vs.q_cov_factor = l;
        model
    }

    #[test]
    fn elbo_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let c = case(&mut rng, 24, 2, 0.1);
        let model = perturbed_svgp(&c, 5, &mut rng);
        let (_, g) = model.elbo_grad(&c.x, &c.y, 24).unwrap();

        let x0 = model.hyper_flat();
        let f = |v: &[f64]| {
            let mut m = model.clone();
            m.set_hyper_flat(v).unwrap();
            m.elbo(&c.x, &c.y, 24).unwrap()
        };
        let idx: Vec<usize> = (0..x0.len()).collect();
        assert!(finite_diff_check(f, &x0, &g.hyper_flat(), &idx, 1e-5) < 1e-4);

        let z0 = flat_rows(&model.variational.inducing.locations);
        let fz = |v: &[f64]| {
            let mut m = model.clone();
            m.variational.inducing.locations = unflat_rows(v, 5, 2);
            m.elbo(&c.x, &c.y, 24).unwrap()
        };
        let idx: Vec<usize> = (0..z0.len()).collect();
        assert!(finite_diff_check(fz, &z0, &flat_rows(&g.inducing), &idx, 1e-5) < 1e-4);

        let q0 = model.variational.q_mean.as_slice().to_vec();
        let fq = |v: &[f64]| {
            let mut m = model.clone();
            m.variational.q_mean = Vector::from_column_slice(v);
            m.elbo(&c.x, &c.y, 24).unwrap()
        };
        let idx: Vec<usize> = (0..5).collect();
        assert!(finite_diff_check(fq, &q0, g.q_mean.as_slice(), &idx, 1e-5) < 1e-4);

        let l0 = model.variational.q_cov_factor.as_slice().to_vec();
        let fl = |v: &[f64]| {
            let mut m = model.clone();
            m.variational.q_cov_factor = Matrix::from_column_slice(5, 5, v);
            m.elbo(&c.x, &c.y, 24).unwrap()
        };
        let lower: Vec<usize> = (0..25).filter(|k| k % 5 >= k / 5).collect();
        assert!(finite_diff_check(fl, &l0, g.q_factor.as_slice(), &lower, 1e-5) < 1e-4);
    }

    #[test]
    fn elbo_at_optimal_q_equals_collapsed_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let c = case(&mut rng, 30, 2, 0.05);
        let z = InducingPoints::random_subset(&c.x, 8, &mut rng).unwrap();
        let mut model = SvgpModel::new(c.hyper.clone(), c.mu, z.clone()).unwrap();
        let bound = sgp(&c, z.locations.clone()).collapsed_bound(&c.x, &c.y).unwrap();
        assert!(model.elbo(&c.x, &c.y, 30).unwrap() <= bound + 1e-8);
        model.variational = optimal_variational(&c.hyper, c.mu, &z, &c.x, &c.y).unwrap();
        let e = model.elbo(&c.x, &c.y, 30).unwrap();
        assert!((e - bound).abs() < 1e-6, "{e} {bound}");
    }

    #[test]
    fn prior_q_has_zero_kl_and_prior_predictive() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let c = case(&mut rng, 12, 2, 1e-3);
        let z = InducingPoints::random_subset(&c.x, 4, &mut rng).unwrap();
        let model = SvgpModel::new(c.hyper.clone(), c.mu, z).unwrap();
        let f = &c.x;
        let (e, _) = elbo_eval(&c.hyper, c.mu, &model.variational, f, &c.y, 12, false, false).unwrap();
        // expected log-likelihood under q = prior: f ~ N(μ, σ_s) marginally
        let s2 = c.hyper.noise;
        let ell: f64 = c
            .y
            .iter()
            .map(|y| -0.5 * (LN_2PI + s2.ln()) - ((y - c.mu).powi(2) + c.hyper.scale) / (2.0 * s2))
            .sum();
        assert!((e - ell).abs() < 1e-6 * ell.abs());

        let q = Matrix::from_fn(3, 2, |_, _| rng.random_range(-1.0..1.0));
        let pred = svgp_predict(&model, &q).unwrap();
        assert!(pred.mean.iter().all(|m| (m - c.mu).abs() < 1e-8));
        assert!(pred.cov.diagonal().iter().all(|v| (v - c.hyper.scale).abs() < 1e-6));
    }

    #[test]
    fn optimal_q_prediction_matches_collapsed() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let c = case(&mut rng, 28, 2, 0.05);
        let z = InducingPoints::random_subset(&c.x, 10, &mut rng).unwrap();
        let mut model = SvgpModel::new(c.hyper.clone(), c.mu, z.clone()).unwrap();
        model.variational = optimal_variational(&c.hyper, c.mu, &z, &c.x, &c.y).unwrap();
        let q = Matrix::from_fn(5, 2, |_, _| rng.random_range(-1.0..1.0));
        let a = svgp_predict(&model, &q).unwrap();
        let b = sgp_predict(&sgp(&c, z.locations), &c.x, &c.y, &q).unwrap();
        assert!((a.mean - b.mean).amax() < 1e-6);
        assert!((&a.cov - &b.cov).amax() < 1e-6);
        assert!((&a.cov - a.cov.transpose()).amax() == 0.0);
    }

    #[test]
    fn partition_average_equals_full_batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let c = case(&mut rng, 32, 2, 0.1);
        let model = perturbed_svgp(&c, 6, &mut rng);
        let (full, gfull) = model.elbo_grad(&c.x, &c.y, 32).unwrap();
        let mut avg = 0.0;
        let mut gavg = vec![0.0; gfull.hyper_flat().len()];
        for k in 0..4 {
            let xb = c.x.rows(8 * k, 8).into_owned();
            let yb = c.y.rows(8 * k, 8).into_owned();
            let (v, g) = model.elbo_grad(&xb, &yb, 32).unwrap();
            avg += v / 4.0;
            for (a, b) in gavg.iter_mut().zip(g.hyper_flat()) {
                *a += b / 4.0;
            }
        }
        assert!((avg - full).abs() < 1e-8 * full.abs().max(1.0));
        for (a, b) in gavg.iter().zip(gfull.hyper_flat()) {
            assert!((a - b).abs() < 1e-6 * b.abs().max(1.0));
        }
    }

    #[test]
    fn natural_step_reaches_optimum() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let c = case(&mut rng, 32, 2, 0.05);
        let z = InducingPoints::random_subset(&c.x, 8, &mut rng).unwrap();
        let model = SvgpModel::new(c.hyper.clone(), c.mu, z.clone()).unwrap();
        let (_, g) = model.elbo_grad(&c.x, &c.y, 32).unwrap();
        let stepped = natgrad_step(&model.variational, &g.q_gradient(), 1.0).unwrap();
        let opt = optimal_variational(&c.hyper, c.mu, &z, &c.x, &c.y).unwrap();
        assert!((&stepped.q_mean - &opt.q_mean).amax() < 1e-6);
        assert!((stepped.q_cov() - opt.q_cov()).amax() < 1e-6);
    }

    #[test]
    fn elbo_rejects_bad_batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let c = case(&mut rng, 10, 2, 0.1);
        let model = perturbed_svgp(&c, 3, &mut rng);
        assert!(model.elbo(&c.x, &c.y, 5).is_err());
        assert!(model.elbo(&c.x, &Vector::zeros(9), 10).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let c = case(&mut rng, 10, 2, 0.1);
        let model = perturbed_svgp(&c, 3, &mut rng);
        let json = serde_json::to_string(&model).unwrap();
        let back: SvgpModel = serde_json::from_str(&json).unwrap();
        assert_eq!(back, model);
    }
}
