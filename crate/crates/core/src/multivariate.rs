//! PCA-basis multivariate emulator: probabilistic PCA over the set × output
//! matrix (tolerating missing entries), one exact GP per retained component,
//! and the basis-projected predictive distribution.

use nalgebra::SymmetricEigen;
use serde::{Deserialize, Serialize};

use crate::emulator::BlockEmulator;
use crate::error::{Error, Result};
use crate::exact_gp::ExactGp;
use crate::kernel::KernelHyper;
use crate::linalg::{chol, Matrix, Vector};
use crate::optim::OptimizerConfig;
use crate::predictor::{logpdf_with_upstream, PredictiveGaussian, PredictiveUpstream, ProjectedPredictor};

pub const DEFAULT_COMPONENTS: usize = 12;
const MIN_NOISE_VAR: f64 = 1e-12;

/// `Y ≈ target_mean + target_scale · W Kᵀ` on observed entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaBasis {
    /// p×q with orthonormal columns, ordered by explained variance.
    #[serde(with = "crate::serde_matrix")]
    pub components: Matrix,
    /// n×q
    #[serde(with = "crate::serde_matrix")]
    pub weights: Matrix,
    #[serde(with = "crate::serde_matrix::vector")]
    pub target_mean: Vector,
    pub target_scale: f64,
    /// Isotropic noise variance of the latent model, in scaled units.
    pub noise_var: f64,
    pub converged: bool,
    pub iterations: usize,
}

impl PcaBasis {
    pub fn n_components(&self) -> usize {
        self.components.ncols()
    }

    /// `(Y − target_mean) / target_scale`, NaN preserved.
    pub fn scale_targets(&self, y: &Matrix) -> Matrix {
        Matrix::from_fn(y.nrows(), y.ncols(), |i, j| (y[(i, j)] - self.target_mean[j]) / self.target_scale)
    }

    /// `W Kᵀ` in scaled units.
    pub fn reconstruct_scaled(&self) -> Matrix {
        &self.weights * self.components.transpose()
    }
}

fn observed(v: f64) -> bool {
    !v.is_nan()
}

fn check_coverage(y: &Matrix) -> Result<()> {
    for i in 0..y.nrows() {
        if !y.row(i).iter().any(|v| observed(*v)) {
            return Err(Error::Coverage { what: "row", index: i });
        }
    }
    for j in 0..y.ncols() {
        if !y.column(j).iter().any(|v| observed(*v)) {
            return Err(Error::Coverage { what: "column", index: j });
        }
    }
    Ok(())
}

/// Column means over observed entries and one global standard deviation of
/// the centred observed entries.
fn global_scaling(y: &Matrix) -> Result<(Vector, f64)> {
    let p = y.ncols();
    let mean = Vector::from_fn(p, |j, _| {
        let obs: Vec<f64> = y.column(j).iter().copied().filter(|v| observed(*v)).collect();
        obs.iter().sum::<f64>() / obs.len() as f64
    });
    let mut ss = 0.0;
    let mut count = 0usize;
    for j in 0..p {
        for v in y.column(j).iter().filter(|v| observed(**v)) {
            ss += (v - mean[j]).powi(2);
            count += 1;
        }
    }
    let sd = (ss / count as f64).sqrt();
    if !(sd > 0.0) {
        return Err(Error::DegenerateColumn { column: 0 });
    }
    Ok((mean, sd))
}

/// Leading-`q` eigenvectors of `a` (symmetric), largest first.
fn leading_eigenvectors(a: &Matrix, q: usize) -> (Matrix, Vector) {
    let eig = SymmetricEigen::new(a.clone());
    let mut order: Vec<usize> = (0..a.nrows()).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let vecs = Matrix::from_fn(a.nrows(), q, |r, c| eig.eigenvectors[(r, order[c])]);
    let vals = Vector::from_fn(a.nrows(), |i, _| eig.eigenvalues[order[i]]);
    (vecs, vals)
}

/// Least-squares weights of each row on the observed coordinates of `k`.
fn project_rows(ys: &Matrix, k: &Matrix) -> Result<Matrix> {
    let (n, q) = (ys.nrows(), k.ncols());
    let mut w = Matrix::zeros(n, q);
    for i in 0..n {
        let obs: Vec<usize> = (0..ys.ncols()).filter(|&j| observed(ys[(i, j)])).collect();
        let ko = k.select_rows(obs.iter());
        let yo = Vector::from_iterator(obs.len(), obs.iter().map(|&j| ys[(i, j)]));
        let mut g = ko.transpose() * &ko;
        let ridge = 1e-10 * g.trace().max(1.0) / q as f64;
        for t in 0..q {
            g[(t, t)] += ridge;
        }
        let sol = chol(&g)?.solve_vec(&(ko.transpose() * yo));
        w.row_mut(i).copy_from(&sol.transpose());
    }
    Ok(w)
}

/// Observed-data log-likelihood of PPCA with loadings `wl` (p×q), mean `mu`
/// and noise `s2`, via the Woodbury identity.
fn ppca_loglik(ys: &Matrix, wl: &Matrix, mu: &Vector, s2: f64) -> Result<f64> {
    let q = wl.ncols();
    let mut total = 0.0;
    for i in 0..ys.nrows() {
        let obs: Vec<usize> = (0..ys.ncols()).filter(|&j| observed(ys[(i, j)])).collect();
        let wo = wl.select_rows(obs.iter());
        let r = Vector::from_iterator(obs.len(), obs.iter().map(|&j| ys[(i, j)] - mu[j]));
        let m = wo.transpose() * &wo + Matrix::identity(q, q) * s2;
        let mf = chol(&m)?;
        let rt = wo.transpose() * &r;
        let quad = (r.norm_squared() - rt.dot(&mf.solve_vec(&rt))) / s2;
        let logdet = mf.log_det() + (obs.len() as f64 - q as f64) * s2.ln();
        total -= 0.5 * (quad + logdet + obs.len() as f64 * crate::linalg::LN_2PI);
    }
    Ok(total)
}

/// Probabilistic PCA of `y` (NaN marks missing entries) with `q` components.
///
/// Fully observed data uses the closed-form maximum-likelihood solution
/// (leading eigenvectors of the scatter matrix); otherwise EM with missing
/// entries runs from a mean-imputed start until the relative log-likelihood
/// change falls below `tol`.
pub fn ppca_fit(y: &Matrix, q: usize, max_em_iters: usize, tol: f64) -> Result<PcaBasis> {
    ppca_fit_impl(y, q, max_em_iters, tol, false)
}

/// [`ppca_fit`] that runs EM even on fully observed data.
pub fn ppca_fit_em(y: &Matrix, q: usize, max_em_iters: usize, tol: f64) -> Result<PcaBasis> {
    ppca_fit_impl(y, q, max_em_iters, tol, true)
}

fn ppca_fit_impl(y: &Matrix, q: usize, max_em_iters: usize, tol: f64, force_em: bool) -> Result<PcaBasis> {
    let (n, p) = y.shape();
    if q == 0 || q > n.min(p) {
        return Err(Error::arg(format!("cannot fit {q} components to a {n}×{p} matrix")));
    }
    check_coverage(y)?;
    let (col_mean, sd) = global_scaling(y)?;
    let ys = Matrix::from_fn(n, p, |i, j| (y[(i, j)] - col_mean[j]) / sd);
    let complete = ys.iter().all(|v| observed(*v));

    if complete && !force_em {
        let scatter = ys.transpose() * &ys;
        let (k, vals) = leading_eigenvectors(&scatter, q);
        let total_obs = (n * p) as f64;
        let discarded: f64 = vals.iter().skip(q).map(|v| v.max(0.0)).sum();
        let weights = &ys * &k;
        return Ok(PcaBasis {
            components: k,
            weights,
            target_mean: col_mean,
            target_scale: sd,
            noise_var: (discarded / total_obs).max(MIN_NOISE_VAR),
            converged: true,
            iterations: 0,
        });
    }

    // mean-imputed start
    let imputed = ys.map(|v| if observed(v) { v } else { 0.0 });
    let (k0, vals0) = leading_eigenvectors(&(imputed.transpose() * &imputed), q);
    let mut wl = Matrix::from_fn(p, q, |j, c| k0[(j, c)] * (vals0[c].max(0.0) / n as f64).sqrt());
    let mut mu = Vector::zeros(p);
    let n_obs = ys.iter().filter(|v| observed(**v)).count() as f64;
    let mut s2 = (vals0.iter().skip(q).map(|v| v.max(0.0)).sum::<f64>() / n_obs).max(1e-6);
    let obs_sets: Vec<Vec<usize>> = (0..n)
        .map(|i| (0..p).filter(|&j| observed(ys[(i, j)])).collect())
        .collect();

    let mut prev = ppca_loglik(&ys, &wl, &mu, s2)?;
    let mut converged = false;
    let mut iterations = 0;
    for it in 0..max_em_iters {
        iterations = it + 1;
        // E-step: posterior moments of each row's latent coordinates
        let mut ex = Vec::with_capacity(n);
        let mut exx = Vec::with_capacity(n);
        for (i, obs) in obs_sets.iter().enumerate() {
            let wo = wl.select_rows(obs.iter());
            let r = Vector::from_iterator(obs.len(), obs.iter().map(|&j| ys[(i, j)] - mu[j]));
            let mf = chol(&(wo.transpose() * &wo + Matrix::identity(q, q) * s2))?;
            let e = mf.solve_vec(&(wo.transpose() * r));
            exx.push(mf.inverse() * s2 + &e * e.transpose());
            ex.push(e);
        }
        // M-step: loadings row by row, then mean, then noise
        for j in 0..p {
            let mut a = Matrix::zeros(q, q);
            let mut b = Vector::zeros(q);
            for (i, obs) in obs_sets.iter().enumerate() {
                if obs.contains(&j) {
                    a += &exx[i];
                    b += &ex[i] * (ys[(i, j)] - mu[j]);
                }
            }
            let sol = chol(&a)?.solve_vec(&b);
            wl.row_mut(j).copy_from(&sol.transpose());
        }
        for j in 0..p {
            let (mut s, mut c) = (0.0, 0.0);
            for (i, obs) in obs_sets.iter().enumerate() {
                if obs.contains(&j) {
                    s += ys[(i, j)] - wl.row(j).dot(&ex[i].transpose());
                    c += 1.0;
                }
            }
            mu[j] = s / c;
        }
        let mut acc = 0.0;
        for (i, obs) in obs_sets.iter().enumerate() {
            for &j in obs {
                let r = ys[(i, j)] - mu[j];
                let wj = wl.row(j).transpose();
                acc += r * r - 2.0 * r * wj.dot(&ex[i]) + (wj.transpose() * &exx[i] * &wj)[(0, 0)];
            }
        }
        s2 = (acc / n_obs).max(MIN_NOISE_VAR);

        let ll = ppca_loglik(&ys, &wl, &mu, s2)?;
        if (ll - prev).abs() <= tol * prev.abs().max(1.0) {
            converged = true;
            break;
        }
        prev = ll;
    }

    // orthonormal basis of the loading span, ordered by explained variance
    let (k, _) = leading_eigenvectors(&(&wl * wl.transpose()), q);
    let centred = Matrix::from_fn(n, p, |i, j| ys[(i, j)] - mu[j]);
    let weights = project_rows(&centred, &k)?;
    Ok(PcaBasis {
        components: k,
        weights,
        target_mean: Vector::from_fn(p, |j, _| col_mean[j] + sd * mu[j]),
        target_scale: sd,
        noise_var: s2,
        converged,
        iterations,
    })
}

/// Serialized form of a fitted exact GP (its factor is rebuilt on load).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ExactGpState {
    #[serde(with = "crate::serde_matrix")]
    inputs: Matrix,
    #[serde(with = "crate::serde_matrix::vector")]
    targets: Vector,
    hyper: KernelHyper,
    mean_const: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "MultivariateState", into = "MultivariateState")]
pub struct MultivariateEmulator {
    pub basis: PcaBasis,
    pub weight_gps: Vec<ExactGp>,
    /// Per-output residual variance of the basis reconstruction, scaled units.
    pub residual_var: Vector,
    predictors: Vec<ProjectedPredictor>,
}

#[derive(Serialize, Deserialize)]
struct MultivariateState {
    basis: PcaBasis,
    weight_gps: Vec<ExactGpState>,
    #[serde(with = "crate::serde_matrix::vector")]
    residual_var: Vector,
}

impl TryFrom<MultivariateState> for MultivariateEmulator {
    type Error = Error;

    fn try_from(s: MultivariateState) -> Result<Self> {
        let gps = s
            .weight_gps
            .into_iter()
            .map(|g| ExactGp::new(g.inputs, g.targets, g.hyper, g.mean_const))
            .collect::<Result<Vec<_>>>()?;
        MultivariateEmulator::assemble(s.basis, gps, s.residual_var)
    }
}

impl From<MultivariateEmulator> for MultivariateState {
    fn from(e: MultivariateEmulator) -> Self {
        MultivariateState {
            weight_gps: e
                .weight_gps
                .iter()
                .map(|g| ExactGpState {
                    inputs: g.inputs().clone(),
                    targets: g.targets().clone(),
                    hyper: g.hyper().clone(),
                    mean_const: g.mean_const(),
                })
                .collect(),
            basis: e.basis,
            residual_var: e.residual_var,
        }
    }
}

/// Settings for the per-component weight GPs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MvConfig {
    pub components: usize,
    pub em_iters: usize,
    pub em_tol: f64,
    pub lbfgs: OptimizerConfig,
    pub lbfgs_iters: usize,
    pub init_lengthscale: f64,
    pub init_noise: f64,
}

impl Default for MvConfig {
    fn default() -> Self {
        MvConfig {
            components: DEFAULT_COMPONENTS,
            em_iters: 500,
            em_tol: 1e-9,
            lbfgs: OptimizerConfig::lbfgs(0.01),
            lbfgs_iters: 100,
            init_lengthscale: 1.0,
            init_noise: 1e-2,
        }
    }
}

impl MultivariateEmulator {
    fn assemble(basis: PcaBasis, weight_gps: Vec<ExactGp>, residual_var: Vector) -> Result<Self> {
        if weight_gps.len() != basis.n_components() {
            return Err(Error::dim(format!(
                "{} weight GPs for {} components",
                weight_gps.len(),
                basis.n_components()
            )));
        }
        if residual_var.len() != basis.components.nrows() {
            return Err(Error::dim("residual variance length differs from output count"));
        }
        let predictors = weight_gps.iter().map(ExactGp::predictor).collect::<Result<Vec<_>>>()?;
        Ok(MultivariateEmulator {
            basis,
            weight_gps,
            residual_var,
            predictors,
        })
    }

    pub fn n_outputs(&self) -> usize {
        self.basis.components.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.weight_gps[0].inputs().ncols()
    }

    /// Projected predictive; `add_residual` adds the per-output reconstruction
    /// residual variance (making the covariance full rank).
    pub fn predict_with(&self, x_star: &[f64], add_residual: bool) -> Result<PredictiveGaussian> {
        if x_star.len() != self.input_dim() {
            return Err(Error::dim(format!(
                "query of length {}, emulator expects {}",
                x_star.len(),
                self.input_dim()
            )));
        }
        let xq = Matrix::from_row_slice(1, x_star.len(), x_star);
        let q = self.basis.n_components();
        let mut wm = Vector::zeros(q);
        let mut wv = Vector::zeros(q);
        for (k, pr) in self.predictors.iter().enumerate() {
            let (m, v) = pr.predict_marginals(&xq, true)?;
            wm[k] = m[0];
            wv[k] = v[0];
        }
        let s = self.basis.target_scale;
        let kmat = &self.basis.components;
        let mean = &self.basis.target_mean + s * (kmat * wm);
        let mut cov = s * s * kmat * Matrix::from_diagonal(&wv) * kmat.transpose();
        if add_residual {
            for j in 0..cov.nrows() {
                cov[(j, j)] += s * s * self.residual_var[j];
            }
        }
        Ok(PredictiveGaussian::finalize(mean, cov))
    }
}

/// Fits the PPCA basis on `y` (rows aligned with `x`; NaN marks missing) and
/// one exact GP per component on the weights, with LBFGS on the LML.
pub fn mv_fit(x: &Matrix, y: &Matrix, config: &MvConfig) -> Result<MultivariateEmulator> {
    Ok(mv_fit_traced(x, y, config)?.0)
}

/// [`mv_fit`], also returning each weight GP's LML trace.
pub fn mv_fit_traced(x: &Matrix, y: &Matrix, config: &MvConfig) -> Result<(MultivariateEmulator, Vec<Vec<f64>>)> {
    if x.nrows() != y.nrows() {
        return Err(Error::dim(format!("{} input rows but {} output rows", x.nrows(), y.nrows())));
    }
    let basis = ppca_fit(y, config.components, config.em_iters, config.em_tol)?;
    let mut gps = Vec::with_capacity(basis.n_components());
    let mut traces = Vec::with_capacity(basis.n_components());
    for k in 0..basis.n_components() {
        let w = basis.weights.column(k).into_owned();
        let var = w.variance().max(1e-6);
        let hyper = KernelHyper::new(var, vec![config.init_lengthscale; x.ncols()], config.init_noise)?;
        let mut gp = ExactGp::new(x.clone(), w.clone(), hyper, w.mean())?;
        traces.push(gp.fit_hyper(&config.lbfgs, config.lbfgs_iters)?);
        gps.push(gp);
    }
    let ys = basis.scale_targets(y);
    let recon = basis.reconstruct_scaled();
    let residual_var = Vector::from_fn(y.ncols(), |j, _| {
        let (mut ss, mut c) = (0.0, 0.0);
        for i in 0..y.nrows() {
            if observed(ys[(i, j)]) {
                ss += (ys[(i, j)] - recon[(i, j)]).powi(2);
                c += 1.0;
            }
        }
        (ss / c).max(MIN_NOISE_VAR)
    });
    Ok((MultivariateEmulator::assemble(basis, gps, residual_var)?, traces))
}

/// Rank-q projected predictive over all outputs at one parameter vector.
pub fn mv_predict(emulator: &MultivariateEmulator, x_star: &[f64]) -> Result<PredictiveGaussian> {
    emulator.predict_with(x_star, false)
}

impl BlockEmulator for MultivariateEmulator {
    fn param_dim(&self) -> usize {
        self.input_dim()
    }

    fn n_outputs(&self) -> usize {
        self.basis.components.nrows()
    }

    fn predict_block(&self, theta: &[f64]) -> Result<PredictiveGaussian> {
        self.predict_with(theta, true)
    }

    fn block_logpdf(
        &self,
        theta: &[f64],
        observed: &Vector,
        diagonal_only: bool,
        with_grad: bool,
    ) -> Result<(f64, Option<Vec<f64>>)> {
        let pred = self.predict_with(theta, true)?;
        let (value, gm, gc) = logpdf_with_upstream(&pred, observed, diagonal_only)?;
        if !with_grad {
            return Ok((value, None));
        }
        let s = self.basis.target_scale;
        let kmat = &self.basis.components;
        let g_wm = s * kmat.transpose() * &gm;
        let g_wv = (s * s) * (kmat.transpose() * &gc * kmat).diagonal();
        let xq = Matrix::from_row_slice(1, theta.len(), theta);
        let mut grad = vec![0.0; theta.len()];
        for (k, pr) in self.predictors.iter().enumerate() {
            let um = Vector::from_element(1, g_wm[k]);
            let uc = Matrix::from_element(1, 1, g_wv[k]);
            let g = pr.backprop_features(&xq, PredictiveUpstream { mean: &um, cov: &uc })?;
            for (t, gt) in grad.iter_mut().enumerate() {
                *gt += g[(0, t)];
            }
        }
        Ok((value, Some(grad)))
    }
}
