//! Training protocol: per-family optimizer wiring, epoch loops with traces,
//! the dual checkpoint (final and best stable), the covariance stability
//! gate, validation RMSE and prediction timing.

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::seq::{index, SliceRandom};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::dataset::{scaled_nuclide_block, EmulationDataset, RowSource};
use crate::deep_kernel::{MlpParams, DEFAULT_LAYER_DIMS, DEFAULT_WEIGHT_DECAY};
use crate::emulator::{BlockEmulator, Broadcast, GpEmulator};
use crate::error::{Error, Result};
use crate::kernel::KernelHyper;
use crate::linalg::{chol_jitter, symmetrize, Matrix, Vector};
use crate::multivariate::{mv_fit_traced, MultivariateEmulator, MvConfig, DEFAULT_COMPONENTS};
use crate::optim::{adam_step, natgrad_step, AdamState, Lbfgs, LbfgsStatus, OptimizerConfig};
use crate::rng::{streams, substream, Rng};
use crate::scaler::AffineScaler;
use crate::sparse::{InducingPoints, SgpModel, SvgpModel};

pub const DEFAULT_EPOCHS: usize = 4000;
pub const DEFAULT_BATCH_SIZE: usize = 512;
pub const DEFAULT_LBFGS_LR: f64 = 0.01;
pub const DEFAULT_NATGRAD_LR: f64 = 0.1;
pub const DEFAULT_ADAM_LR: f64 = 0.01;
pub const DEFAULT_STABILITY_PROBES: usize = 10;
pub const DEFAULT_VALIDATION_SUBSAMPLE: usize = 512;
pub const DEFAULT_INDUCING: usize = 64;
pub const BENCH_REPETITIONS: usize = 30;
/// Consecutive non-finite epochs that abort a run.
pub const ABORT_AFTER: usize = 3;
/// Symmetry tolerance of the stability gate.
pub const GATE_SYMMETRY_TOL: f64 = 1e-8;
/// Jitter ladder of the stability gate: none, then the first nonzero rung.
pub const GATE_LADDER: [f64; 2] = [0.0, 1e-10];

/// Inducing-point counts of the sweep: 2, 10, …, 506.
pub fn inducing_sweep() -> Vec<usize> {
    (2..=506).step_by(8).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmulatorKind {
    Sgp,
    Svgp,
    Dksgp,
    Dksvgp,
    Multivariate,
}

impl EmulatorKind {
    pub fn name(self) -> &'static str {
        match self {
            EmulatorKind::Sgp => "sgp",
            EmulatorKind::Svgp => "svgp",
            EmulatorKind::Dksgp => "dksgp",
            EmulatorKind::Dksvgp => "dksvgp",
            EmulatorKind::Multivariate => "multivariate",
        }
    }

    pub fn is_deep(self) -> bool {
        matches!(self, EmulatorKind::Dksgp | EmulatorKind::Dksvgp)
    }

    pub fn is_stochastic(self) -> bool {
        matches!(self, EmulatorKind::Svgp | EmulatorKind::Dksvgp)
    }
}

impl std::str::FromStr for EmulatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "sgp" => EmulatorKind::Sgp,
            "svgp" => EmulatorKind::Svgp,
            "dksgp" => EmulatorKind::Dksgp,
            "dksvgp" => EmulatorKind::Dksvgp,
            "multivariate" => EmulatorKind::Multivariate,
            other => return Err(Error::arg(format!("unknown emulator kind {other:?}"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub kind: EmulatorKind,
    /// Inducing points m (sparse families).
    pub inducing: usize,
    pub epochs: usize,
    /// Mini-batch size (stochastic families).
    pub batch_size: usize,
    pub lbfgs_lr: f64,
    pub natgrad_lr: f64,
    pub adam_lr: f64,
    /// L2 decay on network weights (deep-kernel families).
    pub weight_decay: f64,
    pub seed: u64,
    pub stability_probes: usize,
    pub validation_subsample: usize,
    /// Network widths, input first (deep-kernel families).
    pub layer_dims: Vec<usize>,
    pub init_lengthscale: f64,
    pub init_noise: f64,
    /// Retained principal components (multivariate family).
    pub components: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            kind: EmulatorKind::Sgp,
            inducing: DEFAULT_INDUCING,
            epochs: DEFAULT_EPOCHS,
            batch_size: DEFAULT_BATCH_SIZE,
            lbfgs_lr: DEFAULT_LBFGS_LR,
            natgrad_lr: DEFAULT_NATGRAD_LR,
            adam_lr: DEFAULT_ADAM_LR,
            weight_decay: DEFAULT_WEIGHT_DECAY,
            seed: 0,
            stability_probes: DEFAULT_STABILITY_PROBES,
            validation_subsample: DEFAULT_VALIDATION_SUBSAMPLE,
            layer_dims: DEFAULT_LAYER_DIMS.to_vec(),
            init_lengthscale: 1.0,
            init_noise: 1e-2,
            components: DEFAULT_COMPONENTS,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, ds: &EmulationDataset) -> Result<()> {
        if self.inducing < 1 {
            return Err(Error::arg("inducing count must be at least 1"));
        }
        if self.kind != EmulatorKind::Multivariate && self.inducing > ds.n_train() {
            return Err(Error::arg(format!(
                "{} inducing points but only {} training rows",
                self.inducing,
                ds.n_train()
            )));
        }
        if self.kind.is_stochastic() && !(1..=ds.n_train()).contains(&self.batch_size) {
            return Err(Error::arg(format!(
                "batch size {} outside 1..={}",
                self.batch_size,
                ds.n_train()
            )));
        }
        for (name, lr) in [("lbfgs", self.lbfgs_lr), ("natgrad", self.natgrad_lr), ("adam", self.adam_lr)] {
            if !(lr > 0.0) {
                return Err(Error::arg(format!("{name} learning rate must be positive")));
            }
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::arg("weight decay must be nonnegative"));
        }
        if self.kind.is_deep() && self.layer_dims.first() != Some(&ds.input_dim()) {
            return Err(Error::arg(format!(
                "network input width {:?} does not match {} input columns",
                self.layer_dims.first(),
                ds.input_dim()
            )));
        }
        if !(self.init_lengthscale > 0.0 && self.init_noise > 0.0 && self.init_noise < 1.0) {
            return Err(Error::arg("initial lengthscale must be positive and noise in (0, 1)"));
        }
        Ok(())
    }

    fn adam(&self) -> OptimizerConfig {
        OptimizerConfig::adam(self.adam_lr)
    }
}

/// Everything needed to query a checkpoint in simulator terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataContext {
    pub param_names: Vec<String>,
    pub nuclides: Vec<(u32, u32)>,
    pub input_scaler: AffineScaler,
    pub target_scaler: AffineScaler,
}

impl DataContext {
    pub fn from_dataset(ds: &EmulationDataset) -> Self {
        DataContext {
            param_names: ds.param_names.clone(),
            nuclides: ds.nuclides.clone(),
            input_scaler: ds.input_scaler.clone(),
            target_scaler: ds.target_scaler.clone(),
        }
    }

    pub fn n_params(&self) -> usize {
        self.input_scaler.cols() - 2
    }

    pub fn target_unit(&self) -> f64 {
        self.target_scaler.scale[0]
    }

    pub fn nuclide_block(&self) -> Matrix {
        scaled_nuclide_block(&self.input_scaler, &self.nuclides)
    }

    /// MeV binding energies to standardized units.
    pub fn scale_targets(&self, y: &[f64]) -> Vector {
        Vector::from_iterator(y.len(), y.iter().map(|v| self.target_scaler.apply_value(0, *v)))
    }

    pub fn scale_theta(&self, theta: &[f64]) -> Vec<f64> {
        theta.iter().enumerate().map(|(k, v)| self.input_scaler.apply_value(k, *v)).collect()
    }

    pub fn unscale_theta(&self, theta: &[f64]) -> Vec<f64> {
        theta.iter().enumerate().map(|(k, v)| self.input_scaler.invert_value(k, *v)).collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum EmulatorModel {
    Gp(GpEmulator),
    Multivariate(MultivariateEmulator),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub kind: EmulatorKind,
    pub inducing: usize,
    pub epoch: usize,
    /// Subsample validation RMSE (standardized units) at this epoch.
    pub val_rmse: Option<f64>,
    pub model: EmulatorModel,
    pub context: DataContext,
}

impl Checkpoint {
    /// Block emulator over every nuclide of the context, in context order.
    pub fn block(&self) -> Box<dyn BlockEmulator + '_> {
        match &self.model {
            EmulatorModel::Gp(g) => Box::new(Broadcast {
                emulator: g,
                block: self.context.nuclide_block(),
            }),
            EmulatorModel::Multivariate(m) => Box::new(m),
        }
    }

    /// Predictive means (standardized) at scaled input rows; `sources` gives
    /// each row's nuclide for the multivariate family.
    pub fn predict_means(&self, x: &Matrix, sources: &[RowSource]) -> Result<Vector> {
        match &self.model {
            EmulatorModel::Gp(g) => Ok(g.predict_marginals(x, false)?.0),
            EmulatorModel::Multivariate(m) => {
                if sources.len() != x.nrows() {
                    return Err(Error::dim("one source per row required"));
                }
                let p = self.context.n_params();
                let mut cache: HashMap<usize, Vector> = HashMap::new();
                let mut out = Vector::zeros(x.nrows());
                for (r, src) in sources.iter().enumerate() {
                    if !cache.contains_key(&src.set) {
                        let theta: Vec<f64> = x.row(r).iter().take(p).copied().collect();
                        cache.insert(src.set, m.predict_with(&theta, false)?.mean);
                    }
                    out[r] = cache[&src.set][src.nuclide];
                }
                Ok(out)
            }
        }
    }

    /// One single-point predictive evaluation at a scaled input row.
    pub fn predict_point(&self, row: &[f64]) -> Result<(f64, f64)> {
        match &self.model {
            EmulatorModel::Gp(g) => {
                let (m, v) = g.predict_marginals(&Matrix::from_row_slice(1, row.len(), row), true)?;
                Ok((m[0], v[0]))
            }
            EmulatorModel::Multivariate(mv) => {
                let pred = mv.predict_with(&row[..self.context.n_params()], true)?;
                Ok((pred.mean[0], pred.cov[(0, 0)]))
            }
        }
    }
}

/// First property violated by a predictive covariance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GateFailure {
    NonFinite,
    Asymmetric,
    NotSpd,
    PredictionFailed,
}

impl GateFailure {
    pub fn as_str(self) -> &'static str {
        match self {
            GateFailure::NonFinite => "non-finite",
            GateFailure::Asymmetric => "asymmetric",
            GateFailure::NotSpd => "not-spd",
            GateFailure::PredictionFailed => "prediction-failed",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GateOutcome {
    pub passed: bool,
    pub failure: Option<GateFailure>,
    /// Index of the first failing probe.
    pub probe: Option<usize>,
}

impl GateOutcome {
    pub fn status(&self) -> &'static str {
        match self.failure {
            None => "pass",
            Some(f) => f.as_str(),
        }
    }
}

/// Finite, symmetric within [`GATE_SYMMETRY_TOL`], and Cholesky-factorable
/// on the [`GATE_LADDER`].
pub fn check_covariance(cov: &Matrix) -> std::result::Result<(), GateFailure> {
    if cov.iter().any(|v| !v.is_finite()) {
        return Err(GateFailure::NonFinite);
    }
    if cov.nrows() != cov.ncols() {
        return Err(GateFailure::Asymmetric);
    }
    let asym = (cov - cov.transpose()).amax();
    if asym > GATE_SYMMETRY_TOL {
        return Err(GateFailure::Asymmetric);
    }
    let mut c = cov.clone();
    symmetrize(&mut c);
    chol_jitter(&c, &GATE_LADDER).map(|_| ()).map_err(|_| GateFailure::NotSpd)
}

/// Checks the block predictive covariance at every probe θ (rows of `probes`).
pub fn stability_gate(emulator: &dyn BlockEmulator, probes: &Matrix) -> GateOutcome {
    for (i, row) in probes.row_iter().enumerate() {
        let theta: Vec<f64> = row.iter().copied().collect();
        let failure = match emulator.predict_block(&theta) {
            Ok(pred) => check_covariance(&pred.cov).err(),
            Err(_) => Some(GateFailure::PredictionFailed),
        };
        if let Some(f) = failure {
            return GateOutcome {
                passed: false,
                failure: Some(f),
                probe: Some(i),
            };
        }
    }
    GateOutcome {
        passed: true,
        failure: None,
        probe: None,
    }
}

/// `count` probes uniform in [−1, 1]^dim from the run's probe stream.
pub fn stability_probes(dim: usize, count: usize, seed: u64) -> Matrix {
    let mut rng = substream(seed, streams::STABILITY_PROBES);
    Matrix::from_fn(count, dim, |_, _| rng.random_range(-1.0..=1.0))
}

pub fn rmse(predicted: &Vector, targets: &Vector) -> Result<f64> {
    if predicted.len() != targets.len() || predicted.is_empty() {
        return Err(Error::dim(format!(
            "{} predictions for {} targets",
            predicted.len(),
            targets.len()
        )));
    }
    Ok(((predicted - targets).norm_squared() / predicted.len() as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub samples: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub median: f64,
}

impl Timing {
    fn from_samples(samples: Vec<f64>) -> Self {
        let n = samples.len() as f64;
        let mean = samples.iter().sum::<f64>() / n;
        let std = (samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n).sqrt();
        let mut sorted = samples.clone();
        sorted.sort_by(f64::total_cmp);
        let k = sorted.len();
        let median = if k % 2 == 1 {
            sorted[k / 2]
        } else {
            0.5 * (sorted[k / 2 - 1] + sorted[k / 2])
        };
        Timing {
            samples,
            mean,
            std,
            median,
        }
    }
}

/// Wall-clock seconds of `repetitions` single-point evaluations `eval(i)`,
/// one per point index, after one untimed warm-up call.
pub fn bench_predict<F>(repetitions: usize, mut eval: F) -> Result<Timing>
where
    F: FnMut(usize) -> Result<(f64, f64)>,
{
    if repetitions == 0 {
        return Err(Error::arg("at least one repetition required"));
    }
    std::hint::black_box(eval(0)?);
    let mut samples = Vec::with_capacity(repetitions);
    for i in 0..repetitions {
        let start = Instant::now();
        let out = eval(i);
        let dt = start.elapsed().as_secs_f64();
        std::hint::black_box(out?);
        samples.push(dt.max(f64::MIN_POSITIVE));
    }
    Ok(Timing::from_samples(samples))
}

/// Times a checkpoint on `repetitions` distinct validation rows drawn from
/// the benchmark stream.
pub fn bench_checkpoint(ckpt: &Checkpoint, x_val: &Matrix, repetitions: usize, seed: u64) -> Result<Timing> {
    if x_val.nrows() == 0 {
        return Err(Error::arg("no validation rows to time"));
    }
    let mut rng = substream(seed, streams::BENCH_POINTS);
    let n = x_val.nrows();
    let picks: Vec<usize> = if repetitions <= n {
        index::sample(&mut rng, n, repetitions).into_vec()
    } else {
        (0..repetitions).map(|_| rng.random_range(0..n)).collect()
    };
    let rows: Vec<Vec<f64>> = picks.iter().map(|&r| x_val.row(r).iter().copied().collect()).collect();
    bench_predict(repetitions, |i| {
        ckpt.predict_point(&rows[i])
            .map_err(|e| Error::Evaluation {
                theta: rows[i].clone(),
                reason: e.to_string(),
            })
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateStatus {
    Pass,
    Fail,
    /// Not evaluated (validation RMSE did not improve).
    Skipped,
}

impl GateStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            GateStatus::Pass => "pass",
            GateStatus::Fail => "fail",
            GateStatus::Skipped => "skipped",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub epoch: usize,
    /// Training loss: negative objective per training row (NaN if non-finite).
    pub loss: f64,
    /// Subsample validation RMSE, standardized units (NaN if not computed).
    pub val_rmse: f64,
    pub gate: GateStatus,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointPair {
    pub final_model: Checkpoint,
    pub best_stable: Option<Checkpoint>,
    pub traces: Vec<TraceRow>,
    pub initial_loss: f64,
    pub epochs_completed: usize,
    pub aborted: bool,
}

/// One family's optimizer state.
trait Trainer {
    /// Current training loss.
    fn loss(&self) -> f64;
    /// One epoch; `Ok(false)` when the update was skipped as non-finite.
    fn epoch(&mut self, rng: &mut Rng) -> Result<bool>;
    fn snapshot(&self) -> Result<EmulatorModel>;
}

enum FirstOrder {
    Lbfgs(Option<Lbfgs>, OptimizerConfig),
    Adam(AdamState, OptimizerConfig),
}

struct SgpTrainer<'a> {
    x: &'a Matrix,
    y: &'a Vector,
    model: SgpModel,
    opt: FirstOrder,
    loss: f64,
    /// LBFGS found no further decrease; later epochs leave the model as is.
    converged: bool,
}

fn sgp_objective<'b>(template: &'b SgpModel, x: &'b Matrix, y: &'b Vector) -> impl FnMut(&[f64]) -> Option<(f64, Vec<f64>)> + 'b {
    let n = x.nrows() as f64;
    move |flat: &[f64]| {
        let mut m = template.clone();
        m.set_flat(flat).ok()?;
        let (v, g) = m.collapsed_bound_grad(x, y).ok()?;
        Some((-v / n, g.to_flat().into_iter().map(|gi| -gi / n).collect()))
    }
}

impl<'a> SgpTrainer<'a> {
    fn new(x: &'a Matrix, y: &'a Vector, model: SgpModel, opt: FirstOrder) -> Self {
        let loss = model
            .collapsed_bound(x, y)
            .map_or(f64::NAN, |v| -v / x.nrows() as f64);
        SgpTrainer {
            x,
            y,
            model,
            opt,
            loss,
            converged: false,
        }
    }
}

impl Trainer for SgpTrainer<'_> {
    fn loss(&self) -> f64 {
        self.loss
    }

    fn epoch(&mut self, _rng: &mut Rng) -> Result<bool> {
        if self.converged {
            return Ok(true);
        }
        if let Some(net) = &mut self.model.feature_map {
            net.refresh_latent_scaler(self.x)?;
        }
        let template = self.model.clone();
        let mut objective = sgp_objective(&template, self.x, self.y);
        match &mut self.opt {
            FirstOrder::Lbfgs(state, config) => {
                if state.is_none() {
                    match Lbfgs::new(config, template.to_flat(), &mut objective) {
                        Ok(l) => *state = Some(l),
                        Err(_) => {
                            self.loss = f64::NAN;
                            return Ok(false);
                        }
                    }
                }
                let l = state.as_mut().expect("initialized");
                match l.step(&mut objective) {
                    Ok(LbfgsStatus::Converged) => self.converged = true,
                    Ok(LbfgsStatus::Moved) => {}
                    Err(_) => {
                        self.loss = f64::NAN;
                        return Ok(false);
                    }
                }
                self.model.set_flat(&l.x)?;
                self.loss = l.value;
                Ok(true)
            }
            FirstOrder::Adam(state, config) => {
                let mut flat = template.to_flat();
                let Some((v, g)) = objective(&flat) else {
                    self.loss = f64::NAN;
                    return Ok(false);
                };
                let mask = template.decay_mask();
                if adam_step(state, &mut flat, &g, config, Some(&mask)).is_err() {
                    self.loss = f64::NAN;
                    return Ok(false);
                }
                self.model.set_flat(&flat)?;
                self.loss = v;
                Ok(true)
            }
        }
    }

    fn snapshot(&self) -> Result<EmulatorModel> {
        Ok(EmulatorModel::Gp(GpEmulator::new(
            self.model.predictor(self.x, self.y)?,
            self.model.feature_map.clone(),
        )))
    }
}

struct SvgpTrainer<'a> {
    x: &'a Matrix,
    y: &'a Vector,
    model: SvgpModel,
    batch_size: usize,
    natgrad_lr: f64,
    adam: AdamState,
    adam_config: OptimizerConfig,
    loss: f64,
}

impl SvgpTrainer<'_> {
    fn flat(&self) -> Vec<f64> {
        let mut out = self.model.hyper_flat();
        out.extend(self.model.variational.inducing.locations.transpose().iter());
        out
    }

    fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        let nh = self.model.hyper_flat().len();
        self.model.set_hyper_flat(&flat[..nh])?;
        let (m, d) = self.model.variational.inducing.locations.shape();
        self.model.variational.inducing.locations = Matrix::from_row_slice(m, d, &flat[nh..]);
        Ok(())
    }

    fn mask(&self) -> Vec<bool> {
        let mut mask = self.model.decay_mask();
        mask.extend(std::iter::repeat_n(false, self.model.variational.inducing.locations.len()));
        mask
    }

    /// One mini-batch update; `None` if skipped.
    fn batch_step(&mut self, rows: &[usize]) -> Option<f64> {
        let n = self.x.nrows();
        let bx = self.x.select_rows(rows.iter());
        let by = Vector::from_iterator(rows.len(), rows.iter().map(|&r| self.y[r]));
        let (v, g) = self.model.elbo_grad(&bx, &by, n).ok()?;
        if !v.is_finite() {
            return None;
        }
        let q = natgrad_step(&self.model.variational, &g.q_gradient(), self.natgrad_lr).ok()?;
        let mut flat = self.flat();
        let mut grad: Vec<f64> = g.hyper_flat();
        grad.extend(g.inducing.transpose().iter());
        let grad: Vec<f64> = grad.into_iter().map(|gi| -gi / n as f64).collect();
        let mask = self.mask();
        adam_step(&mut self.adam, &mut flat, &grad, &self.adam_config, Some(&mask)).ok()?;
        let saved = self.model.clone();
        self.model.variational = q;
        if self.set_flat(&flat).is_err() {
            self.model = saved;
            return None;
        }
        Some(-v / n as f64)
    }
}

impl Trainer for SvgpTrainer<'_> {
    fn loss(&self) -> f64 {
        self.loss
    }

    fn epoch(&mut self, rng: &mut Rng) -> Result<bool> {
        if let Some(net) = &mut self.model.feature_map {
            net.refresh_latent_scaler(self.x)?;
        }
        let mut order: Vec<usize> = (0..self.x.nrows()).collect();
        order.shuffle(rng);
        let mut total = 0.0;
        let mut weight = 0usize;
        let mut any_skipped = false;
        for batch in order.chunks(self.batch_size) {
            match self.batch_step(batch) {
                Some(l) => {
                    total += l * batch.len() as f64;
                    weight += batch.len();
                }
                None => any_skipped = true,
            }
        }
        if weight == 0 {
            self.loss = f64::NAN;
            return Ok(false);
        }
        self.loss = total / weight as f64;
        Ok(!any_skipped)
    }

    fn snapshot(&self) -> Result<EmulatorModel> {
        Ok(EmulatorModel::Gp(GpEmulator::new(
            self.model.predictor()?,
            self.model.feature_map.clone(),
        )))
    }
}

/// Number of mini-batches per epoch and the size of the last one.
pub fn batch_layout(n_train: usize, batch_size: usize) -> (usize, usize) {
    let full = n_train / batch_size;
    let rem = n_train % batch_size;
    if rem == 0 {
        (full, batch_size)
    } else {
        (full + 1, rem)
    }
}

fn initial_hyper(config: &TrainConfig, dim: usize) -> Result<KernelHyper> {
    KernelHyper::new(1.0, vec![config.init_lengthscale; dim], config.init_noise)
}

fn build_trainer<'a>(ds: &'a EmulationDataset, config: &TrainConfig) -> Result<Box<dyn Trainer + 'a>> {
    let (x, y) = (&ds.x_train, &ds.y_train);
    let mut init_rng = substream(config.seed, streams::INDUCING_INIT);
    let net = if config.kind.is_deep() {
        let mut mlp_rng = substream(config.seed, streams::MLP_INIT);
        let mut net = MlpParams::init(&config.layer_dims, &mut mlp_rng)?;
        net.refresh_latent_scaler(x)?;
        Some(net)
    } else {
        None
    };
    let feature_dim = net.as_ref().map_or(x.ncols(), MlpParams::output_dim);
    let pick = index::sample(&mut init_rng, x.nrows(), config.inducing).into_vec();
    let z_inputs = x.select_rows(pick.iter());
    let z = match &net {
        Some(n) => n.forward(&z_inputs)?,
        None => z_inputs,
    };
    let inducing = InducingPoints::new(z)?;
    let hyper = initial_hyper(config, feature_dim)?;
    let mean0 = y.mean();
    Ok(match config.kind {
        EmulatorKind::Sgp | EmulatorKind::Dksgp => {
            let mut model = SgpModel::new(hyper, mean0, inducing)?;
            let opt = if let Some(n) = net {
                model = model.with_feature_map(n)?;
                FirstOrder::Adam(
                    AdamState::new(model.to_flat().len()),
                    config.adam().with_weight_decay(config.weight_decay),
                )
            } else {
                FirstOrder::Lbfgs(None, OptimizerConfig::lbfgs(config.lbfgs_lr))
            };
            Box::new(SgpTrainer::new(x, y, model, opt))
        }
        EmulatorKind::Svgp | EmulatorKind::Dksvgp => {
            let mut model = SvgpModel::new(hyper, mean0, inducing)?;
            let mut adam_config = config.adam();
            if let Some(n) = net {
                model = model.with_feature_map(n)?;
                adam_config = adam_config.with_weight_decay(config.weight_decay);
            }
            let loss = model
                .elbo(x, y, x.nrows())
                .map_or(f64::NAN, |v| -v / x.nrows() as f64);
            Box::new(SvgpTrainer {
                x,
                y,
                model,
                batch_size: config.batch_size,
                natgrad_lr: config.natgrad_lr,
                adam: AdamState::new(0),
                adam_config,
                loss,
            })
        }
        EmulatorKind::Multivariate => unreachable!("handled separately"),
    })
}

/// Fixed validation rows used for per-epoch model selection.
fn validation_subsample(ds: &EmulationDataset, size: usize, seed: u64) -> (Matrix, Vector, Vec<RowSource>) {
    let n = ds.n_val();
    let mut idx: Vec<usize> = if size >= n {
        (0..n).collect()
    } else {
        index::sample(&mut substream(seed, streams::VALIDATION_SUBSAMPLE), n, size).into_vec()
    };
    idx.sort_unstable();
    (
        ds.x_val.select_rows(idx.iter()),
        Vector::from_iterator(idx.len(), idx.iter().map(|&i| ds.y_val[i])),
        idx.iter().map(|&i| ds.val_sources[i]).collect(),
    )
}

/// Trains one emulator family on the dataset's training partition.
pub fn train_emulator(ds: &EmulationDataset, config: &TrainConfig) -> Result<CheckpointPair> {
    config.validate(ds)?;
    let context = DataContext::from_dataset(ds);
    let probes = stability_probes(ds.n_params(), config.stability_probes, config.seed);
    let (vx, vy, vsrc) = validation_subsample(ds, config.validation_subsample, config.seed);
    let make = |epoch: usize, model: EmulatorModel, val_rmse: Option<f64>| Checkpoint {
        kind: config.kind,
        inducing: config.inducing,
        epoch,
        val_rmse,
        model,
        context: context.clone(),
    };
    let score = |ckpt: &Checkpoint| -> Option<f64> {
        if vy.is_empty() {
            return None;
        }
        let pred = ckpt.predict_means(&vx, &vsrc).ok()?;
        rmse(&pred, &vy).ok().filter(|r| r.is_finite())
    };
    let gate = |ckpt: &Checkpoint| stability_gate(ckpt.block().as_ref(), &probes);

    if config.kind == EmulatorKind::Multivariate {
        return train_multivariate(ds, config, &make, &score, &gate);
    }

    let mut trainer = build_trainer(ds, config)?;
    let initial_loss = trainer.loss();
    let mut current = make(0, trainer.snapshot()?, None);
    current.val_rmse = score(&current);
    let mut best: Option<Checkpoint> = None;
    let mut best_rmse = f64::INFINITY;
    if config.epochs == 0 && gate(&current).passed {
        best = Some(current.clone());
    }
    let mut traces = Vec::with_capacity(config.epochs);
    let mut rng = substream(config.seed, streams::MINIBATCH);
    let mut bad_streak = 0;
    let mut aborted = false;
    let mut completed = 0;
    for epoch in 1..=config.epochs {
        let ok = trainer.epoch(&mut rng)?;
        let loss = trainer.loss();
        completed = epoch;
        if !ok || !loss.is_finite() {
            bad_streak += 1;
        } else {
            bad_streak = 0;
        }
        let snap = trainer.snapshot().ok().map(|m| make(epoch, m, None));
        let mut row = TraceRow {
            epoch,
            loss: if loss.is_finite() { loss } else { f64::NAN },
            val_rmse: f64::NAN,
            gate: GateStatus::Skipped,
        };
        if let Some(mut ckpt) = snap {
            ckpt.val_rmse = score(&ckpt);
            if let Some(r) = ckpt.val_rmse {
                row.val_rmse = r;
                if r < best_rmse {
                    if gate(&ckpt).passed {
                        row.gate = GateStatus::Pass;
                        best_rmse = r;
                        best = Some(ckpt.clone());
                    } else {
                        row.gate = GateStatus::Fail;
                    }
                }
            }
            current = ckpt;
        }
        traces.push(row);
        if bad_streak >= ABORT_AFTER {
            aborted = true;
            break;
        }
    }
    Ok(CheckpointPair {
        final_model: current,
        best_stable: best,
        traces,
        initial_loss,
        epochs_completed: completed,
        aborted,
    })
}

fn train_multivariate(
    ds: &EmulationDataset,
    config: &TrainConfig,
    make: &dyn Fn(usize, EmulatorModel, Option<f64>) -> Checkpoint,
    score: &dyn Fn(&Checkpoint) -> Option<f64>,
    gate: &dyn Fn(&Checkpoint) -> GateOutcome,
) -> Result<CheckpointPair> {
    let (grid, _, params) = ds.training_grid()?;
    let mv = MvConfig {
        components: config.components,
        lbfgs: OptimizerConfig::lbfgs(config.lbfgs_lr),
        lbfgs_iters: config.epochs,
        init_lengthscale: config.init_lengthscale,
        init_noise: config.init_noise,
        ..MvConfig::default()
    };
    let (emulator, lml_traces) = mv_fit_traced(&params, &grid, &mv)?;
    let n = params.nrows() as f64;
    let longest = lml_traces.iter().map(Vec::len).max().unwrap_or(0);
    let at = |e: usize| -> f64 {
        -lml_traces
            .iter()
            .map(|t| t[e.min(t.len() - 1)])
            .sum::<f64>()
            / n
    };
    let initial_loss = if longest > 0 { at(0) } else { f64::NAN };
    let epochs = longest.saturating_sub(1);
    let mut ckpt = make(epochs, EmulatorModel::Multivariate(emulator), None);
    ckpt.val_rmse = score(&ckpt);
    let outcome = gate(&ckpt);
    let mut traces: Vec<TraceRow> = (1..=epochs)
        .map(|e| TraceRow {
            epoch: e,
            loss: at(e),
            val_rmse: f64::NAN,
            gate: GateStatus::Skipped,
        })
        .collect();
    if let Some(last) = traces.last_mut() {
        last.val_rmse = ckpt.val_rmse.unwrap_or(f64::NAN);
        last.gate = if outcome.passed { GateStatus::Pass } else { GateStatus::Fail };
    }
    Ok(CheckpointPair {
        best_stable: outcome.passed.then(|| ckpt.clone()),
        final_model: ckpt,
        traces,
        initial_loss,
        epochs_completed: epochs,
        aborted: false,
    })
}

/// Validation RMSE on the full validation partition, in standardized units and MeV.
pub fn evaluate(ckpt: &Checkpoint, ds: &EmulationDataset) -> Result<(f64, f64)> {
    let pred = ckpt.predict_means(&ds.x_val, &ds.val_sources)?;
    let r = rmse(&pred, &ds.y_val)?;
    Ok((r, r * ds.target_unit()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub kind: EmulatorKind,
    pub inducing: usize,
    /// Which checkpoint the metrics describe.
    pub checkpoint: String,
    pub val_rmse_std: f64,
    pub val_rmse_mev: f64,
    pub time_mean_s: f64,
    pub time_std_s: f64,
    pub gate_status: String,
    pub epochs_completed: usize,
    pub aborted: bool,
}

pub const FINAL_CHECKPOINT_FILE: &str = "final.json";
pub const BEST_CHECKPOINT_FILE: &str = "best_stable.json";
pub const TRACE_FILE: &str = "trace.csv";
pub const METRICS_FILE: &str = "metrics.json";

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    fs::write(path, serde_json::to_string(ckpt)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn write_traces(path: &Path, traces: &[TraceRow]) -> Result<()> {
    let mut out = String::from("epoch,loss,val_rmse,gate\n");
    for t in traces {
        out.push_str(&format!("{},{:?},{:?},{}\n", t.epoch, t.loss, t.val_rmse, t.gate.as_str()));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Writes both checkpoints (when present) and the trace CSV into `dir`.
pub fn save_pair(dir: &Path, pair: &CheckpointPair) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    save_checkpoint(&dir.join(FINAL_CHECKPOINT_FILE), &pair.final_model)?;
    if let Some(b) = &pair.best_stable {
        save_checkpoint(&dir.join(BEST_CHECKPOINT_FILE), b)?;
    }
    write_traces(&dir.join(TRACE_FILE), &pair.traces)
}

/// The checkpoint used downstream: best stable if any, else final.
pub fn preferred(pair: &CheckpointPair) -> &Checkpoint {
    pair.best_stable.as_ref().unwrap_or(&pair.final_model)
}

/// Full-validation RMSE, timing and gate status of the preferred checkpoint.
pub fn run_metrics(pair: &CheckpointPair, ds: &EmulationDataset, config: &TrainConfig) -> Result<RunMetrics> {
    let ckpt = preferred(pair);
    let (r_std, r_mev) = evaluate(ckpt, ds)?;
    let timing = bench_checkpoint(ckpt, &ds.x_val, BENCH_REPETITIONS, config.seed)?;
    let probes = stability_probes(ds.n_params(), config.stability_probes, config.seed);
    let gate = stability_gate(ckpt.block().as_ref(), &probes);
    Ok(RunMetrics {
        kind: config.kind,
        inducing: config.inducing,
        checkpoint: if pair.best_stable.is_some() { "best_stable" } else { "final" }.to_string(),
        val_rmse_std: r_std,
        val_rmse_mev: r_mev,
        time_mean_s: timing.mean,
        time_std_s: timing.std,
        gate_status: gate.status().to_string(),
        epochs_completed: pair.epochs_completed,
        aborted: pair.aborted,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{assemble_design, preprocess_split, synth_generate, SynthConfig};
    use crate::predictor::PredictiveGaussian;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_dataset(sets: usize, nuclides: usize, seed: u64) -> EmulationDataset {
        let (raw, _) = synth_generate(&SynthConfig {
            n_sets: sets,
            n_nuclides: nuclides,
            seed,
            ..SynthConfig::default()
        })
        .unwrap();
        preprocess_split(&assemble_design(&raw).unwrap(), 0.8, seed).unwrap()
    }

    fn quick(kind: EmulatorKind, epochs: usize) -> TrainConfig {
        TrainConfig {
            kind,
            inducing: 8,
            epochs,
            batch_size: 64,
            layer_dims: vec![14, 8, 2],
            components: 3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn sweep_and_defaults() {
        let s = inducing_sweep();
        assert_eq!(s.len(), 64);
        assert_eq!((s[0], s[1], s[63]), (2, 10, 506));
        let c = TrainConfig::default();
        assert_eq!((c.epochs, c.batch_size, c.stability_probes), (4000, 512, 10));
        assert_eq!((c.lbfgs_lr, c.natgrad_lr, c.adam_lr, c.weight_decay), (0.01, 0.1, 0.01, 1e-4));
    }

    #[test]
    fn batch_arithmetic() {
        // 57 full batches and a remainder of 29_693 − 57·512
        assert_eq!(batch_layout(29_693, 512), (58, 29_693 - 57 * 512));
        assert_eq!(29_693 - 57 * 512, 509);
        assert_eq!(batch_layout(1024, 512), (2, 512));
    }

    #[test]
    fn rmse_cases() {
        let a = Vector::from_vec(vec![1.0, 2.0, 3.0]);
        assert_eq!(rmse(&a, &a).unwrap(), 0.0);
        assert!((rmse(&a.add_scalar(0.7), &a).unwrap() - 0.7).abs() < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = Vector::from_fn(100, |_, _| rng.random_range(-1.0..1.0));
        let t = Vector::from_fn(100, |_, _| rng.random_range(-1.0..1.0));
        let direct = (p.iter().zip(t.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / 100.0).sqrt();
        assert!((rmse(&p, &t).unwrap() - direct).abs() < 1e-12);
        assert!(rmse(&p, &a).is_err());
    }

    #[test]
    fn gate_rejects_crafted_covariances() {
        let good = Matrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        assert_eq!(check_covariance(&good), Ok(()));
        let mut nan = good.clone();
        nan[(0, 1)] = f64::NAN;
        assert_eq!(check_covariance(&nan), Err(GateFailure::NonFinite));
        let mut asym = good.clone();
        asym[(0, 1)] += 1e-3;
        assert_eq!(check_covariance(&asym), Err(GateFailure::Asymmetric));
        let indefinite = Matrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert_eq!(check_covariance(&indefinite), Err(GateFailure::NotSpd));
        let singular = Matrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert_eq!(check_covariance(&singular), Ok(()), "rescued by the first nonzero rung");
        let needs_more = Matrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0 - 1e-6]);
        assert_eq!(check_covariance(&needs_more), Err(GateFailure::NotSpd));
    }

    struct Fixed(Matrix);

    impl BlockEmulator for Fixed {
        fn param_dim(&self) -> usize {
            2
        }
        fn n_outputs(&self) -> usize {
            self.0.nrows()
        }
        fn predict_block(&self, theta: &[f64]) -> Result<PredictiveGaussian> {
            let mut cov = self.0.clone();
            if theta[0] > 0.5 {
                cov[(0, 0)] = f64::INFINITY;
            }
            Ok(PredictiveGaussian {
                mean: Vector::zeros(cov.nrows()),
                cov,
            })
        }
        fn block_logpdf(&self, _: &[f64], _: &Vector, _: bool, _: bool) -> Result<(f64, Option<Vec<f64>>)> {
            unimplemented!()
        }
    }

    #[test]
    fn gate_reports_first_failing_probe() {
        let em = Fixed(Matrix::identity(3, 3));
        let probes = Matrix::from_row_slice(3, 2, &[0.0, 0.0, 0.9, 0.0, 0.0, 0.0]);
        let out = stability_gate(&em, &probes);
        assert_eq!(out.failure, Some(GateFailure::NonFinite));
        assert_eq!(out.probe, Some(1));
        let ok = stability_gate(&em, &stability_probes(2, 10, 1).map(|v| v.min(0.4)));
        assert!(ok.passed);
        assert_eq!(stability_probes(4, 10, 5), stability_probes(4, 10, 5));
    }

    #[test]
    fn sgp_training_reduces_loss_and_selects_best() {
        let ds = small_dataset(40, 5, 1);
        let pair = train_emulator(&ds, &quick(EmulatorKind::Sgp, 30)).unwrap();
        let last = pair.traces.last().unwrap().loss;
        assert!(last < pair.initial_loss, "{last} {}", pair.initial_loss);
        let best = pair.best_stable.as_ref().unwrap();
        let best_rmse = best.val_rmse.unwrap();
        for t in &pair.traces {
            if t.gate == GateStatus::Pass {
                assert!(best_rmse <= t.val_rmse);
            }
            if t.val_rmse.is_finite() {
                assert!(best_rmse <= t.val_rmse + 1e-15 || t.gate == GateStatus::Fail);
            }
        }
        assert!(!pair.aborted);
        assert_eq!(pair.epochs_completed, 30);
    }

    #[test]
    fn every_family_trains_deterministically() {
        let ds = small_dataset(30, 4, 2);
        for kind in [
            EmulatorKind::Sgp,
            EmulatorKind::Svgp,
            EmulatorKind::Dksgp,
            EmulatorKind::Dksvgp,
            EmulatorKind::Multivariate,
        ] {
            let before = ds.clone();
            let cfg = quick(kind, 3);
            let a = train_emulator(&ds, &cfg).unwrap();
            let b = train_emulator(&ds, &cfg).unwrap();
            assert_eq!(ds, before, "{kind:?} mutated the dataset");
            let bits = |p: &CheckpointPair| {
                p.traces
                    .iter()
                    .map(|t| (t.loss.to_bits(), t.val_rmse.to_bits()))
                    .collect::<Vec<_>>()
            };
            assert_eq!(bits(&a), bits(&b), "{kind:?}");
            assert!(a.traces.iter().all(|t| t.loss.is_finite()), "{kind:?}");
            let (r, mev) = evaluate(preferred(&a), &ds).unwrap();
            assert!(r.is_finite() && (mev - r * ds.target_unit()).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_epochs_keeps_initial_model() {
        let ds = small_dataset(20, 3, 4);
        let cfg = TrainConfig {
            batch_size: 16,
            ..quick(EmulatorKind::Svgp, 0)
        };
        let pair = train_emulator(&ds, &cfg).unwrap();
        assert!(pair.traces.is_empty());
        let best = pair.best_stable.unwrap();
        assert_eq!(best.epoch, 0);
        assert_eq!(
            serde_json::to_string(&best).unwrap(),
            serde_json::to_string(&pair.final_model).unwrap()
        );
    }

    #[test]
    fn checkpoint_files_round_trip() {
        let ds = small_dataset(20, 3, 5);
        let cfg = quick(EmulatorKind::Sgp, 2);
        let pair = train_emulator(&ds, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_pair(dir.path(), &pair).unwrap();
        let back = load_checkpoint(&dir.path().join(FINAL_CHECKPOINT_FILE)).unwrap();
        let a = pair.final_model.predict_means(&ds.x_val, &ds.val_sources).unwrap();
        let b = back.predict_means(&ds.x_val, &ds.val_sources).unwrap();
        assert_eq!(a, b);
        let csv = std::fs::read_to_string(dir.path().join(TRACE_FILE)).unwrap();
        assert_eq!(csv.lines().count(), 3);
        let m = run_metrics(&pair, &ds, &cfg).unwrap();
        assert_eq!(m.gate_status, "pass");
        assert!(m.time_mean_s > 0.0);
    }

    #[test]
    fn bench_records_every_repetition() {
        let mut calls = 0;
        let t = bench_predict(30, |i| {
            calls += 1;
            Ok((i as f64, 1.0))
        })
        .unwrap();
        assert_eq!(t.samples.len(), 30);
        assert_eq!(calls, 31);
        assert!(t.samples.iter().all(|s| *s > 0.0));
    }

    #[test]
    fn config_rejects_bad_values() {
        let ds = small_dataset(10, 2, 6);
        let mut c = quick(EmulatorKind::Svgp, 1);
        c.batch_size = ds.n_train() + 1;
        assert!(train_emulator(&ds, &c).is_err());
        let mut c = quick(EmulatorKind::Dksgp, 1);
        c.layer_dims = vec![5, 2];
        assert!(train_emulator(&ds, &c).is_err());
        let mut c = quick(EmulatorKind::Sgp, 1);
        c.inducing = 0;
        assert!(train_emulator(&ds, &c).is_err());
        assert!("bogus".parse::<EmulatorKind>().is_err());
        assert_eq!("dksvgp".parse::<EmulatorKind>().unwrap(), EmulatorKind::Dksvgp);
    }
}
