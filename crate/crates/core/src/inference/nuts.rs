use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::diagnostics::{ess, hpd_interval, split_rhat, RhatResult};
use super::likelihood::LogDensity;
use crate::error::{Error, Result};
use crate::rng::{self, streams};

pub const DEFAULT_WARMUP: usize = 100;
pub const DEFAULT_SAMPLES: usize = 10_000;
pub const DEFAULT_MAX_DEPTH: usize = 5;
pub const DEFAULT_TARGET_ACCEPT: f64 = 0.70;

/// Energy error beyond which a trajectory is declared divergent.
const MAX_ENERGY_ERROR: f64 = 1000.0;
const MAX_START_ATTEMPTS: usize = 20;
const DIVERGENCE_WARNING_FRACTION: f64 = 0.25;
/// Draws kept away from the box faces when initializing.
const INIT_MARGIN: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NutsConfig {
    pub warmup: usize,
    pub samples: usize,
    pub max_depth: usize,
    pub target_accept: f64,
    pub seed: u64,
    /// Chain index; chain 0 uses the NUTS stream, others indexed streams.
    pub chain: u64,
    /// Starting point in box coordinates; drawn from the prior if absent.
    pub init: Option<Vec<f64>>,
}

impl Default for NutsConfig {
    fn default() -> Self {
        NutsConfig {
            warmup: DEFAULT_WARMUP,
            samples: DEFAULT_SAMPLES,
            max_depth: DEFAULT_MAX_DEPTH,
            target_accept: DEFAULT_TARGET_ACCEPT,
            seed: 0,
            chain: 0,
            init: None,
        }
    }
}

impl NutsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples < 10 {
            return Err(Error::arg("NUTS needs at least 10 post-warmup draws"));
        }
        if self.max_depth == 0 {
            return Err(Error::arg("max_depth must be positive"));
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return Err(Error::arg("target_accept must lie in (0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChainResult {
    pub param_dim: usize,
    /// Post-warmup draws in box coordinates, one per row.
    pub samples: Vec<Vec<f64>>,
    pub warmup: usize,
    pub step_size: f64,
    pub rhat: Vec<RhatResult>,
    pub ess: Vec<f64>,
    pub hpd90: Vec<(f64, f64)>,
    /// ESS > 30 and R̂ < 1.1.
    pub quality: Vec<bool>,
    pub divergences: usize,
    pub divergence_warning: bool,
    pub mean_accept: f64,
    pub mean_tree_depth: f64,
    pub start_attempts: usize,
}

impl ChainResult {
    pub fn column(&self, j: usize) -> Vec<f64> {
        self.samples.iter().map(|s| s[j]).collect()
    }

    pub fn mean(&self) -> Vec<f64> {
        let n = self.samples.len() as f64;
        (0..self.param_dim).map(|j| self.column(j).iter().sum::<f64>() / n).collect()
    }
}

/// A phase-space point in unconstrained coordinates z with θ = tanh(z).
#[derive(Debug, Clone)]
struct State {
    z: Vec<f64>,
    theta: Vec<f64>,
    logp: f64,
    grad: Vec<f64>,
}

/// log |dθ/dz| = log sech² z, stable for large |z|.
fn log_sech2(z: f64) -> f64 {
    let a = z.abs();
    2.0 * (std::f64::consts::LN_2 - a - (-2.0 * a).exp().ln_1p())
}

/// Target density in z: box-uniform prior pushed through tanh, so the
/// Jacobian supplies the prior and θ never leaves [−1, 1].
fn evaluate(target: &dyn LogDensity, z: Vec<f64>) -> Option<State> {
    let theta: Vec<f64> = z.iter().map(|v| v.tanh()).collect();
    let (v, g) = target.eval(&theta, true).ok()?;
    let g = g?;
    let mut logp = v;
    let mut grad = Vec::with_capacity(z.len());
    for j in 0..z.len() {
        logp += log_sech2(z[j]);
        grad.push(g[j] * (1.0 - theta[j] * theta[j]) - 2.0 * theta[j]);
    }
    (logp.is_finite() && grad.iter().all(|v| v.is_finite())).then_some(State { z, theta, logp, grad })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn leapfrog(target: &dyn LogDensity, s: &State, r: &[f64], eps: f64) -> Option<(State, Vec<f64>)> {
    let half: Vec<f64> = r.iter().zip(&s.grad).map(|(ri, gi)| ri + 0.5 * eps * gi).collect();
    let z: Vec<f64> = s.z.iter().zip(&half).map(|(zi, hi)| zi + eps * hi).collect();
    let next = evaluate(target, z)?;
    let r_new = half.iter().zip(&next.grad).map(|(hi, gi)| hi + 0.5 * eps * gi).collect();
    Some((next, r_new))
}

fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// A trajectory segment: its two ends, a proposal drawn from it with
/// multinomial weights, and the momentum sum used by the U-turn criterion.
struct Tree {
    minus: (State, Vec<f64>),
    plus: (State, Vec<f64>),
    proposal: State,
    log_weight: f64,
    rho: Vec<f64>,
    n_leapfrog: usize,
    sum_accept: f64,
    diverged: bool,
    turning: bool,
}

fn is_turning(rho: &[f64], r_minus: &[f64], r_plus: &[f64]) -> bool {
    dot(rho, r_minus) <= 0.0 || dot(rho, r_plus) <= 0.0
}

struct Builder<'a, R: Rng> {
    target: &'a dyn LogDensity,
    eps: f64,
    h0: f64,
    rng: &'a mut R,
}

impl<R: Rng> Builder<'_, R> {
    fn leaf(&mut self, edge: &(State, Vec<f64>), dir: f64) -> Tree {
        match leapfrog(self.target, &edge.0, &edge.1, dir * self.eps) {
            Some((s, r)) => {
                let h = -s.logp + 0.5 * dot(&r, &r);
                let delta = h - self.h0;
                let diverged = !(delta < MAX_ENERGY_ERROR);
                Tree {
                    minus: (s.clone(), r.clone()),
                    plus: (s.clone(), r.clone()),
                    proposal: s,
                    log_weight: -delta,
                    rho: r,
                    n_leapfrog: 1,
                    sum_accept: (-delta).exp().min(1.0),
                    diverged,
                    turning: false,
                }
            }
            None => Tree {
                minus: edge.clone(),
                plus: edge.clone(),
                proposal: edge.0.clone(),
                log_weight: f64::NEG_INFINITY,
                rho: edge.1.clone(),
                n_leapfrog: 1,
                sum_accept: 0.0,
                diverged: true,
                turning: false,
            },
        }
    }

    fn build(&mut self, edge: &(State, Vec<f64>), dir: f64, depth: usize) -> Tree {
        if depth == 0 {
            return self.leaf(edge, dir);
        }
        let first = self.build(edge, dir, depth - 1);
        if first.diverged || first.turning {
            return first;
        }
        let outer = if dir > 0.0 { &first.plus } else { &first.minus };
        let second = self.build(&outer.clone(), dir, depth - 1);
        let mut merged = self.merge(first, second, dir, false);
        if !merged.diverged && !merged.turning {
            merged.turning = is_turning(&merged.rho, &merged.minus.1, &merged.plus.1);
        }
        merged
    }

    /// Joins `old` with `new`, which extends it in direction `dir`. Inside a
    /// subtree the proposal is chosen in proportion to weight; at the top
    /// level it is biased toward the new half.
    fn merge(&mut self, old: Tree, new: Tree, dir: f64, biased: bool) -> Tree {
        let log_weight = log_add_exp(old.log_weight, new.log_weight);
        let take_new = if new.diverged || new.turning {
            false
        } else if biased {
            self.rng.random::<f64>().ln() < new.log_weight - old.log_weight
        } else {
            self.rng.random::<f64>().ln() < new.log_weight - log_weight
        };
        let rho = old.rho.iter().zip(&new.rho).map(|(a, b)| a + b).collect();
        let (minus, plus) = if dir > 0.0 { (old.minus, new.plus) } else { (new.minus, old.plus) };
        Tree {
            minus,
            plus,
            proposal: if take_new { new.proposal } else { old.proposal },
            log_weight,
            rho,
            n_leapfrog: old.n_leapfrog + new.n_leapfrog,
            sum_accept: old.sum_accept + new.sum_accept,
            diverged: new.diverged,
            turning: new.turning,
        }
    }
}

struct Transition {
    state: State,
    accept: f64,
    depth: usize,
    diverged: bool,
}

fn transition<R: Rng>(target: &dyn LogDensity, current: &State, eps: f64, max_depth: usize, rng: &mut R) -> Transition {
    let r0: Vec<f64> = (0..current.z.len()).map(|_| StandardNormal.sample(rng)).collect();
    let h0 = -current.logp + 0.5 * dot(&r0, &r0);
    let mut tree = Tree {
        minus: (current.clone(), r0.clone()),
        plus: (current.clone(), r0.clone()),
        proposal: current.clone(),
        log_weight: 0.0,
        rho: r0,
        n_leapfrog: 0,
        sum_accept: 0.0,
        diverged: false,
        turning: false,
    };
    let mut depth = 0;
    let mut builder = Builder { target, eps, h0, rng };
    while depth < max_depth {
        let dir = if builder.rng.random::<bool>() { 1.0 } else { -1.0 };
        let edge = if dir > 0.0 { tree.plus.clone() } else { tree.minus.clone() };
        let sub = builder.build(&edge, dir, depth);
        depth += 1;
        let stop = sub.diverged || sub.turning;
        tree = builder.merge(tree, sub, dir, true);
        if stop {
            break;
        }
        if is_turning(&tree.rho, &tree.minus.1, &tree.plus.1) {
            break;
        }
    }
    Transition {
        accept: if tree.n_leapfrog > 0 {
            tree.sum_accept / tree.n_leapfrog as f64
        } else {
            0.0
        },
        diverged: tree.diverged,
        depth,
        state: tree.proposal,
    }
}

/// Step size whose single-leapfrog acceptance crosses 1/2.
fn initial_step_size<R: Rng>(target: &dyn LogDensity, s: &State, rng: &mut R) -> f64 {
    let accept_log = |eps: f64, rng: &mut R| -> f64 {
        let r: Vec<f64> = (0..s.z.len()).map(|_| StandardNormal.sample(rng)).collect();
        let h0 = -s.logp + 0.5 * dot(&r, &r);
        match leapfrog(target, s, &r, eps) {
            Some((n, rn)) => h0 - (-n.logp + 0.5 * dot(&rn, &rn)),
            None => f64::NEG_INFINITY,
        }
    };
    let mut eps = 1.0;
    let mut la = accept_log(eps, rng);
    let up = la > 0.5f64.ln();
    for _ in 0..100 {
        if up != (la > 0.5f64.ln()) {
            break;
        }
        eps = if up { eps * 2.0 } else { eps * 0.5 };
        la = accept_log(eps, rng);
    }
    eps.clamp(1e-8, 1e3)
}

/// Dual-averaging step-size adaptation with the usual constants.
struct DualAveraging {
    mu: f64,
    h_bar: f64,
    log_eps_bar: f64,
    m: f64,
    target: f64,
}

impl DualAveraging {
    const GAMMA: f64 = 0.05;
    const T0: f64 = 10.0;
    const KAPPA: f64 = 0.75;

    fn new(eps0: f64, target: f64) -> Self {
        DualAveraging {
            mu: (10.0 * eps0).ln(),
            h_bar: 0.0,
            log_eps_bar: 0.0,
            m: 0.0,
            target,
        }
    }

    /// Returns the next step size.
    fn update(&mut self, accept: f64) -> f64 {
        self.m += 1.0;
        let w = 1.0 / (self.m + Self::T0);
        self.h_bar = (1.0 - w) * self.h_bar + w * (self.target - accept);
        let log_eps = self.mu - self.m.sqrt() / Self::GAMMA * self.h_bar;
        let eta = self.m.powf(-Self::KAPPA);
        self.log_eps_bar = eta * log_eps + (1.0 - eta) * self.log_eps_bar;
        log_eps.exp()
    }

    fn final_step(&self) -> f64 {
        self.log_eps_bar.exp()
    }
}

fn initial_state<R: Rng>(target: &dyn LogDensity, config: &NutsConfig, rng: &mut R) -> Result<(State, usize)> {
    let p = target.dim();
    let to_z = |theta: &[f64]| -> Vec<f64> {
        theta.iter().map(|t| t.clamp(-1.0 + INIT_MARGIN, 1.0 - INIT_MARGIN).atanh()).collect()
    };
    if let Some(init) = &config.init {
        if init.len() != p {
            return Err(Error::dim(format!("init has {} entries for {p} parameters", init.len())));
        }
        if let Some(s) = evaluate(target, to_z(init)) {
            return Ok((s, 1));
        }
    }
    for attempt in 1..=MAX_START_ATTEMPTS {
        let theta: Vec<f64> = (0..p).map(|_| rng.random_range(-1.0..1.0)).collect();
        if let Some(s) = evaluate(target, to_z(&theta)) {
            return Ok((s, attempt));
        }
    }
    Err(Error::Inference(format!(
        "log density non-finite at {MAX_START_ATTEMPTS} prior draws"
    )))
}

/// Samples `target` (a log-likelihood on θ) under the uniform prior on
/// [−1, 1]^p with NUTS. One chain; diagnostics from post-warmup draws.
pub fn nuts_sample(target: &dyn LogDensity, config: &NutsConfig) -> Result<ChainResult> {
    config.validate()?;
    let p = target.dim();
    let stream = if config.chain == 0 {
        streams::NUTS
    } else {
        streams::INDEXED_BASE + streams::NUTS * 1024 + config.chain
    };
    let mut rng = rng::substream(config.seed, stream);
    let (mut current, start_attempts) = initial_state(target, config, &mut rng)?;

    let mut eps = initial_step_size(target, &current, &mut rng);
    let mut adapt = DualAveraging::new(eps, config.target_accept);
    for _ in 0..config.warmup {
        let t = transition(target, &current, eps, config.max_depth, &mut rng);
        current = t.state;
        eps = adapt.update(t.accept);
    }
    if config.warmup > 0 {
        eps = adapt.final_step();
    }

    let mut samples = Vec::with_capacity(config.samples);
    let mut divergences = 0;
    let mut accept_sum = 0.0;
    let mut depth_sum = 0;
    for _ in 0..config.samples {
        let t = transition(target, &current, eps, config.max_depth, &mut rng);
        current = t.state;
        divergences += t.diverged as usize;
        accept_sum += t.accept;
        depth_sum += t.depth;
        samples.push(current.theta.clone());
    }

    let n = config.samples as f64;
    let mut rhat = Vec::with_capacity(p);
    let mut ess_v = Vec::with_capacity(p);
    let mut hpd90 = Vec::with_capacity(p);
    for j in 0..p {
        let col: Vec<f64> = samples.iter().map(|s| s[j]).collect();
        rhat.push(split_rhat(&col)?);
        ess_v.push(ess(&col));
        hpd90.push(hpd_interval(&col, 0.9)?);
    }
    let quality = rhat.iter().zip(&ess_v).map(|(r, &e)| e > 30.0 && r.value < 1.1).collect();
    Ok(ChainResult {
        param_dim: p,
        samples,
        warmup: config.warmup,
        step_size: eps,
        rhat,
        ess: ess_v,
        hpd90,
        quality,
        divergences,
        divergence_warning: divergences as f64 > DIVERGENCE_WARNING_FRACTION * n,
        mean_accept: accept_sum / n,
        mean_tree_depth: depth_sum as f64 / n,
        start_attempts,
    })
}
