use std::collections::VecDeque;

use super::OptimizerConfig;
use crate::error::{Error, Result};

const ARMIJO_C1: f64 = 1e-4;
const MAX_HALVINGS: usize = 60;
const GRAD_TOL: f64 = 1e-10;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn eval_ok(v: &Option<(f64, Vec<f64>)>) -> bool {
    matches!(v, Some((f, g)) if f.is_finite() && g.iter().all(|x| x.is_finite()))
}

/// Limited-memory BFGS with a two-loop recursion and Armijo backtracking.
///
/// The configured learning rate scales the very first trial step, taken
/// along the steepest-descent direction before any curvature pairs exist.
#[derive(Debug, Clone)]
pub struct Lbfgs {
    history: usize,
    initial_step: f64,
    s: VecDeque<Vec<f64>>,
    y: VecDeque<Vec<f64>>,
    pub x: Vec<f64>,
    pub value: f64,
    pub grad: Vec<f64>,
}

/// Outcome of one [`Lbfgs::step`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepStatus {
    Moved,
    /// Gradient below tolerance or no Armijo decrease achievable.
    Converged,
}

impl Lbfgs {
    /// Starts at `x0`; fails if the objective is not finite there.
    pub fn new<F>(config: &OptimizerConfig, x0: Vec<f64>, objective: &mut F) -> Result<Self>
    where
        F: FnMut(&[f64]) -> Option<(f64, Vec<f64>)>,
    {
        config.validate()?;
        let first = objective(&x0);
        if !eval_ok(&first) {
            return Err(Error::LineSearch("objective not finite at the starting point".into()));
        }
        let (value, grad) = first.expect("checked");
        Ok(Lbfgs {
            history: config.lbfgs_history,
            initial_step: config.learning_rate,
            s: VecDeque::new(),
            y: VecDeque::new(),
            x: x0,
            value,
            grad,
        })
    }

    fn direction(&self) -> Vec<f64> {
        let k = self.s.len();
        let mut q: Vec<f64> = self.grad.iter().map(|g| -g).collect();
        let mut alpha = vec![0.0; k];
        let rho: Vec<f64> = (0..k).map(|i| 1.0 / dot(&self.y[i], &self.s[i])).collect();
        for i in (0..k).rev() {
            alpha[i] = rho[i] * dot(&self.s[i], &q);
            for (qj, yj) in q.iter_mut().zip(&self.y[i]) {
                *qj -= alpha[i] * yj;
            }
        }
        if k > 0 {
            let gamma = dot(&self.s[k - 1], &self.y[k - 1]) / dot(&self.y[k - 1], &self.y[k - 1]);
            q.iter_mut().for_each(|v| *v *= gamma);
        }
        for i in 0..k {
            let beta = rho[i] * dot(&self.y[i], &q);
            for (qj, sj) in q.iter_mut().zip(&self.s[i]) {
                *qj += (alpha[i] - beta) * sj;
            }
        }
        q
    }

    /// One quasi-Newton iteration.
    pub fn step<F>(&mut self, objective: &mut F) -> Result<StepStatus>
    where
        F: FnMut(&[f64]) -> Option<(f64, Vec<f64>)>,
    {
        let gnorm = self.grad.iter().fold(0.0f64, |a, g| a.max(g.abs()));
        if gnorm <= GRAD_TOL {
            return Ok(StepStatus::Converged);
        }
        let with_history = !self.s.is_empty();
        match self.line_search(objective)? {
            StepStatus::Converged if with_history => {
                // A stale curvature model can point nowhere useful; retry
                // once from steepest descent before giving up.
                self.s.clear();
                self.y.clear();
                self.line_search(objective)
            }
            status => Ok(status),
        }
    }

    fn line_search<F>(&mut self, objective: &mut F) -> Result<StepStatus>
    where
        F: FnMut(&[f64]) -> Option<(f64, Vec<f64>)>,
    {
        let mut d = self.direction();
        let mut slope = dot(&d, &self.grad);
        if !(slope < 0.0) || self.s.is_empty() {
            if !(slope < 0.0) {
                self.s.clear();
                self.y.clear();
            }
            d = self.grad.iter().map(|g| -g).collect();
            slope = -dot(&self.grad, &self.grad);
        }
        let mut t = if self.s.is_empty() {
            let g1: f64 = self.grad.iter().map(|g| g.abs()).sum();
            self.initial_step * (1.0f64).min(1.0 / g1)
        } else {
            1.0
        };

        let mut saw_finite = false;
        for _ in 0..MAX_HALVINGS {
            let trial: Vec<f64> = self.x.iter().zip(&d).map(|(x, di)| x + t * di).collect();
            let res = objective(&trial);
            if eval_ok(&res) {
                saw_finite = true;
                let (f_new, g_new) = res.expect("checked");
                if f_new <= self.value + ARMIJO_C1 * t * slope && f_new < self.value {
                    let s: Vec<f64> = trial.iter().zip(&self.x).map(|(a, b)| a - b).collect();
                    let y: Vec<f64> = g_new.iter().zip(&self.grad).map(|(a, b)| a - b).collect();
                    if dot(&s, &y) > 1e-12 * dot(&y, &y).sqrt() * dot(&s, &s).sqrt() {
                        if self.s.len() == self.history {
                            self.s.pop_front();
                            self.y.pop_front();
                        }
                        self.s.push_back(s);
                        self.y.push_back(y);
                    }
                    self.x = trial;
                    self.value = f_new;
                    self.grad = g_new;
                    return Ok(StepStatus::Moved);
                }
            }
            t *= 0.5;
        }
        if saw_finite {
            Ok(StepStatus::Converged)
        } else {
            Err(Error::LineSearch(format!(
                "objective non-finite along the search direction after {MAX_HALVINGS} halvings"
            )))
        }
    }
}

#[derive(Debug, Clone)]
pub struct LbfgsResult {
    /// Best point seen.
    pub x: Vec<f64>,
    pub value: f64,
    /// Objective after each accepted iteration.
    pub trace: Vec<f64>,
    pub converged: bool,
}

/// Minimizes `objective` from `x0` for at most `max_iters` iterations.
///
/// `objective` returns `None` (or non-finite values) where it cannot be
/// evaluated; such trial points are rejected by halving the step.
pub fn lbfgs_minimize<F>(
    mut objective: F,
    x0: &[f64],
    config: &OptimizerConfig,
    max_iters: usize,
) -> Result<LbfgsResult>
where
    F: FnMut(&[f64]) -> Option<(f64, Vec<f64>)>,
{
    let mut opt = Lbfgs::new(config, x0.to_vec(), &mut objective)?;
    let mut trace = Vec::with_capacity(max_iters);
    let mut converged = false;
    for _ in 0..max_iters {
        match opt.step(&mut objective)? {
            StepStatus::Moved => trace.push(opt.value),
            StepStatus::Converged => {
                converged = true;
                break;
            }
        }
    }
    Ok(LbfgsResult {
        x: opt.x,
        value: opt.value,
        trace,
        converged,
    })
}
