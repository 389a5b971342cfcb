use rand::Rng;
use serde::{Deserialize, Serialize};

use super::likelihood::LogDensity;
use crate::error::{Error, Result};
use crate::optim::{lbfgs_minimize, OptimizerConfig};
use crate::rng::{streams, substream};

pub const DEFAULT_ROUNDS: usize = 10;
pub const DEFAULT_STEPS: usize = 100;
/// Parameters whose argmax spread across rounds is at most this are stable.
pub const STABILITY_THRESHOLD: f64 = 1e-4;
/// Fewer surviving rounds than this cannot support a spread estimate.
const MIN_SURVIVING: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MleConfig {
    pub rounds: usize,
    pub steps: usize,
    pub lbfgs_lr: f64,
    pub seed: u64,
}

impl Default for MleConfig {
    fn default() -> Self {
        MleConfig {
            rounds: DEFAULT_ROUNDS,
            steps: DEFAULT_STEPS,
            lbfgs_lr: 0.01,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MleResult {
    /// Argmax of the best surviving round.
    pub consensus: Vec<f64>,
    pub consensus_log_likelihood: f64,
    /// Per-round argmax; `None` for rounds that failed.
    pub rounds: Vec<Option<Vec<f64>>>,
    pub round_log_likelihood: Vec<Option<f64>>,
    /// Population standard deviation of the argmaxes per parameter.
    pub std: Vec<f64>,
    pub stable: Vec<bool>,
    /// Some round's argmax left [−1, 1] in this coordinate.
    pub out_of_bounds: Vec<bool>,
    pub failed_rounds: usize,
}

/// Maximizes `target` from `rounds` uniform starts in [−1, 1]^p, each with
/// `steps` LBFGS iterations. The search is unconstrained; leaving the box is
/// reported, not prevented.
pub fn mle_multistart(target: &dyn LogDensity, config: &MleConfig) -> Result<MleResult> {
    let p = target.dim();
    if config.rounds < MIN_SURVIVING {
        return Err(Error::arg(format!("at least {MIN_SURVIVING} rounds are needed")));
    }
    let opt = OptimizerConfig::lbfgs(config.lbfgs_lr);
    opt.validate()?;
    let mut rng = substream(config.seed, streams::MLE_STARTS);
    let starts: Vec<Vec<f64>> = (0..config.rounds)
        .map(|_| (0..p).map(|_| rng.random_range(-1.0..=1.0)).collect())
        .collect();

    let neg = |x: &[f64]| -> Option<(f64, Vec<f64>)> {
        let (v, g) = target.eval(x, true).ok()?;
        Some((-v, g?.into_iter().map(|gi| -gi).collect()))
    };

    let mut rounds = Vec::with_capacity(config.rounds);
    let mut values = Vec::with_capacity(config.rounds);
    for x0 in &starts {
        match lbfgs_minimize(neg, x0, &opt, config.steps) {
            Ok(r) if r.value.is_finite() && r.x.iter().all(|v| v.is_finite()) => {
                rounds.push(Some(r.x));
                values.push(Some(-r.value));
            }
            _ => {
                rounds.push(None);
                values.push(None);
            }
        }
    }
    let survivors: Vec<(&Vec<f64>, f64)> = rounds
        .iter()
        .zip(&values)
        .filter_map(|(x, v)| Some((x.as_ref()?, (*v)?)))
        .collect();
    if survivors.len() < MIN_SURVIVING {
        return Err(Error::Inference(format!(
            "only {} of {} MLE rounds produced a finite optimum",
            survivors.len(),
            config.rounds
        )));
    }
    let (best, best_value) = survivors
        .iter()
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(x, v)| ((*x).clone(), *v))
        .expect("survivors is non-empty");

    let k = survivors.len() as f64;
    let mut std = vec![0.0; p];
    let mut out_of_bounds = vec![false; p];
    for j in 0..p {
        let mean = survivors.iter().map(|(x, _)| x[j]).sum::<f64>() / k;
        let var = survivors.iter().map(|(x, _)| (x[j] - mean).powi(2)).sum::<f64>() / k;
        std[j] = var.sqrt();
        out_of_bounds[j] = survivors.iter().any(|(x, _)| x[j].abs() > 1.0);
    }
    let stable = std.iter().map(|&s| s <= STABILITY_THRESHOLD).collect();
    Ok(MleResult {
        consensus: best,
        consensus_log_likelihood: best_value,
        failed_rounds: config.rounds - survivors.len(),
        rounds,
        round_log_likelihood: values,
        std,
        stable,
        out_of_bounds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::FnDensity;

    fn quadratic(center: Vec<f64>, prec: Vec<f64>) -> impl Fn(&[f64]) -> (f64, Vec<f64>) {
        move |x: &[f64]| {
            let mut v = 0.0;
            let mut g = vec![0.0; x.len()];
            for j in 0..x.len() {
                let d = x[j] - center[j];
                v -= 0.5 * prec[j] * d * d;
                g[j] = -prec[j] * d;
            }
            (v, g)
        }
    }

    #[test]
    fn quadratic_surrogate_is_recovered_and_stable() {
        let center = vec![0.3, -0.5, 0.1, 0.7];
        let target = FnDensity {
            dim: 4,
            f: quadratic(center.clone(), vec![2.0, 5.0, 1.0, 3.0]),
        };
        let res = mle_multistart(&target, &MleConfig::default()).unwrap();
        for j in 0..4 {
            assert!((res.consensus[j] - center[j]).abs() < 1e-6);
            assert!(res.stable[j], "{:?}", res.std);
            assert!(!res.out_of_bounds[j]);
        }
        assert_eq!(res.failed_rounds, 0);
    }

    #[test]
    fn bimodal_coordinate_is_flagged_unstable() {
        // Modes at x₀ = ±0.5 separated by a barrier; x₁ is quadratic.
        let target = FnDensity {
            dim: 2,
            f: |x: &[f64]| {
                let a = x[0] * x[0] - 0.25;
                (-20.0 * a * a - 0.5 * x[1] * x[1], vec![-80.0 * a * x[0], -x[1]])
            },
        };
        let res = mle_multistart(&target, &MleConfig::default()).unwrap();
        let hits: Vec<f64> = res.rounds.iter().map(|r| r.as_ref().unwrap()[0]).collect();
        assert!(hits.iter().any(|&v| v > 0.4) && hits.iter().any(|&v| v < -0.4), "{hits:?}");
        assert!(!res.stable[0]);
        assert!(res.stable[1]);
    }

    #[test]
    fn optimum_outside_the_box_is_flagged() {
        let target = FnDensity {
            dim: 2,
            f: quadratic(vec![1.6, 0.0], vec![1.0, 1.0]),
        };
        let res = mle_multistart(&target, &MleConfig::default()).unwrap();
        assert!(res.out_of_bounds[0] && !res.out_of_bounds[1]);
        assert!((res.consensus[0] - 1.6).abs() < 1e-6);
    }

    #[test]
    fn too_few_finite_rounds_is_an_error() {
        let target = FnDensity {
            dim: 1,
            f: |_: &[f64]| (f64::NAN, vec![f64::NAN]),
        };
        assert!(matches!(
            mle_multistart(&target, &MleConfig::default()),
            Err(Error::Inference(_))
        ));
    }

    #[test]
    fn same_seed_same_result() {
        let target = FnDensity {
            dim: 3,
            f: quadratic(vec![0.1, 0.2, 0.3], vec![1.0, 1.0, 1.0]),
        };
        let cfg = MleConfig { steps: 3, ..Default::default() };
        assert_eq!(mle_multistart(&target, &cfg).unwrap(), mle_multistart(&target, &cfg).unwrap());
    }
}
