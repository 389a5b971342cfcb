use super::OptimizerConfig;
use crate::error::{Error, Result};

/// First/second moment estimates and step counter.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

/// One bias-corrected Adam update minimizing a loss with gradient `grad`.
///
/// Coordinates flagged in `decay_mask` receive the L2 penalty gradient
/// `2 * weight_decay * w` before the moment updates.
pub fn adam_step(
    state: &mut AdamState,
    params: &mut [f64],
    grad: &[f64],
    config: &OptimizerConfig,
    decay_mask: Option<&[bool]>,
) -> Result<()> {
    let n = params.len();
    if grad.len() != n || decay_mask.is_some_and(|m| m.len() != n) {
        return Err(Error::dim(format!(
            "adam: {n} params, {} gradients",
            grad.len()
        )));
    }
    if state.m.len() != n {
        *state = AdamState::new(n);
    }
    if let Some(index) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient { index });
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - config.beta1.powi(t);
    let bc2 = 1.0 - config.beta2.powi(t);
    for i in 0..n {
        let mut g = grad[i];
        if config.weight_decay > 0.0 && decay_mask.is_some_and(|m| m[i]) {
            g += 2.0 * config.weight_decay * params[i];
        }
        state.m[i] = config.beta1 * state.m[i] + (1.0 - config.beta1) * g;
        state.v[i] = config.beta2 * state.v[i] + (1.0 - config.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= config.learning_rate * m_hat / (v_hat.sqrt() + config.epsilon);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let cfg = OptimizerConfig::adam(0.01);
        let mut st = AdamState::new(3);
        let mut p = vec![1.0, -2.0, 0.5];
        adam_step(&mut st, &mut p, &[0.0; 3], &cfg, None).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn first_step_has_magnitude_lr() {
        let cfg = OptimizerConfig::adam(0.01);
        for g in [3.0, -0.2, 1e-3] {
            let mut st = AdamState::default();
            let mut p = vec![0.0];
            adam_step(&mut st, &mut p, &[g], &cfg, None).unwrap();
            let expected = -0.01 * g / (g.abs() + 1e-8);
            assert!((p[0] - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn quadratic_trajectory_matches_recurrence() {
        // independent transcription of the published recurrence
        let (lr, b1, b2, eps) = (0.01f64, 0.9f64, 0.999f64, 1e-8f64);
        let mut x = 1.0f64;
        let (mut m, mut v) = (0.0f64, 0.0f64);
        let mut oracle = Vec::new();
        for t in 1..=10 {
            let g = 2.0 * x;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            x -= lr * mh / (vh.sqrt() + eps);
            oracle.push(x);
        }

        let cfg = OptimizerConfig::adam(lr);
        let mut st = AdamState::new(1);
        let mut p = vec![1.0];
        for expected in oracle {
            let g = 2.0 * p[0];
            adam_step(&mut st, &mut p, &[g], &cfg, None).unwrap();
            assert!((p[0] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn decay_enters_gradient_exactly() {
        let lambda = 1e-4;
        let plain = OptimizerConfig::adam(0.01);
        let decayed = OptimizerConfig::adam(0.01).with_weight_decay(lambda);
        let w = vec![0.7, -1.3];
        let g = vec![0.2, 0.4];
        let mask = [true, false];

        let mut st_a = AdamState::new(2);
        let mut pa = w.clone();
        adam_step(&mut st_a, &mut pa, &g, &decayed, Some(&mask)).unwrap();

        let g_manual = vec![g[0] + 2.0 * lambda * w[0], g[1]];
        let mut st_b = AdamState::new(2);
        let mut pb = w.clone();
        adam_step(&mut st_b, &mut pb, &g_manual, &plain, Some(&mask)).unwrap();
        assert_eq!(pa, pb);
        assert_eq!(st_a, st_b);
    }

    #[test]
    fn non_finite_gradient_reports_index() {
        let cfg = OptimizerConfig::adam(0.01);
        let mut st = AdamState::new(3);
        let mut p = vec![0.0; 3];
        match adam_step(&mut st, &mut p, &[0.0, 1.0, f64::NAN], &cfg, None) {
            Err(Error::NonFiniteGradient { index }) => assert_eq!(index, 2),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(p, vec![0.0; 3]);
    }
}
