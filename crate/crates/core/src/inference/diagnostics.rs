use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RhatResult {
    pub value: f64,
    /// Within-half variance was zero; `value` is the sentinel 1.0.
    pub degenerate: bool,
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let v = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, v)
}

/// Split-R̂ of one chain: the two halves are treated as separate chains. The
/// middle draw of an odd-length chain is dropped.
pub fn split_rhat(chain: &[f64]) -> Result<RhatResult> {
    if chain.len() < 4 {
        return Err(Error::arg("split R-hat needs at least 4 draws"));
    }
    let n = chain.len() / 2;
    let (m1, v1) = mean_var(&chain[..n]);
    let (m2, v2) = mean_var(&chain[chain.len() - n..]);
    let w = 0.5 * (v1 + v2);
    if !(w > 0.0) {
        return Ok(RhatResult {
            value: 1.0,
            degenerate: true,
        });
    }
    let grand = 0.5 * (m1 + m2);
    let b = n as f64 * ((m1 - grand).powi(2) + (m2 - grand).powi(2));
    let nf = n as f64;
    let var_plus = (nf - 1.0) / nf * w + b / nf;
    Ok(RhatResult {
        value: (var_plus / w).sqrt(),
        degenerate: false,
    })
}

/// Effective sample size with Geyer's initial positive sequence: sums of
/// adjacent autocorrelation pairs are accumulated while they stay positive.
/// A constant chain has ESS 1.
pub fn ess(chain: &[f64]) -> f64 {
    let k = chain.len();
    if k < 2 {
        return k as f64;
    }
    let kf = k as f64;
    let mean = chain.iter().sum::<f64>() / kf;
    let c: Vec<f64> = chain.iter().map(|v| v - mean).collect();
    let autocov = |lag: usize| c[..k - lag].iter().zip(&c[lag..]).map(|(a, b)| a * b).sum::<f64>() / kf;
    let c0 = autocov(0);
    if !(c0 > 0.0) {
        return 1.0;
    }
    let mut sum_pairs = 0.0;
    let mut m = 0;
    while 2 * m + 1 < k {
        let gamma = (autocov(2 * m) + autocov(2 * m + 1)) / c0;
        if gamma <= 0.0 {
            break;
        }
        sum_pairs += gamma;
        m += 1;
    }
    let tau = (-1.0 + 2.0 * sum_pairs).max(1.0 / kf);
    kf / tau
}

/// Shortest interval containing ⌈mass·k⌉ of the `k` draws.
pub fn hpd_interval(chain: &[f64], mass: f64) -> Result<(f64, f64)> {
    if chain.len() < 10 || !(mass > 0.0 && mass <= 1.0) {
        return Err(Error::arg("HPD needs at least 10 draws and a mass in (0, 1]"));
    }
    if chain.iter().any(|v| !v.is_finite()) {
        return Err(Error::arg("HPD of non-finite draws"));
    }
    let mut s = chain.to_vec();
    s.sort_by(f64::total_cmp);
    let k = s.len();
    let w = ((mass * k as f64).ceil() as usize).clamp(1, k);
    let (lo, _) = (0..=k - w)
        .map(|i| (i, s[i + w - 1] - s[i]))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .expect("window fits");
    Ok((s[lo], s[lo + w - 1]))
}
