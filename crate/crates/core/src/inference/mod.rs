//! Parameter inference through a trained emulator: the observation
//! likelihood, multi-start maximum likelihood, NUTS under a box prior, and
//! chain diagnostics.

mod diagnostics;
mod likelihood;
mod mle;
mod nuts;

pub use diagnostics::{ess, hpd_interval, split_rhat, RhatResult};
pub use likelihood::{obs_log_likelihood, FnDensity, LogDensity, ObsLikelihood};
pub use mle::{mle_multistart, MleConfig, MleResult, DEFAULT_ROUNDS, DEFAULT_STEPS, STABILITY_THRESHOLD};
pub use nuts::{
    nuts_sample, ChainResult, NutsConfig, DEFAULT_MAX_DEPTH, DEFAULT_SAMPLES, DEFAULT_TARGET_ACCEPT, DEFAULT_WARMUP,
};

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::save_csv;
use crate::error::{Error, Result};
use crate::linalg::Matrix;

pub const SAMPLES_FILE: &str = "samples.csv";
pub const DIAGNOSTICS_FILE: &str = "diagnostics.json";
pub const MLE_FILE: &str = "mle.json";

/// Per-parameter chain summary as written to disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainDiagnostics {
    pub param_names: Vec<String>,
    pub warmup: usize,
    pub samples: usize,
    pub rhat: Vec<f64>,
    pub rhat_degenerate: Vec<bool>,
    pub ess: Vec<f64>,
    pub hpd90: Vec<(f64, f64)>,
    pub quality: Vec<bool>,
    pub posterior_mean: Vec<f64>,
    pub divergences: usize,
    pub divergence_warning: bool,
    pub step_size: f64,
    pub mean_accept: f64,
    pub mean_tree_depth: f64,
}

impl ChainDiagnostics {
    pub fn new(names: &[String], chain: &ChainResult) -> Self {
        ChainDiagnostics {
            param_names: names.to_vec(),
            warmup: chain.warmup,
            samples: chain.samples.len(),
            rhat: chain.rhat.iter().map(|r| r.value).collect(),
            rhat_degenerate: chain.rhat.iter().map(|r| r.degenerate).collect(),
            ess: chain.ess.clone(),
            hpd90: chain.hpd90.clone(),
            quality: chain.quality.clone(),
            posterior_mean: chain.mean(),
            divergences: chain.divergences,
            divergence_warning: chain.divergence_warning,
            step_size: chain.step_size,
            mean_accept: chain.mean_accept,
            mean_tree_depth: chain.mean_tree_depth,
        }
    }
}

fn check_names(names: &[String], dim: usize) -> Result<()> {
    if names.len() != dim {
        return Err(Error::dim(format!("{} names for {dim} parameters", names.len())));
    }
    Ok(())
}

/// One row per post-warmup draw, one column per parameter (scaled units).
pub fn write_samples(path: &Path, names: &[String], chain: &ChainResult) -> Result<()> {
    check_names(names, chain.param_dim)?;
    let m = Matrix::from_fn(chain.samples.len(), chain.param_dim, |i, j| chain.samples[i][j]);
    save_csv(path, names, &m)
}

pub fn write_diagnostics(path: &Path, names: &[String], chain: &ChainResult) -> Result<()> {
    check_names(names, chain.param_dim)?;
    let d = ChainDiagnostics::new(names, chain);
    fs::write(path, serde_json::to_string_pretty(&d)?).map_err(|e| Error::io(path, e))
}

#[derive(Serialize)]
struct MleRecord<'a> {
    param_names: &'a [String],
    #[serde(flatten)]
    result: &'a MleResult,
}

pub fn write_mle(path: &Path, names: &[String], mle: &MleResult) -> Result<()> {
    check_names(names, mle.consensus.len())?;
    let rec = MleRecord {
        param_names: names,
        result: mle,
    };
    fs::write(path, serde_json::to_string_pretty(&rec)?).map_err(|e| Error::io(path, e))
}
