//! Design-matrix assembly, scaling, splitting, CSV ingestion, and a seeded
//! liquid-drop surrogate simulator.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Matrix, Vector};
use crate::rng::{streams, substream};
use crate::scaler::{AffineScaler, ScalerKind};

pub const DEFAULT_TRAIN_FRACTION: f64 = 0.8;

/// Simulator runs: `outputs[(set, nuclide)]` is NaN where the run failed.
#[derive(Debug, Clone, PartialEq)]
pub struct RawRuns {
    pub param_names: Vec<String>,
    /// s×p
    pub params: Matrix,
    /// (Z, N) per output column.
    pub nuclides: Vec<(u32, u32)>,
    /// s×k, MeV
    pub outputs: Matrix,
}

impl RawRuns {
    pub fn n_sets(&self) -> usize {
        self.params.nrows()
    }

    pub fn n_params(&self) -> usize {
        self.params.ncols()
    }

    pub fn n_nuclides(&self) -> usize {
        self.nuclides.len()
    }

    pub fn is_valid(&self, set: usize, nuclide: usize) -> bool {
        self.outputs[(set, nuclide)].is_finite()
    }

    /// Row-major over sets, then nuclides.
    pub fn validity_mask(&self) -> Vec<bool> {
        (0..self.n_sets())
            .flat_map(|i| (0..self.n_nuclides()).map(move |j| (i, j)))
            .map(|(i, j)| self.is_valid(i, j))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.param_names.len() != self.n_params() {
            return Err(Error::dim(format!(
                "{} parameter names for {} parameter columns",
                self.param_names.len(),
                self.n_params()
            )));
        }
        if self.outputs.shape() != (self.n_sets(), self.n_nuclides()) {
            return Err(Error::dim(format!(
                "outputs are {:?}, expected ({}, {})",
                self.outputs.shape(),
                self.n_sets(),
                self.n_nuclides()
            )));
        }
        Ok(())
    }
}

/// Ground truth of a synthetic run bundle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTruth {
    /// θ* in simulator units.
    pub theta: Vec<f64>,
    /// Simulator output at θ* for every nuclide (plus observation noise), MeV.
    pub observed: Vec<f64>,
    pub observation_noise_mev: f64,
    pub seed: u64,
}

/// Which set and nuclide produced a design row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowSource {
    pub set: usize,
    pub nuclide: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Design {
    /// rows × (p + 2): parameters, then Z and N.
    pub x: Matrix,
    pub y: Vector,
    pub sources: Vec<RowSource>,
    pub param_names: Vec<String>,
    pub nuclides: Vec<(u32, u32)>,
}

/// Stacks every parameter set once per nuclide (nuclide-major blocks),
/// appending Z and N and dropping failed runs.
pub fn assemble_design(raw: &RawRuns) -> Result<Design> {
    raw.validate()?;
    let p = raw.n_params();
    let mut rows = Vec::new();
    let mut y = Vec::new();
    let mut sources = Vec::new();
    for (j, &(z, n)) in raw.nuclides.iter().enumerate() {
        for i in 0..raw.n_sets() {
            if !raw.is_valid(i, j) {
                continue;
            }
            rows.extend(raw.params.row(i).iter().copied());
            rows.push(z as f64);
            rows.push(n as f64);
            y.push(raw.outputs[(i, j)]);
            sources.push(RowSource { set: i, nuclide: j });
        }
    }
    Ok(Design {
        x: Matrix::from_row_slice(y.len(), p + 2, &rows),
        y: Vector::from_vec(y),
        sources,
        param_names: raw.param_names.clone(),
        nuclides: raw.nuclides.clone(),
    })
}

/// Scaled train/validation partitions of a design.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmulationDataset {
    #[serde(with = "crate::serde_matrix")]
    pub x_train: Matrix,
    #[serde(with = "crate::serde_matrix::vector")]
    pub y_train: Vector,
    #[serde(with = "crate::serde_matrix")]
    pub x_val: Matrix,
    #[serde(with = "crate::serde_matrix::vector")]
    pub y_val: Vector,
    pub train_sources: Vec<RowSource>,
    pub val_sources: Vec<RowSource>,
    pub param_names: Vec<String>,
    pub nuclides: Vec<(u32, u32)>,
    /// Min-max to [−1, 1], all columns.
    pub input_scaler: AffineScaler,
    /// Standardization of the target, one column.
    pub target_scaler: AffineScaler,
    pub seed: u64,
}

impl EmulationDataset {
    pub fn n_train(&self) -> usize {
        self.x_train.nrows()
    }

    pub fn n_val(&self) -> usize {
        self.x_val.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.x_train.ncols()
    }

    /// Number of simulator parameters (input columns before Z and N).
    pub fn n_params(&self) -> usize {
        self.input_dim() - 2
    }

    /// Scaled (Z, N) rows of every nuclide, in column order of the runs.
    pub fn nuclide_block(&self) -> Matrix {
        scaled_nuclide_block(&self.input_scaler, &self.nuclides)
    }

    /// Simulator-unit parameters to the scaled input box.
    pub fn scale_theta(&self, theta: &[f64]) -> Vec<f64> {
        theta.iter().enumerate().map(|(k, v)| self.input_scaler.apply_value(k, *v)).collect()
    }

    pub fn unscale_theta(&self, theta: &[f64]) -> Vec<f64> {
        theta.iter().enumerate().map(|(k, v)| self.input_scaler.invert_value(k, *v)).collect()
    }

    pub fn scale_targets(&self, y: &[f64]) -> Vector {
        Vector::from_iterator(y.len(), y.iter().map(|v| self.target_scaler.apply_value(0, *v)))
    }

    /// Standardized-unit differences to MeV.
    pub fn target_unit(&self) -> f64 {
        self.target_scaler.scale[0]
    }

    /// Standardized training targets laid out as a sets × nuclides matrix
    /// (NaN where the pair is not in the training partition), keeping only
    /// sets with at least one training entry. Returns the matrix, the kept
    /// set indices and their scaled parameter rows.
    pub fn training_grid(&self) -> Result<(Matrix, Vec<usize>, Matrix)> {
        let p = self.n_params();
        let n_nuclides = self.nuclides.len();
        let mut sets: Vec<usize> = self.train_sources.iter().map(|s| s.set).collect();
        sets.sort_unstable();
        sets.dedup();
        let mut pos = std::collections::HashMap::new();
        for (r, s) in sets.iter().enumerate() {
            pos.insert(*s, r);
        }
        let mut grid = Matrix::from_element(sets.len(), n_nuclides, f64::NAN);
        let mut params = Matrix::zeros(sets.len(), p);
        for (row, src) in self.train_sources.iter().enumerate() {
            if src.nuclide >= n_nuclides {
                return Err(Error::dim(format!("nuclide index {} out of {n_nuclides}", src.nuclide)));
            }
            let r = pos[&src.set];
            grid[(r, src.nuclide)] = self.y_train[row];
            for k in 0..p {
                params[(r, k)] = self.x_train[(row, k)];
            }
        }
        Ok((grid, sets, params))
    }
}

/// Scaled (Z, N) rows, using the last two columns of `input_scaler`.
pub fn scaled_nuclide_block(input_scaler: &AffineScaler, nuclides: &[(u32, u32)]) -> Matrix {
    let p = input_scaler.cols() - 2;
    Matrix::from_fn(nuclides.len(), 2, |i, c| {
        let v = if c == 0 { nuclides[i].0 } else { nuclides[i].1 } as f64;
        input_scaler.apply_value(p + c, v)
    })
}

/// Fits both scalers on the whole design, shuffles with `seed` and puts the
/// first ⌈fraction·n⌉ rows in the training partition.
pub fn preprocess_split(design: &Design, train_fraction: f64, seed: u64) -> Result<EmulationDataset> {
    let n = design.x.nrows();
    if n < 2 {
        return Err(Error::arg(format!("need at least 2 rows to split, got {n}")));
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::arg(format!("train fraction {train_fraction} outside (0, 1)")));
    }
    let input_scaler = AffineScaler::fit(&design.x, ScalerKind::MinmaxPm1)?;
    let ycol = Matrix::from_column_slice(n, 1, design.y.as_slice());
    let target_scaler = AffineScaler::fit(&ycol, ScalerKind::Standardize)?;
    let xs = input_scaler.apply(&design.x)?;
    let ys = target_scaler.apply(&ycol)?;

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut substream(seed, streams::SPLIT));
    let n_train = ((train_fraction * n as f64).ceil() as usize).clamp(1, n - 1);
    let (tr, va) = order.split_at(n_train);
    let take = |idx: &[usize]| {
        (
            xs.select_rows(idx.iter()),
            Vector::from_iterator(idx.len(), idx.iter().map(|&i| ys[(i, 0)])),
            idx.iter().map(|&i| design.sources[i]).collect::<Vec<_>>(),
        )
    };
    let (x_train, y_train, train_sources) = take(tr);
    let (x_val, y_val, val_sources) = take(va);
    Ok(EmulationDataset {
        x_train,
        y_train,
        x_val,
        y_val,
        train_sources,
        val_sources,
        param_names: design.param_names.clone(),
        nuclides: design.nuclides.clone(),
        input_scaler,
        target_scaler,
        seed,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_params: usize,
    pub n_sets: usize,
    pub n_nuclides: usize,
    /// Fraction of (set, nuclide) entries reported as failed runs.
    pub mask_fraction: f64,
    /// Gaussian noise added to the observed data at θ*, MeV.
    pub observation_noise_mev: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_params: 12,
            n_sets: 500,
            n_nuclides: 75,
            mask_fraction: 0.01,
            observation_noise_mev: 0.0,
            seed: 0,
        }
    }
}

/// Parameter names and ranges of the surrogate; the first twelve mimic the
/// names of a Skyrme functional, extra parameters are generic.
fn synth_param_ranges(p: usize) -> Vec<(String, f64, f64)> {
    let named = [
        ("rho_c", 0.150, 0.170),
        ("e_nm", -16.2, -15.8),
        ("k_nm", 220.0, 240.0),
        ("a_sym", 28.0, 33.0),
        ("l_sym", 30.0, 70.0),
        ("inv_eff_mass", 0.9, 1.1),
        ("c_rho_drho_0", -60.0, -40.0),
        ("c_rho_drho_1", -80.0, 20.0),
        ("v0_n", -200.0, -180.0),
        ("v0_p", -220.0, -190.0),
        ("c_rho_nabla_j_0", -80.0, -60.0),
        ("c_rho_nabla_j_1", -60.0, 20.0),
    ];
    (0..p)
        .map(|k| match named.get(k) {
            Some(&(name, lo, hi)) => (name.to_string(), lo, hi),
            None => (format!("theta_{k}"), -1.0, 1.0),
        })
        .collect()
}

/// Proton number on the valley of stability for mass number `a`.
fn valley_z(a: f64) -> f64 {
    a / (1.98 + 0.0155 * a.powf(2.0 / 3.0))
}

/// Proton offsets from the valley, cycled over the nuclide list so that
/// isospin varies independently of mass number.
const VALLEY_OFFSETS: [i64; 5] = [0, 4, -2, 2, -4];

/// Nuclides with mass numbers spread evenly over [40, 208] and proton
/// numbers scattered up to four units either side of the valley.
pub fn valley_nuclides(count: usize) -> Vec<(u32, u32)> {
    (0..count)
        .map(|i| {
            let a = if count == 1 {
                120.0
            } else {
                40.0 + 168.0 * i as f64 / (count - 1) as f64
            };
            let z = valley_z(a).round() as i64 + VALLEY_OFFSETS[i % VALLEY_OFFSETS.len()];
            let n = a.round() as i64 - z;
            (z as u32, n as u32)
        })
        .collect()
}

/// Binding energy (MeV): a fixed liquid-drop baseline plus one correction
/// per normalized parameter `u_k ∈ [−1, 1]`. Corrections are low-order
/// polynomials in scaled mass number and valley offset, each with its own
/// shape over the nuclide set, so every parameter is separately identifiable
/// from a couple of dozen nuclides. Several enter nonlinearly.
pub fn surrogate_binding_energy(u: &[f64], z: f64, n: f64) -> f64 {
    let a = z + n;
    let i = (n - z) / a;
    let g = |k: usize| u.get(k).copied().unwrap_or(0.0);
    let a13 = a.cbrt();
    let a23 = a13 * a13;
    let pairing = match (z as i64 % 2, n as i64 % 2) {
        (0, 0) => 1.0,
        (1, 1) => -1.0,
        _ => 0.0,
    };
    let base = 15.75 * a - 17.8 * a23 - 0.711 * z * z / a13 - 23.7 * i * i * a + 30.0 * i * i * a23 - 8.0 * a13
        + 12.0 * pairing / a.sqrt()
        - 10.0 * i.abs();
    // Scaled mass number and valley offset, both roughly in [−1, 1].
    let x = (a - 124.0) / 84.0;
    let d = (z - valley_z(a)) / 4.0;
    let p2 = 1.5 * x * x - 0.5;
    let p3 = 2.5 * x.powi(3) - 1.5 * x;
    let p4 = 4.375 * x.powi(4) - 3.75 * x * x + 0.375;
    let q = d * d - 0.4;
    let c3 = d.powi(3) - 0.6 * d;
    let corrections = 24.0 * x * (g(0) + 0.15 * g(0) * g(0))
        + 20.0 * p2 * g(1)
        + 18.0 * p3 * (0.9 * g(2)).tanh() / 0.9f64.tanh()
        + 16.0 * p4 * g(3)
        + 20.0 * d * (g(4) + 0.2 * g(4) * g(5))
        + 18.0 * d * x * g(5)
        + 16.0 * d * p2 * (g(6) + 0.1 * g(6) * g(6))
        + 20.0 * q * g(7)
        + 18.0 * q * x * g(8)
        + 16.0 * c3 * (1.2 * g(9)).sin() / 1.2f64.sin()
        + 14.0 * q * p2 * g(10)
        + 14.0 * c3 * x * (g(11) + 0.1 * g(11) * g(0));
    let extra: f64 = (12..u.len()).map(|k| 0.5 * (u[k] * (1.0 + 0.01 * a)).sin()).sum();
    base + corrections + extra
}

/// Seeded synthetic run bundle: uniform parameter sets, nuclides around the
/// valley of stability, a surrogate simulator, random failed runs, and θ* drawn from
/// the inner 60% of each parameter range.
pub fn synth_generate(config: &SynthConfig) -> Result<(RawRuns, SyntheticTruth)> {
    if config.n_params == 0 || config.n_sets == 0 || config.n_nuclides == 0 {
        return Err(Error::arg("parameter, set and nuclide counts must be at least 1"));
    }
    if !(0.0..1.0).contains(&config.mask_fraction) {
        return Err(Error::arg(format!("mask fraction {} outside [0, 1)", config.mask_fraction)));
    }
    let ranges = synth_param_ranges(config.n_params);
    let nuclides = valley_nuclides(config.n_nuclides);
    let to_raw = |k: usize, u: f64| {
        let (_, lo, hi) = &ranges[k];
        0.5 * (lo + hi) + 0.5 * (hi - lo) * u
    };
    let eval = |u: &[f64]| -> Vec<f64> {
        nuclides
            .iter()
            .map(|&(z, n)| surrogate_binding_energy(u, z as f64, n as f64))
            .collect()
    };

    let mut data_rng = substream(config.seed, streams::SYNTH_DATA);
    let mut params = Matrix::zeros(config.n_sets, config.n_params);
    let mut outputs = Matrix::zeros(config.n_sets, config.n_nuclides);
    for s in 0..config.n_sets {
        let u: Vec<f64> = (0..config.n_params).map(|_| data_rng.random_range(-1.0..=1.0)).collect();
        for (k, uk) in u.iter().enumerate() {
            params[(s, k)] = to_raw(k, *uk);
        }
        for (j, b) in eval(&u).into_iter().enumerate() {
            outputs[(s, j)] = b;
        }
    }

    let mut mask_rng = substream(config.seed, streams::SYNTH_MASK);
    let total = config.n_sets * config.n_nuclides;
    let n_masked = (config.mask_fraction * total as f64).round() as usize;
    let mut cells: Vec<usize> = (0..total).collect();
    cells.shuffle(&mut mask_rng);
    for &c in &cells[..n_masked] {
        outputs[(c / config.n_nuclides, c % config.n_nuclides)] = f64::NAN;
    }

    let mut truth_rng = substream(config.seed, streams::SYNTH_TRUTH);
    let u_star: Vec<f64> = (0..config.n_params).map(|_| truth_rng.random_range(-0.6..=0.6)).collect();
    let mut obs_rng = substream(config.seed, streams::OBSERVATION);
    let noise = Normal::new(0.0, config.observation_noise_mev.max(0.0))
        .map_err(|e| Error::arg(format!("observation noise: {e}")))?;
    let observed = eval(&u_star)
        .into_iter()
        .map(|b| b + noise.sample(&mut obs_rng))
        .collect();

    let raw = RawRuns {
        param_names: ranges.iter().map(|r| r.0.clone()).collect(),
        params,
        nuclides,
        outputs,
    };
    let truth = SyntheticTruth {
        theta: u_star.iter().enumerate().map(|(k, u)| to_raw(k, *u)).collect(),
        observed,
        observation_noise_mev: config.observation_noise_mev,
        seed: config.seed,
    };
    Ok((raw, truth))
}

fn parse_err(line: u64, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

/// Writes a header row and one row per matrix row; NaN is written as `NaN`
/// and every other value with round-trip precision.
pub fn save_csv(path: &Path, header: &[String], data: &Matrix) -> Result<()> {
    if header.len() != data.ncols() {
        return Err(Error::dim(format!("{} header names for {} columns", header.len(), data.ncols())));
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::io(path, std::io::Error::other(e));
    w.write_record(header).map_err(csv_err)?;
    for row in data.row_iter() {
        w.write_record(row.iter().map(|v| format!("{v:?}"))).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::io(path, std::io::Error::other(e.to_string())))?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads a CSV written by [`save_csv`]; `NaN` restores as NaN.
pub fn load_csv(path: &Path) -> Result<(Vec<String>, Matrix)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(text.as_bytes());
    let header: Vec<String> = r
        .headers()
        .map_err(|e| parse_err(1, e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    let width = header.len();
    let mut values = Vec::new();
    let mut rows = 0;
    for rec in r.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != width {
            return Err(parse_err(line, format!("expected {width} fields, found {}", rec.len())));
        }
        for (c, field) in rec.iter().enumerate() {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| parse_err(line, format!("column {} is not a number: {field:?}", header[c])))?;
            values.push(v);
        }
        rows += 1;
    }
    Ok((header, Matrix::from_row_slice(rows, width, &values)))
}

pub const PARAMS_FILE: &str = "params.csv";
pub const NUCLIDES_FILE: &str = "nuclides.csv";
pub const OUTPUTS_FILE: &str = "outputs.csv";
pub const TRUTH_FILE: &str = "truth.json";

fn nuclide_label(z: u32, n: u32) -> String {
    format!("Z{z}_N{n}")
}

/// Writes params.csv, nuclides.csv, outputs.csv and, if given, truth.json.
pub fn save_runs(dir: &Path, raw: &RawRuns, truth: Option<&SyntheticTruth>) -> Result<()> {
    raw.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    save_csv(&dir.join(PARAMS_FILE), &raw.param_names, &raw.params)?;
    let nuc = Matrix::from_fn(raw.n_nuclides(), 2, |i, c| {
        if c == 0 {
            raw.nuclides[i].0 as f64
        } else {
            raw.nuclides[i].1 as f64
        }
    });
    save_csv(&dir.join(NUCLIDES_FILE), &["Z".to_string(), "N".to_string()], &nuc)?;
    let labels: Vec<String> = raw.nuclides.iter().map(|&(z, n)| nuclide_label(z, n)).collect();
    save_csv(&dir.join(OUTPUTS_FILE), &labels, &raw.outputs)?;
    if let Some(t) = truth {
        let path = dir.join(TRUTH_FILE);
        fs::write(&path, serde_json::to_string_pretty(t)?).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

/// Reads a run bundle; truth.json is optional.
pub fn load_runs(dir: &Path) -> Result<(RawRuns, Option<SyntheticTruth>)> {
    let (param_names, params) = load_csv(&dir.join(PARAMS_FILE))?;
    let (_, nuc) = load_csv(&dir.join(NUCLIDES_FILE))?;
    if nuc.ncols() != 2 {
        return Err(parse_err(1, format!("{NUCLIDES_FILE} must have columns Z,N")));
    }
    let mut nuclides = Vec::with_capacity(nuc.nrows());
    for (i, row) in nuc.row_iter().enumerate() {
        let (z, n) = (row[0], row[1]);
        if !(z >= 1.0 && n >= 0.0 && z.fract() == 0.0 && n.fract() == 0.0) {
            return Err(parse_err(i as u64 + 2, format!("invalid nuclide ({z}, {n})")));
        }
        nuclides.push((z as u32, n as u32));
    }
    let (_, outputs) = load_csv(&dir.join(OUTPUTS_FILE))?;
    let raw = RawRuns {
        param_names,
        params,
        nuclides,
        outputs,
    };
    raw.validate()?;
    let truth_path = dir.join(TRUTH_FILE);
    let truth = if truth_path.exists() {
        let text = fs::read_to_string(&truth_path).map_err(|e| Error::io(&truth_path, e))?;
        Some(serde_json::from_str(&text)?)
    } else {
        None
    };
    Ok((raw, truth))
}
