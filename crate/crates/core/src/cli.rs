//! Command-line driver: synthetic data generation, training, sweeps over
//! inducing counts, evaluation, timing, maximum likelihood, calibration and
//! sweep reports. Every run writes a manifest into its output directory.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::dataset::{
    assemble_design, load_runs, preprocess_split, save_runs, synth_generate, EmulationDataset, SynthConfig,
    SyntheticTruth, DEFAULT_TRAIN_FRACTION,
};
use crate::error::{Error, Result};
use crate::inference::{
    mle_multistart, nuts_sample, write_diagnostics, write_mle, write_samples, MleConfig, NutsConfig, ObsLikelihood,
    DIAGNOSTICS_FILE, MLE_FILE, SAMPLES_FILE,
};
use crate::linalg::Vector;
use crate::training::{
    bench_checkpoint, evaluate, inducing_sweep, load_checkpoint, run_metrics, save_pair,
    stability_gate, stability_probes, Checkpoint, EmulatorKind, GateOutcome, RunMetrics, TrainConfig,
    BENCH_REPETITIONS, METRICS_FILE,
};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const EVALUATION_FILE: &str = "evaluation.json";
pub const TIMING_FILE: &str = "timing.json";
pub const REPORT_FILE: &str = "report.csv";

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_NUMERIC: i32 = 2;

/// Full run configuration. Unknown keys are rejected and missing keys take
/// their defaults. The root `seed` replaces the `seed` of every block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Run bundle written by gen-data and read by the other commands.
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub train_fraction: f64,
    pub synth: SynthConfig,
    pub train: TrainConfig,
    pub sweep: SweepConfig,
    pub bench: BenchConfig,
    pub mle: MleConfig,
    pub nuts: NutsConfig,
    pub inference: InferenceConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub families: Vec<EmulatorKind>,
    pub inducing: Vec<usize>,
    /// Concurrent training jobs; timings are only comparable at 1.
    pub workers: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub repetitions: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceConfig {
    /// Ignore predictive covariances between nuclides.
    pub diagonal_only: bool,
    /// Central differences instead of analytic likelihood gradients.
    pub fd_gradient: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("runs"),
            train_fraction: DEFAULT_TRAIN_FRACTION,
            synth: SynthConfig::default(),
            train: TrainConfig::default(),
            sweep: SweepConfig::default(),
            bench: BenchConfig::default(),
            mle: MleConfig::default(),
            nuts: NutsConfig::default(),
            inference: InferenceConfig::default(),
        }
    }
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            families: vec![EmulatorKind::Sgp, EmulatorKind::Svgp, EmulatorKind::Dksgp, EmulatorKind::Dksvgp],
            inducing: inducing_sweep(),
            workers: 1,
        }
    }
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            repetitions: BENCH_REPETITIONS,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Copies the root seed into every block.
    pub fn propagate_seed(&mut self) {
        self.synth.seed = self.seed;
        self.train.seed = self.seed;
        self.mle.seed = self.seed;
        self.nuts.seed = self.seed;
    }
}

fn parse_kind(s: &str) -> std::result::Result<EmulatorKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Debug, Parser)]
#[command(name = "emucal", version, about = "Gaussian-process emulation and calibration of simulator parameters")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args)]
struct Common {
    /// JSON run configuration; flags override its keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Root seed for every random stream.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
struct DataArgs {
    /// Run bundle directory written by gen-data.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Fraction of valid rows used for training.
    #[arg(long)]
    train_fraction: Option<f64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic run bundle with a known ground truth.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        sets: Option<usize>,
        #[arg(long)]
        nuclides: Option<usize>,
        #[arg(long)]
        params: Option<usize>,
        #[arg(long)]
        mask_fraction: Option<f64>,
        /// Noise added to the observed energies at the truth, MeV.
        #[arg(long)]
        observation_noise: Option<f64>,
    },
    /// Train one emulator and write its checkpoint pair, trace and metrics.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_parser = parse_kind)]
        family: Option<EmulatorKind>,
        #[arg(long)]
        inducing: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
    },
    /// Train every family at every inducing count.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        /// Comma-separated families.
        #[arg(long, value_parser = parse_kind, value_delimiter = ',')]
        families: Option<Vec<EmulatorKind>>,
        /// Comma-separated inducing counts.
        #[arg(long, value_delimiter = ',')]
        inducing: Option<Vec<usize>>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Validation RMSE and stability gate of a checkpoint.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Single-point prediction timing of a checkpoint.
    Bench {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        repetitions: Option<usize>,
    },
    /// Multi-start maximum likelihood of the simulator parameters.
    Mle {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        rounds: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        diagonal: bool,
    },
    /// NUTS posterior over the simulator parameters.
    Calibrate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        warmup: Option<usize>,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        max_depth: Option<usize>,
        #[arg(long)]
        target_accept: Option<f64>,
        #[arg(long)]
        diagonal: bool,
    },
    /// Print the effective configuration as JSON.
    Config {
        #[command(flatten)]
        common: Common,
    },
    /// Collect a sweep's metrics into one CSV.
    Report {
        #[command(flatten)]
        common: Common,
        /// Sweep output directory.
        #[arg(long)]
        sweep: PathBuf,
    },
}

#[derive(Debug, Serialize)]
struct Versions {
    emucal: &'static str,
    os: &'static str,
    arch: &'static str,
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    command: &'a str,
    status: String,
    seed: u64,
    started_unix_s: u64,
    wall_time_s: f64,
    versions: Versions,
    config: &'a RunConfig,
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match run(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_numeric() {
                EXIT_NUMERIC
            } else {
                EXIT_USAGE
            }
        }
    }
}

fn base_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.out_dir = o.clone();
    }
    Ok(cfg)
}

fn apply_data(cfg: &mut RunConfig, data: &DataArgs) {
    if let Some(d) = &data.data {
        cfg.data_dir = d.clone();
    }
    if let Some(f) = data.train_fraction {
        cfg.train_fraction = f;
    }
}

fn set<T>(target: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *target = v;
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData {
            common,
            sets,
            nuclides,
            params,
            mask_fraction,
            observation_noise,
        } => {
            let mut cfg = base_config(&common)?;
            // gen-data writes the bundle itself, so --out names the bundle.
            if let Some(o) = &common.out {
                cfg.data_dir = o.clone();
            }
            cfg.out_dir = cfg.data_dir.clone();
            set(&mut cfg.synth.n_sets, sets);
            set(&mut cfg.synth.n_nuclides, nuclides);
            set(&mut cfg.synth.n_params, params);
            set(&mut cfg.synth.mask_fraction, mask_fraction);
            set(&mut cfg.synth.observation_noise_mev, observation_noise);
            with_manifest("gen-data", cfg, gen_data)
        }
        Command::Train {
            common,
            data,
            family,
            inducing,
            epochs,
            batch_size,
        } => {
            let mut cfg = base_config(&common)?;
            apply_data(&mut cfg, &data);
            set(&mut cfg.train.kind, family);
            set(&mut cfg.train.inducing, inducing);
            set(&mut cfg.train.epochs, epochs);
            set(&mut cfg.train.batch_size, batch_size);
            with_manifest("train", cfg, train)
        }
        Command::Sweep {
            common,
            data,
            families,
            inducing,
            epochs,
            batch_size,
            workers,
        } => {
            let mut cfg = base_config(&common)?;
            apply_data(&mut cfg, &data);
            set(&mut cfg.sweep.families, families);
            set(&mut cfg.sweep.inducing, inducing);
            set(&mut cfg.train.epochs, epochs);
            set(&mut cfg.train.batch_size, batch_size);
            set(&mut cfg.sweep.workers, workers);
            with_manifest("sweep", cfg, sweep)
        }
        Command::Evaluate { common, data, checkpoint } => {
            let mut cfg = base_config(&common)?;
            apply_data(&mut cfg, &data);
            with_manifest("evaluate", cfg, |c| evaluate_cmd(c, &checkpoint))
        }
        Command::Bench {
            common,
            data,
            checkpoint,
            repetitions,
        } => {
            let mut cfg = base_config(&common)?;
            apply_data(&mut cfg, &data);
            set(&mut cfg.bench.repetitions, repetitions);
            with_manifest("bench", cfg, |c| bench(c, &checkpoint))
        }
        Command::Mle {
            common,
            data,
            checkpoint,
            rounds,
            steps,
            diagonal,
        } => {
            let mut cfg = base_config(&common)?;
            apply_data(&mut cfg, &data);
            set(&mut cfg.mle.rounds, rounds);
            set(&mut cfg.mle.steps, steps);
            cfg.inference.diagonal_only |= diagonal;
            with_manifest("mle", cfg, |c| mle(c, &checkpoint))
        }
        Command::Calibrate {
            common,
            data,
            checkpoint,
            warmup,
            samples,
            max_depth,
            target_accept,
            diagonal,
        } => {
            let mut cfg = base_config(&common)?;
            apply_data(&mut cfg, &data);
            set(&mut cfg.nuts.warmup, warmup);
            set(&mut cfg.nuts.samples, samples);
            set(&mut cfg.nuts.max_depth, max_depth);
            set(&mut cfg.nuts.target_accept, target_accept);
            cfg.inference.diagonal_only |= diagonal;
            with_manifest("calibrate", cfg, |c| calibrate(c, &checkpoint))
        }
        Command::Config { common } => {
            let mut cfg = base_config(&common)?;
            cfg.propagate_seed();
            println!("{}", effective_config_json(&cfg)?);
            Ok(())
        }
        Command::Report { common, sweep } => {
            let mut cfg = base_config(&common)?;
            if common.out.is_none() {
                cfg.out_dir = sweep.clone();
            }
            with_manifest("report", cfg, |c| report(c, &sweep))
        }
    }
}

/// Runs `f` and records the outcome in the output directory's manifest.
fn with_manifest(command: &str, mut cfg: RunConfig, f: impl FnOnce(&RunConfig) -> Result<()>) -> Result<()> {
    cfg.propagate_seed();
    let out = cfg.out_dir.clone();
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let started = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    let clock = Instant::now();
    let result = f(&cfg);
    let manifest = Manifest {
        command,
        status: match &result {
            Ok(()) => "ok".to_string(),
            Err(e) => format!("error: {e}"),
        },
        seed: cfg.seed,
        started_unix_s: started,
        wall_time_s: clock.elapsed().as_secs_f64(),
        versions: Versions {
            emucal: env!("CARGO_PKG_VERSION"),
            os: std::env::consts::OS,
            arch: std::env::consts::ARCH,
        },
        config: &cfg,
    };
    let written = write_json(&out.join(MANIFEST_FILE), &manifest);
    result.and(written)
}

/// Pretty JSON of a configuration, as echoed by the `config` command.
pub fn effective_config_json(cfg: &RunConfig) -> Result<String> {
    Ok(serde_json::to_string_pretty(cfg)?)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?).map_err(|e| Error::io(path, e))
}

fn gen_data(cfg: &RunConfig) -> Result<()> {
    let (raw, truth) = synth_generate(&cfg.synth)?;
    save_runs(&cfg.data_dir, &raw, Some(&truth))?;
    println!(
        "wrote {} sets x {} nuclides ({} params) to {}",
        raw.n_sets(),
        raw.n_nuclides(),
        raw.n_params(),
        cfg.data_dir.display()
    );
    Ok(())
}

/// Dataset split, the bundle's truth if any, and the bundle's nuclide order.
type Loaded = (EmulationDataset, Option<SyntheticTruth>, Vec<(u32, u32)>);

fn load_dataset(cfg: &RunConfig) -> Result<Loaded> {
    let (raw, truth) = load_runs(&cfg.data_dir)?;
    let design = assemble_design(&raw)?;
    let ds = preprocess_split(&design, cfg.train_fraction, cfg.seed)?;
    Ok((ds, truth, raw.nuclides))
}

fn train_one(ds: &EmulationDataset, train: &TrainConfig, out: &Path) -> Result<RunMetrics> {
    let pair = crate::training::train_emulator(ds, train)?;
    save_pair(out, &pair)?;
    let metrics = run_metrics(&pair, ds, train)?;
    write_json(&out.join(METRICS_FILE), &metrics)?;
    Ok(metrics)
}

fn train(cfg: &RunConfig) -> Result<()> {
    let (ds, _, _) = load_dataset(cfg)?;
    let m = train_one(&ds, &cfg.train, &cfg.out_dir)?;
    println!(
        "{} m={}: val RMSE {:.4} (std) {:.4} MeV, gate {}, {} epochs{}",
        m.kind.name(),
        m.inducing,
        m.val_rmse_std,
        m.val_rmse_mev,
        m.gate_status,
        m.epochs_completed,
        if m.aborted { " (aborted)" } else { "" }
    );
    Ok(())
}

/// Output directory of one sweep job.
pub fn sweep_job_dir(root: &Path, kind: EmulatorKind, inducing: usize) -> PathBuf {
    match kind {
        EmulatorKind::Multivariate => root.join(kind.name()),
        _ => root.join(kind.name()).join(format!("m{inducing:03}")),
    }
}

fn sweep(cfg: &RunConfig) -> Result<()> {
    let (ds, _, _) = load_dataset(cfg)?;
    let mut jobs = Vec::new();
    for &kind in &cfg.sweep.families {
        if kind == EmulatorKind::Multivariate {
            jobs.push((kind, cfg.train.inducing));
        } else {
            jobs.extend(cfg.sweep.inducing.iter().map(|&m| (kind, m)));
        }
    }
    let next = AtomicUsize::new(0);
    let failures = Mutex::new(Vec::new());
    let workers = cfg.sweep.workers.max(1).min(jobs.len().max(1));
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(&(kind, m)) = jobs.get(i) else { break };
                let train = TrainConfig {
                    kind,
                    inducing: m,
                    ..cfg.train.clone()
                };
                let dir = sweep_job_dir(&cfg.out_dir, kind, m);
                match train_one(&ds, &train, &dir) {
                    Ok(r) => println!("{} m={m}: {:.4} MeV, gate {}", kind.name(), r.val_rmse_mev, r.gate_status),
                    Err(e) => {
                        eprintln!("{} m={m}: {e}", kind.name());
                        failures.lock().expect("no poisoned lock").push(e);
                    }
                }
            });
        }
    });
    // Each failure was reported as it happened; the first one decides the exit code.
    let failures = failures.into_inner().expect("no poisoned lock");
    match failures.into_iter().next() {
        None => Ok(()),
        Some(e) => Err(e),
    }
}

#[derive(Debug, Serialize)]
struct Evaluation {
    checkpoint: PathBuf,
    epoch: usize,
    val_rmse_std: f64,
    val_rmse_mev: f64,
    gate: GateOutcome,
    gate_status: &'static str,
}

fn evaluate_cmd(cfg: &RunConfig, path: &Path) -> Result<()> {
    let (ds, _, _) = load_dataset(cfg)?;
    let ckpt = load_checkpoint(path)?;
    let (r_std, r_mev) = evaluate(&ckpt, &ds)?;
    let probes = stability_probes(ds.n_params(), cfg.train.stability_probes, cfg.seed);
    let gate = stability_gate(ckpt.block().as_ref(), &probes);
    let ev = Evaluation {
        checkpoint: path.to_path_buf(),
        epoch: ckpt.epoch,
        val_rmse_std: r_std,
        val_rmse_mev: r_mev,
        gate_status: gate.status(),
        gate,
    };
    write_json(&cfg.out_dir.join(EVALUATION_FILE), &ev)?;
    println!("val RMSE {r_std:.4} (std) {r_mev:.4} MeV, gate {}", ev.gate_status);
    Ok(())
}

fn bench(cfg: &RunConfig, path: &Path) -> Result<()> {
    let (ds, _, _) = load_dataset(cfg)?;
    let ckpt = load_checkpoint(path)?;
    let t = bench_checkpoint(&ckpt, &ds.x_val, cfg.bench.repetitions, cfg.seed)?;
    write_json(&cfg.out_dir.join(TIMING_FILE), &t)?;
    println!("{} samples: mean {:.3e} s, std {:.3e} s, median {:.3e} s", t.samples.len(), t.mean, t.std, t.median);
    Ok(())
}

/// Observed energies of the checkpoint's nuclides, standardized.
fn observed_for(ckpt: &Checkpoint, truth: Option<SyntheticTruth>, bundle: &[(u32, u32)]) -> Result<Vector> {
    let truth = truth.ok_or_else(|| Error::arg("run bundle has no observed data (truth file missing)"))?;
    let mut values = Vec::with_capacity(ckpt.context.nuclides.len());
    for nuc in &ckpt.context.nuclides {
        let j = bundle
            .iter()
            .position(|b| b == nuc)
            .ok_or_else(|| Error::arg(format!("nuclide {nuc:?} of the checkpoint is not in the run bundle")))?;
        values.push(truth.observed[j]);
    }
    Ok(ckpt.context.scale_targets(&values))
}

fn mle(cfg: &RunConfig, path: &Path) -> Result<()> {
    let (_, truth, bundle) = load_dataset(cfg)?;
    let ckpt = load_checkpoint(path)?;
    let observed = observed_for(&ckpt, truth, &bundle)?;
    let block = ckpt.block();
    let mut lik = ObsLikelihood::new(block.as_ref(), observed)?;
    lik.diagonal_only = cfg.inference.diagonal_only;
    lik.fd_gradient = cfg.inference.fd_gradient;
    let res = mle_multistart(&lik, &cfg.mle)?;
    write_mle(&cfg.out_dir.join(MLE_FILE), &ckpt.context.param_names, &res)?;
    println!(
        "{} of {} rounds finished; {} of {} parameters stable; {} out of bounds",
        cfg.mle.rounds - res.failed_rounds,
        cfg.mle.rounds,
        res.stable.iter().filter(|&&s| s).count(),
        res.stable.len(),
        res.out_of_bounds.iter().filter(|&&s| s).count()
    );
    Ok(())
}

fn calibrate(cfg: &RunConfig, path: &Path) -> Result<()> {
    let (_, truth, bundle) = load_dataset(cfg)?;
    let ckpt = load_checkpoint(path)?;
    let observed = observed_for(&ckpt, truth, &bundle)?;
    let block = ckpt.block();
    let mut lik = ObsLikelihood::new(block.as_ref(), observed)?;
    lik.diagonal_only = cfg.inference.diagonal_only;
    lik.fd_gradient = cfg.inference.fd_gradient;
    let chain = nuts_sample(&lik, &cfg.nuts)?;
    let names = &ckpt.context.param_names;
    write_samples(&cfg.out_dir.join(SAMPLES_FILE), names, &chain)?;
    write_diagnostics(&cfg.out_dir.join(DIAGNOSTICS_FILE), names, &chain)?;
    if chain.divergence_warning {
        eprintln!(
            "warning: {} of {} draws diverged",
            chain.divergences,
            chain.samples.len()
        );
    }
    println!(
        "{} draws, step {:.3e}, accept {:.2}, {} of {} parameters pass ESS/R-hat",
        chain.samples.len(),
        chain.step_size,
        chain.mean_accept,
        chain.quality.iter().filter(|&&q| q).count(),
        chain.quality.len()
    );
    Ok(())
}

fn collect_metrics(dir: &Path, out: &mut Vec<RunMetrics>) -> Result<()> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_dir() {
            collect_metrics(&path, out)?;
        } else if path.file_name().is_some_and(|n| n == METRICS_FILE) {
            let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            out.push(serde_json::from_str(&text)?);
        }
    }
    Ok(())
}

/// Rows `m,family,rmse_mev,time_mean_s,time_std_s,gate_status`, ordered
/// by family then inducing count.
pub fn report_csv(metrics: &[RunMetrics]) -> String {
    let mut rows: Vec<&RunMetrics> = metrics.iter().collect();
    rows.sort_by(|a, b| (a.kind.name(), a.inducing).cmp(&(b.kind.name(), b.inducing)));
    let mut out = String::from("m,family,rmse_mev,time_mean_s,time_std_s,gate_status\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{:?},{:?},{:?},{}\n",
            r.inducing,
            r.kind.name(),
            r.val_rmse_mev,
            r.time_mean_s,
            r.time_std_s,
            r.gate_status
        ));
    }
    out
}

fn report(cfg: &RunConfig, sweep_dir: &Path) -> Result<()> {
    let mut metrics = Vec::new();
    collect_metrics(sweep_dir, &mut metrics)?;
    if metrics.is_empty() {
        return Err(Error::arg(format!("no {METRICS_FILE} under {}", sweep_dir.display())));
    }
    let path = cfg.out_dir.join(REPORT_FILE);
    fs::write(&path, report_csv(&metrics)).map_err(|e| Error::io(&path, e))?;
    println!("{} runs -> {}", metrics.len(), path.display());
    Ok(())
}

/// The checkpoint a training directory's downstream commands should use.
pub fn preferred_checkpoint(dir: &Path) -> PathBuf {
    let best = dir.join(crate::training::BEST_CHECKPOINT_FILE);
    if best.exists() {
        best
    } else {
        dir.join(crate::training::FINAL_CHECKPOINT_FILE)
    }
}
