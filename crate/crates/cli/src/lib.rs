//! Driver behind the `qvae` binary: `train`, `eval`, `sample` and
//! `oracle-check`. Exit codes are the only success channel.

pub mod config;
mod oracle_check;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use qvae::eval::{self, EvalReport, PriorLogProb};
use qvae::model::{self, Dvae, TrainOptions};
use qvae::qbm::QmcConfig;
use qvae::rng::{stream, Stream};
use qvae::{Error, Result};

pub use config::RunConfig;
pub use oracle_check::{oracle_check, OracleCheck};

pub const EXIT_FAILURE: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_DIVERGED: u8 = 3;

/// Largest quantum prior whose state probabilities are computed densely
/// during evaluation.
const EXACT_QUANTUM_EVAL: usize = 12;

#[derive(Debug, Parser)]
#[command(name = "qvae", version, about = "Discrete and quantum variational autoencoders")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model from a run configuration.
    Train {
        config: PathBuf,
        /// Parent of the run directory.
        #[arg(long, default_value = "runs")]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint on the test split; writes `report.json`.
    Eval {
        config: PathBuf,
        checkpoint: PathBuf,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Draw images from the prior and reconstruct test images.
    Sample {
        config: PathBuf,
        checkpoint: PathBuf,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Compare path-integral estimates with exact diagonalisation.
    OracleCheck {
        #[arg(long)]
        size: usize,
        #[arg(long)]
        gamma: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Imaginary-time slices.
        #[arg(long, default_value_t = 64)]
        slices: usize,
    },
}

/// Parses arguments, runs the command and maps errors to exit codes.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_CONFIG } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Diverged { .. } => EXIT_DIVERGED,
        Error::Config(_) | Error::CheckpointMismatch(_) => EXIT_CONFIG,
        _ => EXIT_FAILURE,
    }
}

fn run(cmd: Command) -> Result<ExitCode> {
    match cmd {
        Command::Train { config, out, seed } => {
            let cfg = prepare(&config, seed)?;
            train(&cfg, &out).map(|_| ExitCode::SUCCESS)
        }
        Command::Eval { config, checkpoint, out, seed } => {
            let cfg = prepare(&config, seed)?;
            evaluate(&cfg, &checkpoint, &out).map(|_| ExitCode::SUCCESS)
        }
        Command::Sample { config, checkpoint, out, seed } => {
            let cfg = prepare(&config, seed)?;
            sample(&cfg, &checkpoint, &out).map(|_| ExitCode::SUCCESS)
        }
        Command::OracleCheck { size, gamma, seed, slices } => {
            let report = oracle_check(size, gamma, slices, seed)?;
            print!("{}", report.table());
            if report.pass() {
                println!("PASS");
                Ok(ExitCode::SUCCESS)
            } else {
                println!("FAIL: worst offender {}", report.worst());
                Ok(ExitCode::from(EXIT_FAILURE))
            }
        }
    }
}

fn prepare(path: &Path, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(n) = cfg.threads {
        // Fails only if a pool already exists, which is harmless.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(cfg)
}

/// `<out>/<timestamp>-seed<seed>-<command>`, created.
pub fn run_dir(out: &Path, seed: u64, command: &str) -> Result<PathBuf> {
    let stamp = chrono::Local::now().format("%Y%m%dT%H%M%S");
    let dir = out.join(format!("{stamp}-seed{seed}-{command}"));
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

/// Trains and returns the run directory.
pub fn train(cfg: &RunConfig, out: &Path) -> Result<PathBuf> {
    let splits = cfg.load_data()?;
    let dir = run_dir(out, cfg.seed, "train")?;
    std::fs::write(dir.join("config.json"), serde_json::to_string_pretty(cfg)?)?;
    let mut m = Dvae::new(cfg.model.clone(), &mut stream(cfg.seed, Stream::Init))?;
    let opts = TrainOptions { out_dir: Some(dir.clone()), checkpoint_every: cfg.checkpoint_every };
    let history = model::train(&mut m, &splits.train, &splits.valid, &opts, cfg.seed)?;
    if let Some(last) = history.last() {
        println!(
            "epoch {}: validation {:.4}, log Z {:.4} ± {:.4}",
            last.epoch + 1,
            last.elbo,
            last.logz,
            last.logz_stderr
        );
    }
    println!("run directory {}", dir.display());
    Ok(dir)
}

/// Evaluates `checkpoint` on the test split and returns the report.
pub fn evaluate(cfg: &RunConfig, checkpoint: &Path, out: &Path) -> Result<EvalReport> {
    let (m, _) = Dvae::load(checkpoint, Some(&cfg.model))?;
    let test = cfg.load_data()?.test;
    let dir = run_dir(out, cfg.seed, "eval")?;
    let mut rng = stream(cfg.seed, Stream::Eval);
    let beta = cfg.model.schedule.beta_end;
    let log_z = model::prior_log_z(&m, &mut rng)?;
    let quantum = m.qbm_params().filter(|p| !p.is_classical());
    let mut prior = match &quantum {
        None => PriorLogProb::classical(&m, log_z.log_z),
        Some(p) if p.len() <= EXACT_QUANTUM_EVAL => PriorLogProb::quantum_exact(&m)?,
        Some(_) => PriorLogProb::quantum_clamped(&m, cfg.model.sampler.qmc.clone(), log_z.log_z, cfg.seed)?,
    };
    let iw = eval::iw_elbo(&m, &test, cfg.eval.k, beta, &mut prior, &mut rng)?;
    let (elbo_value, qelbo, elbo_rows) = if quantum.is_some() {
        let q = eval::quantum_elbo_eval(&m, &test, beta, log_z.log_z, &mut prior, &mut rng)?;
        (q.elbo.mean, Some(q.qelbo.mean), q.elbo.per_example)
    } else {
        let rows = per_example_elbo(&m, &test, beta, log_z.log_z, cfg.seed)?;
        (rows.iter().sum::<f64>() / rows.len().max(1) as f64, None, rows)
    };
    let report = EvalReport {
        elbo: elbo_value,
        iw_elbo: iw.mean,
        qelbo,
        k: cfg.eval.k,
        logz: log_z.log_z,
        logz_stderr: log_z.stderr,
        n_test: test.rows(),
        elbo_bootstrap_stderr: eval::bootstrap_stderr(&elbo_rows, cfg.eval.bootstrap_resamples, &mut rng),
        iw_elbo_bootstrap_stderr: eval::bootstrap_stderr(&iw.per_example, cfg.eval.bootstrap_resamples, &mut rng),
    };
    std::fs::write(dir.join("report.json"), serde_json::to_string_pretty(&report)?)?;
    println!("ELBO {:.4}  IW-ELBO(k={}) {:.4}", report.elbo, report.k, report.iw_elbo);
    if let Some(q) = report.qelbo {
        println!("Q-ELBO {q:.4}");
    }
    println!("report {}", dir.join("report.json").display());
    Ok(report)
}

fn per_example_elbo(m: &Dvae, data: &qvae::data::Dataset, beta: f64, log_z: f64, seed: u64) -> Result<Vec<f64>> {
    let mut rng = stream(seed, Stream::Eval);
    let bs = m.config().batch_size.max(1);
    let mut out = Vec::with_capacity(data.rows());
    for start in (0..data.rows()).step_by(bs) {
        let part = data.slice(start..(start + bs).min(data.rows()));
        let noise = m.latent_noise(part.rows(), &mut rng);
        out.extend(m.forward(part.values(), &noise, beta, log_z, false)?.elbo);
    }
    Ok(out)
}

/// Writes `samples.pgm` and `reconstructions.pgm`; returns the directory.
pub fn sample(cfg: &RunConfig, checkpoint: &Path, out: &Path) -> Result<PathBuf> {
    let (m, _) = Dvae::load(checkpoint, Some(&cfg.model))?;
    let (w, h) = cfg.image_shape();
    let dir = run_dir(out, cfg.seed, "sample")?;
    let mut rng = stream(cfg.seed, Stream::Sampler);
    let beta = cfg.model.schedule.beta_end;
    let mut prior_cfg = cfg.sample.prior.clone();
    if prior_cfg.qmc == QmcConfig::default() {
        prior_cfg.qmc = cfg.model.sampler.qmc.clone();
    }
    let n = cfg.sample.count;
    let images = eval::generate(&m, n, beta, &prior_cfg, &mut rng)?;
    let cols = (n as f64).sqrt().ceil() as usize;
    let (gw, gh, grid) = eval::image_grid(&images, w, h, cols);
    eval::write_pgm(&dir.join("samples.pgm"), gw, gh, &grid)?;
    let test = cfg.load_data()?.test;
    let shown = test.slice(0..n.min(test.rows()));
    let recon = eval::reconstruct(&m, &shown, beta, &mut rng)?;
    let mut pairs = Vec::with_capacity(2 * recon.len());
    for r in 0..shown.rows() {
        pairs.extend_from_slice(shown.row(r));
        pairs.extend_from_slice(&recon[r * w * h..(r + 1) * w * h]);
    }
    let (gw, gh, grid) = eval::image_grid(&pairs, w, h, 2 * cols.max(1));
    eval::write_pgm(&dir.join("reconstructions.pgm"), gw, gh, &grid)?;
    println!("images in {}", dir.display());
    Ok(dir)
}
