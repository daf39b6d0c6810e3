use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::{LogZMethod, NegativePhaseKind, PriorKind};
use super::dvae::{Dvae, ElboBreakdown};
use crate::anneal::PaEstimate;
use crate::data::{batches, Dataset};
use crate::diffcore::AdamState;
use crate::error::{Error, Result};
use crate::qbm::{self, QbmParams, QmcNegativePhase};
use crate::rbm::{self, Moments, PcdState};
use crate::rng::{stream, Rng, Stream};

/// Largest classical prior whose `log Z` is enumerated under `Auto`.
const AUTO_EXACT_CLASSICAL: usize = 20;
/// Largest quantum prior handed to the dense oracle under `Auto`.
const AUTO_EXACT_QUANTUM: usize = 10;

/// One record of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Validation objective (the Q-ELBO bound for a quantum prior).
    pub elbo: f64,
    pub autoenc: f64,
    /// Validation `cross_entropy − entropy`.
    pub kl_or_bound: f64,
    pub logz: f64,
    pub logz_stderr: f64,
    pub beta: f64,
    pub lr: f64,
    pub wallclock: f64,
    pub train_elbo: f64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Directory for checkpoints and `metrics.jsonl`.
    pub out_dir: Option<PathBuf>,
    /// Checkpoint period in epochs (0: only at the end).
    pub checkpoint_every: usize,
}

/// Model-side sampler state for the prior's negative phase.
#[derive(Debug)]
enum Negative {
    None,
    Exact,
    Pcd(PcdState),
    Qmc(Option<QmcNegativePhase>),
}

fn exact_estimate(log_z: f64) -> PaEstimate {
    PaEstimate { log_z, stderr: 0.0, min_ess_fraction: 1.0, resamples: 0, degenerate: false }
}

/// `log Z` of the prior by the configured method.
pub fn prior_log_z(model: &Dvae, rng: &mut Rng) -> Result<PaEstimate> {
    let cfg = model.config();
    let Some(p) = model.qbm_params() else { return Ok(exact_estimate(0.0)) };
    let l = p.len();
    let method = match cfg.sampler.log_z_method {
        LogZMethod::Auto if p.is_classical() && l <= AUTO_EXACT_CLASSICAL => LogZMethod::Exact,
        LogZMethod::Auto if !p.is_classical() && l <= AUTO_EXACT_QUANTUM => LogZMethod::Exact,
        LogZMethod::Auto => LogZMethod::Annealing,
        m => m,
    };
    match (method, p.is_classical()) {
        (LogZMethod::Exact, true) => Ok(exact_estimate(rbm::exact_log_z(&p.rbm)?)),
        (LogZMethod::Exact, false) => Ok(exact_estimate(qbm::exact_quantum_oracle(&p)?.log_z)),
        (_, true) => rbm::log_z_population_annealing(&p.rbm, &cfg.sampler.log_z, rng),
        (_, false) => qbm::quantum_log_z_pa(&p, &cfg.sampler.qmc, rng),
    }
}

fn exact_moments(p: &QbmParams) -> Result<Moments> {
    if p.is_classical() {
        rbm::exact_moments(&p.rbm)
    } else {
        Ok(qbm::exact_quantum_oracle(p)?.moments)
    }
}

/// Validation objective with fixed noise, in evaluation mode.
pub fn evaluate_elbo(model: &Dvae, data: &Dataset, beta: f64, log_z: f64, seed: u64) -> Result<ElboBreakdown> {
    let mut rng = stream(seed, Stream::Eval);
    let bs = model.config().batch_size.max(1);
    let (mut ae, mut ent, mut ce) = (Vec::new(), Vec::new(), Vec::new());
    for start in (0..data.rows()).step_by(bs) {
        let idx: Vec<usize> = (start..(start + bs).min(data.rows())).collect();
        let x = data.gather(&idx);
        let noise = model.latent_noise(idx.len(), &mut rng);
        let pass = model.forward(&x, &noise, beta, log_z, false)?;
        ae.extend(pass.autoencoding);
        ent.extend(pass.entropy);
        ce.extend(pass.cross_entropy);
    }
    Ok(ElboBreakdown::from_rows(&ae, &ent, &ce))
}

/// `log Z` for the current parameters; a QMC negative phase also gets a
/// freshly annealed population, whose estimate doubles as `log Z`.
fn refresh(model: &Dvae, negative: &mut Negative, rng: &mut Rng) -> Result<PaEstimate> {
    let Negative::Qmc(slot) = negative else { return prior_log_z(model, rng) };
    let cfg = model.config();
    let p = model.qbm_params().expect("boltzmann prior");
    let fresh = QmcNegativePhase::new(&p, &cfg.sampler.qmc, rng)?;
    let est = if p.len() <= AUTO_EXACT_QUANTUM && cfg.sampler.log_z_method != LogZMethod::Annealing {
        prior_log_z(model, rng)?
    } else {
        fresh.estimate().clone()
    };
    *slot = Some(fresh);
    Ok(est)
}

/// Trains `model` for its configured number of epochs. Returns one metrics
/// record per epoch.
pub fn train(model: &mut Dvae, train: &Dataset, valid: &Dataset, opts: &TrainOptions, seed: u64) -> Result<Vec<EpochMetrics>> {
    let cfg = model.config().clone();
    if train.dim() != cfg.input_size || valid.dim() != cfg.input_size {
        return Err(Error::Config(format!(
            "data has {} features, input_size is {}",
            train.dim(),
            cfg.input_size
        )));
    }
    let mut trainer_rng = stream(seed, Stream::Trainer);
    let mut sampler_rng = stream(seed, Stream::Sampler);
    let mut adam = AdamState::new(cfg.schedule.learning_rate);
    let mut negative = match (cfg.prior, cfg.sampler.negative_phase) {
        (PriorKind::Gaussian | PriorKind::Bernoulli, _) => Negative::None,
        (_, NegativePhaseKind::Exact) => Negative::Exact,
        (_, NegativePhaseKind::Pcd) => {
            let p = model.rbm_params().expect("boltzmann prior");
            Negative::Pcd(PcdState::new(&p, cfg.sampler.pcd_chains, &mut sampler_rng))
        }
        (_, NegativePhaseKind::Qmc) => Negative::Qmc(None),
    };
    let mut metrics_file = match &opts.out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            Some(std::fs::File::create(dir.join("metrics.jsonl"))?)
        }
        None => None,
    };
    let save = |model: &Dvae, name: &str, epoch: usize| -> Result<()> {
        if let Some(dir) = &opts.out_dir {
            model.save(&dir.join(name), serde_json::json!({ "epoch": epoch, "seed": seed }))?;
        }
        Ok(())
    };
    let drop_singletons = cfg.batch_norm;
    let started = Instant::now();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut log_z = refresh(model, &mut negative, &mut sampler_rng)?;
    for epoch in 0..cfg.epochs {
        let beta = cfg.schedule.beta(epoch, cfg.epochs);
        let lr = cfg.schedule.learning_rate(epoch);
        adam.lr = lr;
        let mut train_rows = Vec::new();
        for (step, idx) in batches(train.rows(), cfg.batch_size, &mut trainer_rng).into_iter().enumerate() {
            if drop_singletons && idx.len() < 2 {
                continue;
            }
            let diverged = |e: Error| Error::Diverged { epoch, step, detail: e.to_string() };
            let x = train.gather(&idx);
            let noise = model.latent_noise(idx.len(), &mut trainer_rng);
            let mut pass = model.forward(&x, &noise, beta, log_z.log_z, true).map_err(diverged)?;
            model.backward(&mut pass)?;
            let neg = match &mut negative {
                Negative::None => None,
                Negative::Exact => Some(exact_moments(&model.qbm_params().expect("boltzmann prior"))?),
                Negative::Pcd(st) => {
                    let p = model.rbm_params().expect("boltzmann prior");
                    Some(rbm::pcd_negative_phase(&p, st, cfg.sampler.pcd_sweeps)?)
                }
                Negative::Qmc(pop) => {
                    let p = model.qbm_params().expect("boltzmann prior");
                    let pop = pop.as_mut().expect("population built at epoch start");
                    Some(pop.sample(&p, cfg.sampler.qmc_sweeps)?)
                }
            };
            if let Some(m) = &neg {
                model.apply_negative_phase(m)?;
            }
            model.update_running_stats(&pass);
            adam.step(model.params_mut()).map_err(diverged)?;
            train_rows.extend_from_slice(&pass.elbo);
        }
        log_z = refresh(model, &mut negative, &mut sampler_rng)?;
        let v = evaluate_elbo(model, valid, beta, log_z.log_z, seed)?;
        if !v.total.is_finite() {
            return Err(Error::Diverged { epoch, step: 0, detail: "validation objective is not finite".into() });
        }
        let record = EpochMetrics {
            epoch,
            elbo: v.total,
            autoenc: v.autoencoding,
            kl_or_bound: -v.neg_kl(),
            logz: log_z.log_z,
            logz_stderr: log_z.stderr,
            beta,
            lr,
            wallclock: started.elapsed().as_secs_f64(),
            train_elbo: train_rows.iter().sum::<f64>() / train_rows.len().max(1) as f64,
        };
        log::info!("epoch {epoch}: valid elbo {:.4} beta {beta:.3}", record.elbo);
        if let Some(f) = &mut metrics_file {
            writeln!(f, "{}", serde_json::to_string(&record)?)?;
        }
        history.push(record);
        if opts.checkpoint_every > 0 && (epoch + 1) % opts.checkpoint_every == 0 {
            save(model, "checkpoint", epoch + 1)?;
        }
    }
    save(model, "checkpoint", cfg.epochs)?;
    Ok(history)
}
