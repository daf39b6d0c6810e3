use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::cluster::sweep;
use super::{kinetic_log_weight, KinkWeight, PathConfiguration, QbmParams};
use crate::anneal::{anneal, systematic_resample, Annealable, PaConfig, PaEstimate};
use crate::error::{Error, Result};
use crate::rbm::{self, Moments};
use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QmcConfig {
    /// Imaginary-time slices `M`.
    pub slices: usize,
    pub pa: PaConfig,
    #[serde(default)]
    pub kink: KinkWeight,
}

impl Default for QmcConfig {
    fn default() -> Self {
        Self { slices: 64, pa: PaConfig::default(), kink: KinkWeight::Trotter }
    }
}

impl QmcConfig {
    fn validate(&self) -> Result<()> {
        if self.slices < 2 {
            return Err(Error::InvalidArgument(format!("need at least 2 slices, got {}", self.slices)));
        }
        self.pa.validate()
    }
}

struct PathTarget<'a> {
    params: &'a QbmParams,
    slices: usize,
    kind: KinkWeight,
    clamp: Option<&'a [u8]>,
}

impl Annealable for PathTarget<'_> {
    type State = PathConfiguration;

    fn reference(&self, rng: &mut Rng) -> PathConfiguration {
        match self.clamp {
            Some(z) => PathConfiguration::constant(z, self.slices),
            None => PathConfiguration::random_constant(self.params.len(), self.slices, rng),
        }
    }

    fn log_z0(&self) -> f64 {
        match self.clamp {
            Some(_) => 0.0,
            None => self.params.len() as f64 * std::f64::consts::LN_2,
        }
    }

    fn log_density(&self, s: &PathConfiguration, t: f64) -> f64 {
        kinetic_log_weight(&self.params.gamma, s, t, self.kind) - t * s.mean_classical_energy(&self.params.rbm)
    }

    fn sweep(&self, s: &mut PathConfiguration, t: f64, rng: &mut Rng) {
        sweep(self.params, s, t, self.kind, self.clamp.is_some(), rng);
    }
}

/// Population-annealing estimate of `log Tr e^{-H}` from the path integral,
/// annealing `(Γ, h, W)` jointly as `t θ`. A classical model is delegated to
/// the RBM estimator.
pub fn quantum_log_z_pa(params: &QbmParams, cfg: &QmcConfig, rng: &mut Rng) -> Result<PaEstimate> {
    if params.is_classical() {
        return rbm::log_z_population_annealing(&params.rbm, &cfg.pa, rng);
    }
    cfg.validate()?;
    let target = PathTarget { params, slices: cfg.slices, kind: cfg.kink, clamp: None };
    Ok(anneal(&target, &cfg.pa, rng)?.estimate)
}

/// `log ⟨z̄| e^{-H} |z̄⟩` from the path integral with slice 0 frozen to `z̄`.
pub fn clamped_log_trace(params: &QbmParams, zbar: &[u8], cfg: &QmcConfig, rng: &mut Rng) -> Result<PaEstimate> {
    let e = params.rbm.energy(zbar)?;
    if params.is_classical() {
        return Ok(PaEstimate { log_z: -e, stderr: 0.0, min_ess_fraction: 1.0, resamples: 0, degenerate: false });
    }
    cfg.validate()?;
    let target = PathTarget { params, slices: cfg.slices, kind: cfg.kink, clamp: Some(zbar) };
    Ok(anneal(&target, &cfg.pa, rng)?.estimate)
}

/// `log p(z̄) = log ⟨z̄| e^{-H} |z̄⟩ − log Z`, with both terms estimated by
/// population annealing (exact enumeration for a small classical model).
pub fn clamped_log_prob(params: &QbmParams, zbar: &[u8], cfg: &QmcConfig, rng: &mut Rng) -> Result<PaEstimate> {
    let num = clamped_log_trace(params, zbar, cfg, rng)?;
    let den = if params.is_classical() && params.len() <= rbm::MAX_EXACT_UNITS {
        PaEstimate {
            log_z: rbm::exact_log_z(&params.rbm)?,
            stderr: 0.0,
            min_ess_fraction: 1.0,
            resamples: 0,
            degenerate: false,
        }
    } else {
        quantum_log_z_pa(params, cfg, rng)?
    };
    Ok(PaEstimate {
        log_z: num.log_z - den.log_z,
        stderr: num.stderr.hypot(den.stderr),
        min_ess_fraction: num.min_ess_fraction.min(den.min_ess_fraction),
        resamples: num.resamples + den.resamples,
        degenerate: num.degenerate || den.degenerate,
    })
}

/// Persistent equal-weight population of paths at `t = 1`, refreshed by
/// cluster sweeps between parameter updates.
#[derive(Clone, Debug)]
pub struct QmcNegativePhase {
    kind: KinkWeight,
    paths: Vec<PathConfiguration>,
    rngs: Vec<Rng>,
    estimate: PaEstimate,
}

impl QmcNegativePhase {
    /// Equilibrates a population by annealing, then resamples it to equal
    /// weights.
    pub fn new(params: &QbmParams, cfg: &QmcConfig, rng: &mut Rng) -> Result<Self> {
        if params.is_classical() {
            return Err(Error::ZeroTransverseField);
        }
        cfg.validate()?;
        let target = PathTarget { params, slices: cfg.slices, kind: cfg.kink, clamp: None };
        let run = anneal(&target, &cfg.pa, rng)?;
        let w: Vec<f64> = run.log_weights.iter().map(|v| v.exp()).collect();
        let idx = systematic_resample(&w, rng);
        let paths = idx.iter().map(|&i| run.particles[i].clone()).collect();
        Ok(Self { kind: cfg.kink, paths, rngs: run.rngs, estimate: run.estimate })
    }

    /// The `log Z` estimate from the annealing run that built the population.
    pub fn estimate(&self) -> &PaEstimate {
        &self.estimate
    }

    pub fn paths(&self) -> &[PathConfiguration] {
        &self.paths
    }

    /// Advances every path by `sweeps` updates under `params` and returns
    /// `⟨z_l⟩` and `⟨z_i z_{left+j}⟩` averaged over all slices. By
    /// imaginary-time translation symmetry every slice has the law of the
    /// first. Standard errors treat particles as independent.
    pub fn sample(&mut self, params: &QbmParams, sweeps: usize) -> Result<Moments> {
        self.sample_averaged(params, 1, sweeps)
    }

    /// Like [`sample`](Self::sample), but measures after each of `rounds`
    /// blocks of `sweeps` updates and averages over them. Standard errors
    /// come from the per-particle time averages.
    pub fn sample_averaged(&mut self, params: &QbmParams, rounds: usize, sweeps: usize) -> Result<Moments> {
        if params.is_classical() {
            return Err(Error::ZeroTransverseField);
        }
        if self.paths.first().is_some_and(|p| p.units() != params.len()) {
            return Err(Error::InvalidArgument("population does not match the QBM size".into()));
        }
        if rounds == 0 {
            return Err(Error::InvalidArgument("at least one measurement round is needed".into()));
        }
        let kind = self.kind;
        let (left, right) = (params.rbm.left(), params.rbm.right());
        let l = params.len();
        let per: Vec<Moments> = self
            .paths
            .par_iter_mut()
            .zip(self.rngs.par_iter_mut())
            .map(|(p, r)| {
                let mut first = vec![0.0; l];
                let mut cross = vec![0.0; left * right];
                for _ in 0..rounds {
                    for _ in 0..sweeps {
                        sweep(params, p, 1.0, kind, false, r);
                    }
                    let m = Moments::from_states(left, right, (0..p.slices()).map(|a| p.slice(a)));
                    first.iter_mut().zip(&m.first).for_each(|(a, b)| *a += b / rounds as f64);
                    cross.iter_mut().zip(&m.cross).for_each(|(a, b)| *a += b / rounds as f64);
                }
                Moments { first, cross, first_stderr: Vec::new() }
            })
            .collect();
        let n = per.len() as f64;
        let mut first = vec![0.0; l];
        let mut cross = vec![0.0; left * right];
        for m in &per {
            first.iter_mut().zip(&m.first).for_each(|(a, b)| *a += b / n);
            cross.iter_mut().zip(&m.cross).for_each(|(a, b)| *a += b / n);
        }
        let first_stderr = (0..l)
            .map(|k| {
                let var = per.iter().map(|m| (m.first[k] - first[k]).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
                (var / n).sqrt()
            })
            .collect();
        Ok(Moments { first, cross, first_stderr })
    }
}
