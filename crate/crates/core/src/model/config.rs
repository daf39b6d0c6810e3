use serde::{Deserialize, Serialize};

use crate::anneal::PaConfig;
use crate::error::{Error, Result};
use crate::qbm::QmcConfig;

/// Prior over the latent units.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorKind {
    /// Continuous standard-normal baseline.
    Gaussian,
    /// Factorial Bernoulli with learnable logits.
    Bernoulli,
    Rbm,
    Qbm,
}

/// Source of the model expectations in the prior gradient.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativePhaseKind {
    /// Enumeration for RBMs, the dense oracle for QBMs.
    Exact,
    /// Persistent block-Gibbs chains.
    #[default]
    Pcd,
    /// Persistent path-integral population.
    Qmc,
}

/// How the `log Z` entering the reported objective is obtained.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogZMethod {
    /// Exact when the model is small enough, annealing otherwise.
    #[default]
    Auto,
    Exact,
    Annealing,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Schedule {
    pub beta_start: f64,
    pub beta_end: f64,
    pub learning_rate: f64,
    /// Multiplicative learning-rate decay per epoch.
    pub lr_decay: f64,
}

impl Default for Schedule {
    fn default() -> Self {
        Self { beta_start: 1.0, beta_end: 10.0, learning_rate: 1e-3, lr_decay: 0.995 }
    }
}

impl Schedule {
    /// `β` for `epoch` of `epochs`, linear from start to end.
    pub fn beta(&self, epoch: usize, epochs: usize) -> f64 {
        if epochs <= 1 {
            return self.beta_start;
        }
        let f = epoch.min(epochs - 1) as f64 / (epochs - 1) as f64;
        self.beta_start + f * (self.beta_end - self.beta_start)
    }

    pub fn learning_rate(&self, epoch: usize) -> f64 {
        self.learning_rate * self.lr_decay.powi(epoch as i32)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub negative_phase: NegativePhaseKind,
    pub pcd_chains: usize,
    pub pcd_sweeps: usize,
    pub qmc: QmcConfig,
    /// Cluster sweeps applied to the persistent population per gradient step.
    pub qmc_sweeps: usize,
    pub log_z_method: LogZMethod,
    pub log_z: PaConfig,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            negative_phase: NegativePhaseKind::Pcd,
            pcd_chains: 100,
            pcd_sweeps: 20,
            qmc: QmcConfig::default(),
            qmc_sweeps: 5,
            log_z_method: LogZMethod::Auto,
            log_z: PaConfig::default(),
        }
    }
}

fn one() -> usize {
    1
}

fn default_batch() -> usize {
    200
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VaeConfig {
    pub input_size: usize,
    pub latent_size: usize,
    #[serde(default = "one")]
    pub groups: usize,
    #[serde(default)]
    pub encoder_hidden: Vec<usize>,
    #[serde(default)]
    pub decoder_hidden: Vec<usize>,
    #[serde(default)]
    pub batch_norm: bool,
    pub prior: PriorKind,
    #[serde(default)]
    pub gamma: f64,
    #[serde(default)]
    pub schedule: Schedule,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub epochs: usize,
    #[serde(default)]
    pub sampler: SamplerConfig,
}

impl VaeConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.input_size == 0 {
            return bad("input_size must be positive".into());
        }
        if self.latent_size == 0 {
            return bad("latent_size must be positive".into());
        }
        if self.groups == 0 || !self.latent_size.is_multiple_of(self.groups) {
            return bad(format!("latent_size {} is not divisible by groups {}", self.latent_size, self.groups));
        }
        if self.encoder_hidden.iter().chain(&self.decoder_hidden).any(|&w| w == 0) {
            return bad("hidden layer widths must be positive".into());
        }
        match self.prior {
            PriorKind::Gaussian if self.groups != 1 => {
                return bad("the gaussian prior supports a single group".into());
            }
            PriorKind::Rbm | PriorKind::Qbm if !self.latent_size.is_multiple_of(2) => {
                return bad(format!("latent_size {} must be even for a bipartite prior", self.latent_size));
            }
            _ => {}
        }
        if !(self.gamma.is_finite() && self.gamma >= 0.0) {
            return bad("gamma must be finite and non-negative".into());
        }
        if self.gamma != 0.0 && self.prior != PriorKind::Qbm {
            return bad("gamma must be 0 unless prior is qbm".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.batch_norm && self.batch_size < 2 {
            return bad("batch_norm needs batch_size >= 2".into());
        }
        let s = &self.schedule;
        if !(s.beta_start > 0.0 && s.beta_end > 0.0 && s.learning_rate > 0.0 && s.lr_decay > 0.0) {
            return bad("schedule entries must be positive".into());
        }
        let sm = &self.sampler;
        match (self.prior, sm.negative_phase) {
            (PriorKind::Rbm, NegativePhaseKind::Qmc) => return bad("qmc negative phase needs a qbm prior".into()),
            (PriorKind::Qbm, NegativePhaseKind::Pcd) if self.gamma > 0.0 => {
                return bad("pcd negative phase needs gamma = 0; use qmc or exact".into());
            }
            (PriorKind::Qbm, NegativePhaseKind::Qmc) if self.gamma == 0.0 => {
                return bad("qmc negative phase needs gamma > 0".into());
            }
            _ => {}
        }
        if sm.pcd_chains == 0 || sm.pcd_sweeps == 0 || sm.qmc_sweeps == 0 {
            return bad("sampler chain and sweep counts must be positive".into());
        }
        if sm.qmc.slices < 2 {
            return bad("sampler.qmc.slices must be at least 2".into());
        }
        sm.log_z.validate().map_err(|e| Error::Config(format!("sampler.log_z: {e}")))?;
        sm.qmc.pa.validate().map_err(|e| Error::Config(format!("sampler.qmc.pa: {e}")))?;
        Ok(())
    }

    /// Units per hierarchy group.
    pub fn group_size(&self) -> usize {
        self.latent_size / self.groups
    }
}
