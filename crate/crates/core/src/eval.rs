//! Importance-weighted bounds, quantum-probability ELBO, sampling and image
//! output.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::math::{log_mean_exp, mean_stderr, sigmoid, softplus, PROB_EPS};
use crate::model::Dvae;
use crate::qbm::{self, QbmParams, QmcConfig, QmcNegativePhase, QuantumOracle};
use crate::rbm::{self, PcdState, RbmParams};
use crate::reparam::smoothing_sample;
use crate::rng::{substream, Rng};

/// Rows per forward pass when evaluating many importance samples.
const CHUNK: usize = 1000;

enum Kind {
    Gaussian,
    Bernoulli(Vec<f64>),
    /// `−E(z) − log Z`; for a quantum prior this is the diagonal bound.
    Diagonal { rbm: RbmParams, log_z: f64 },
    Oracle(Box<QuantumOracle>),
    Clamped { params: QbmParams, cfg: QmcConfig, log_z: f64, seed: u64 },
}

/// Prior log-probabilities `log p(z)`, cached per distinct state.
pub struct PriorLogProb {
    kind: Kind,
    cache: HashMap<Vec<u8>, f64>,
}

impl PriorLogProb {
    /// Closed-form prior; Boltzmann priors use `−E(z) − log Z`.
    pub fn classical(model: &Dvae, log_z: f64) -> Self {
        let kind = if let Some(a) = model.bernoulli_logits() {
            Kind::Bernoulli(a.to_vec())
        } else if let Some(rbm) = model.rbm_params() {
            Kind::Diagonal { rbm, log_z }
        } else {
            Kind::Gaussian
        };
        Self { kind, cache: HashMap::new() }
    }

    /// Exact quantum probabilities from the dense oracle.
    pub fn quantum_exact(model: &Dvae) -> Result<Self> {
        let p = model.qbm_params().ok_or_else(|| Error::InvalidArgument("model has no Boltzmann prior".into()))?;
        Ok(Self { kind: Kind::Oracle(Box::new(qbm::exact_quantum_oracle(&p)?)), cache: HashMap::new() })
    }

    /// Quantum probabilities `⟨z|e^{-H}|z⟩ / Z` from clamped annealing runs.
    pub fn quantum_clamped(model: &Dvae, cfg: QmcConfig, log_z: f64, seed: u64) -> Result<Self> {
        let params = model.qbm_params().ok_or_else(|| Error::InvalidArgument("model has no Boltzmann prior".into()))?;
        Ok(Self { kind: Kind::Clamped { params, cfg, log_z, seed }, cache: HashMap::new() })
    }

    pub fn distinct_states(&self) -> usize {
        self.cache.len()
    }

    pub fn log_prob(&mut self, z: &[u8]) -> Result<f64> {
        if let Some(&v) = self.cache.get(z) {
            return Ok(v);
        }
        let v = match &self.kind {
            Kind::Gaussian => return Err(Error::InvalidArgument("continuous prior has no state probabilities".into())),
            Kind::Bernoulli(a) => a.iter().zip(z).map(|(&a, &zl)| zl as f64 * a - softplus(a)).sum(),
            Kind::Diagonal { rbm, log_z } => -rbm.energy(z)? - log_z,
            Kind::Oracle(o) => o.log_prob(z),
            Kind::Clamped { params, cfg, log_z, seed } => {
                let idx = self.cache.len() as u64;
                let mut rng = substream(*seed, idx + 1);
                qbm::clamped_log_trace(params, z, cfg, &mut rng)?.log_z - log_z
            }
        };
        self.cache.insert(z.to_vec(), v);
        Ok(v)
    }
}

fn gaussian_log_density(x: &[f64], mu: &[f64], sigma: &[f64]) -> f64 {
    let c = 0.5 * (2.0 * std::f64::consts::PI).ln();
    x.iter()
        .zip(mu)
        .zip(sigma)
        .map(|((&x, &m), &s)| -c - s.ln() - 0.5 * ((x - m) / s).powi(2))
        .sum()
}

/// Per-example estimates with their mean and standard error.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub per_example: Vec<f64>,
    pub mean: f64,
    pub stderr: f64,
}

impl Estimate {
    fn new(per_example: Vec<f64>) -> Self {
        let (mean, stderr) = mean_stderr(&per_example);
        Self { per_example, mean, stderr }
    }
}

/// Importance log-weights `log p(x|ζ) + log p(z) − log q(z|x)` of `k` draws for
/// one input. The smoothing densities `r(ζ|z)` cancel between numerator and
/// denominator.
pub fn log_weights(model: &Dvae, x: &[f64], k: usize, beta: f64, prior: &mut PriorLogProb, rng: &mut Rng) -> Result<Vec<f64>> {
    let l = model.config().latent_size;
    let mut out = Vec::with_capacity(k);
    let mut left = k;
    while left > 0 {
        let n = left.min(CHUNK);
        let xs = x.repeat(n);
        let noise = model.latent_noise(n, rng);
        let pass = model.forward(&xs, &noise, beta, 0.0, false)?;
        for r in 0..n {
            let ae = pass.autoencoding[r];
            let lw = if model.is_discrete() {
                let z = &pass.z[r * l..(r + 1) * l];
                let q = &pass.q[r * l..(r + 1) * l];
                let log_q: f64 = z
                    .iter()
                    .zip(q)
                    .map(|(&zl, &ql)| {
                        let ql = ql.clamp(PROB_EPS, 1.0 - PROB_EPS);
                        if zl == 1 {
                            ql.ln()
                        } else {
                            (1.0 - ql).ln()
                        }
                    })
                    .sum();
                ae + prior.log_prob(z)? - log_q
            } else {
                let zeta = &pass.zeta[r * l..(r + 1) * l];
                let mu = &pass.q[r * l..(r + 1) * l];
                let sigma = &pass.sigma[r * l..(r + 1) * l];
                let zero = vec![0.0; l];
                let one = vec![1.0; l];
                ae + gaussian_log_density(zeta, &zero, &one) - gaussian_log_density(zeta, mu, sigma)
            };
            out.push(lw);
        }
        left -= n;
    }
    Ok(out)
}

/// `log (1/k Σ_i w_i)` for each row of `data`.
pub fn iw_elbo(model: &Dvae, data: &Dataset, k: usize, beta: f64, prior: &mut PriorLogProb, rng: &mut Rng) -> Result<Estimate> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    let mut per = Vec::with_capacity(data.rows());
    for i in 0..data.rows() {
        per.push(log_mean_exp(&log_weights(model, data.row(i), k, beta, prior, rng)?));
    }
    Ok(Estimate::new(per))
}

/// The true ELBO (cross-entropy replaced by `−log p(z)` under the quantum
/// distribution) next to the Q-ELBO bound, on common draws.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantumElbo {
    pub elbo: Estimate,
    pub qelbo: Estimate,
    pub distinct_states: usize,
}

pub fn quantum_elbo_eval(
    model: &Dvae,
    data: &Dataset,
    beta: f64,
    log_z: f64,
    prior: &mut PriorLogProb,
    rng: &mut Rng,
) -> Result<QuantumElbo> {
    if model.rbm_params().is_none() {
        return Err(Error::InvalidArgument("quantum ELBO needs a Boltzmann prior".into()));
    }
    let l = model.config().latent_size;
    let bs = model.config().batch_size.max(1);
    let (mut elbo, mut qelbo) = (Vec::new(), Vec::new());
    for start in (0..data.rows()).step_by(bs) {
        let idx: Vec<usize> = (start..(start + bs).min(data.rows())).collect();
        let x = data.gather(&idx);
        let noise = model.latent_noise(idx.len(), rng);
        let pass = model.forward(&x, &noise, beta, log_z, false)?;
        for r in 0..idx.len() {
            let base = pass.autoencoding[r] + pass.entropy[r];
            qelbo.push(base - pass.cross_entropy[r]);
            elbo.push(base + prior.log_prob(&pass.z[r * l..(r + 1) * l])?);
        }
    }
    Ok(QuantumElbo { elbo: Estimate::new(elbo), qelbo: Estimate::new(qelbo), distinct_states: prior.distinct_states() })
}

/// Prior sampling settings for [`generate`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleConfig {
    /// Block-Gibbs sweeps from a random start for a classical prior.
    pub gibbs_sweeps: usize,
    pub qmc: QmcConfig,
    pub qmc_sweeps: usize,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self { gibbs_sweeps: 200, qmc: QmcConfig::default(), qmc_sweeps: 5 }
    }
}

/// `n` latent draws from the prior: binary states for discrete priors
/// (`n × L`), as `f64`; standard normal draws for the Gaussian baseline.
pub fn sample_prior(model: &Dvae, n: usize, cfg: &SampleConfig, rng: &mut Rng) -> Result<Vec<f64>> {
    let l = model.config().latent_size;
    if let Some(a) = model.bernoulli_logits() {
        return Ok((0..n * l).map(|k| f64::from(rng.random::<f64>() < sigmoid(a[k % l]))).collect());
    }
    let Some(p) = model.qbm_params() else {
        return Ok(model.latent_noise(n, rng));
    };
    if p.is_classical() {
        let mut st = PcdState::new(&p.rbm, n, rng);
        rbm::pcd_negative_phase(&p.rbm, &mut st, cfg.gibbs_sweeps.max(1))?;
        Ok(st.chains().iter().flat_map(|z| z.iter().map(|&b| f64::from(b))).collect())
    } else {
        let mut qcfg = cfg.qmc.clone();
        qcfg.pa.population = n.max(2);
        let mut pop = QmcNegativePhase::new(&p, &qcfg, rng)?;
        pop.sample(&p, cfg.qmc_sweeps)?;
        Ok(pop.paths().iter().take(n).flat_map(|path| path.slice(0).iter().map(|&b| f64::from(b))).collect())
    }
}

/// Generated pixel probabilities, `n × input_size`: prior draw, smoothing
/// `r(ζ|z)`, decoder.
pub fn generate(model: &Dvae, n: usize, beta: f64, cfg: &SampleConfig, rng: &mut Rng) -> Result<Vec<f64>> {
    let latents = sample_prior(model, n, cfg, rng)?;
    let zeta: Vec<f64> = if model.is_discrete() {
        latents.iter().map(|&z| smoothing_sample(z as u8, rng.random(), beta)).collect()
    } else {
        latents
    };
    Ok(model.decode_logits(&zeta)?.into_iter().map(sigmoid).collect())
}

/// Encode, sample and decode each row of `x`; returns pixel probabilities.
pub fn reconstruct(model: &Dvae, x: &Dataset, beta: f64, rng: &mut Rng) -> Result<Vec<f64>> {
    let noise = model.latent_noise(x.rows(), rng);
    let pass = model.forward(x.values(), &noise, beta, 0.0, false)?;
    Ok(pass.decoder_logits.into_iter().map(sigmoid).collect())
}

/// Bootstrap standard error of the mean.
pub fn bootstrap_stderr(values: &[f64], resamples: usize, rng: &mut Rng) -> f64 {
    if values.len() < 2 || resamples < 2 {
        return 0.0;
    }
    let n = values.len();
    let means: Vec<f64> = (0..resamples)
        .map(|_| (0..n).map(|_| values[rng.random_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    let (m, _) = mean_stderr(&means);
    (means.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (resamples - 1) as f64).sqrt()
}

/// Evaluation report written as JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub elbo: f64,
    pub iw_elbo: f64,
    pub qelbo: Option<f64>,
    pub k: usize,
    pub logz: f64,
    pub logz_stderr: f64,
    pub n_test: usize,
    pub elbo_bootstrap_stderr: f64,
    pub iw_elbo_bootstrap_stderr: f64,
}

/// Binary PGM (P5) of a `width × height` image with values in `[0, 1]`.
pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[f64]) -> Result<()> {
    if pixels.len() != width * height {
        return Err(Error::InvalidArgument(format!("{} pixels for a {width}x{height} image", pixels.len())));
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(f, "P5\n{width} {height}\n255\n")?;
    let bytes: Vec<u8> = pixels.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    f.write_all(&bytes)?;
    Ok(())
}

/// Tiles `images` (each `width × height`) into a grid `cols` wide with a
/// one-pixel gap. Returns `(grid_width, grid_height, pixels)`.
pub fn image_grid(images: &[f64], width: usize, height: usize, cols: usize) -> (usize, usize, Vec<f64>) {
    let per = width * height;
    let n = images.len() / per.max(1);
    let cols = cols.clamp(1, n.max(1));
    let rows = n.div_ceil(cols);
    let (gw, gh) = (cols * (width + 1) + 1, rows * (height + 1) + 1);
    let mut out = vec![0.5; gw * gh];
    for k in 0..n {
        let (ox, oy) = (1 + (k % cols) * (width + 1), 1 + (k / cols) * (height + 1));
        for y in 0..height {
            for x in 0..width {
                out[(oy + y) * gw + ox + x] = images[k * per + y * width + x];
            }
        }
    }
    (gw, gh, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::bars_and_stripes;
    use crate::model::VaeConfig;

    fn model(prior: &str, gamma: f64, seed: u64) -> Dvae {
        let c: VaeConfig = serde_json::from_value(serde_json::json!({
            "input_size": 4, "latent_size": 4, "groups": if prior == "gaussian" { 1 } else { 2 },
            "prior": prior, "gamma": gamma, "encoder_hidden": [6], "decoder_hidden": [6], "batch_size": 16,
            "sampler": {"negative_phase": "exact"}
        }))
        .unwrap();
        let mut m = Dvae::new(c, &mut substream(seed, 0)).unwrap();
        let mut rng = substream(seed, 1);
        let flat: Vec<f64> = m.params().flatten().iter().map(|v| v + rng.random_range(-0.5..0.5)).collect();
        m.params_mut().assign_flat(&flat).unwrap();
        m
    }

    #[test]
    fn single_sample_bound_matches_elbo_on_average() {
        let m = model("rbm", 0.0, 1);
        let x = [1.0, 0.0, 1.0, 0.0];
        let log_z = rbm::exact_log_z(&m.rbm_params().unwrap()).unwrap();
        let mut prior = PriorLogProb::classical(&m, log_z);
        let w = log_weights(&m, &x, 20000, 5.0, &mut prior, &mut substream(1, 2)).unwrap();
        let (iw1, se) = mean_stderr(&w);
        let noise = m.latent_noise(20000, &mut substream(1, 3));
        let pass = m.forward(&x.repeat(20000), &noise, 5.0, log_z, false).unwrap();
        let (elbo, se2) = mean_stderr(&pass.elbo);
        assert!((iw1 - elbo).abs() < 4.0 * (se * se + se2 * se2).sqrt(), "{iw1} vs {elbo}");
    }

    #[test]
    fn more_samples_tighten_the_bound() {
        for prior in ["rbm", "gaussian"] {
            let m = model(prior, 0.0, 2);
            let data = bars_and_stripes(2, 10, &mut substream(2, 2)).unwrap();
            let log_z = m.rbm_params().map_or(0.0, |p| rbm::exact_log_z(&p).unwrap());
            let mut p = PriorLogProb::classical(&m, log_z);
            let a = iw_elbo(&m, &data, 1, 5.0, &mut p, &mut substream(2, 3)).unwrap();
            let b = iw_elbo(&m, &data, 200, 5.0, &mut p, &mut substream(2, 4)).unwrap();
            assert!(b.mean > a.mean, "{prior}: {} vs {}", b.mean, a.mean);
        }
        let m = model("rbm", 0.0, 2);
        let mut p = PriorLogProb::classical(&m, 0.0);
        let data = bars_and_stripes(2, 1, &mut substream(2, 2)).unwrap();
        assert!(iw_elbo(&m, &data, 0, 5.0, &mut p, &mut substream(2, 3)).is_err());
    }

    #[test]
    fn quantum_elbo_dominates_qelbo() {
        let m = model("qbm", 1.0, 3);
        let data = bars_and_stripes(2, 20, &mut substream(3, 2)).unwrap();
        let oracle = qbm::exact_quantum_oracle(&m.qbm_params().unwrap()).unwrap();
        let mut p = PriorLogProb::quantum_exact(&m).unwrap();
        let r = quantum_elbo_eval(&m, &data, 5.0, oracle.log_z, &mut p, &mut substream(3, 3)).unwrap();
        for (e, q) in r.elbo.per_example.iter().zip(&r.qelbo.per_example) {
            assert!(e >= q);
        }
        assert!(r.distinct_states >= 1 && r.distinct_states <= 16);
    }

    #[test]
    fn classical_quantum_prior_matches_diagonal() {
        let m = model("qbm", 0.0, 4);
        let p = m.rbm_params().unwrap();
        let log_z = rbm::exact_log_z(&p).unwrap();
        let mut a = PriorLogProb::classical(&m, log_z);
        let mut b = PriorLogProb::quantum_exact(&m).unwrap();
        for s in 0..16 {
            let z = rbm::state_from_index(s, 4);
            assert!((a.log_prob(&z).unwrap() - b.log_prob(&z).unwrap()).abs() < 1e-9);
        }
        assert_eq!(a.distinct_states(), 16);
    }

    #[test]
    fn zero_decoder_generates_half_grey() {
        let mut m = model("bernoulli", 0.0, 5);
        let n = m.params().flatten().len();
        m.params_mut().assign_flat(&vec![0.0; n]).unwrap();
        let px = generate(&m, 7, 5.0, &SampleConfig::default(), &mut substream(5, 2)).unwrap();
        assert_eq!(px.len(), 28);
        assert!(px.iter().all(|&v| (v - 0.5).abs() < 1e-12));
    }

    #[test]
    fn prior_samples_are_binary() {
        for (prior, gamma) in [("rbm", 0.0), ("qbm", 1.0)] {
            let m = model(prior, gamma, 6);
            let mut cfg = SampleConfig { gibbs_sweeps: 5, ..SampleConfig::default() };
            cfg.qmc.slices = 4;
            cfg.qmc.pa.steps = 5;
            let z = sample_prior(&m, 9, &cfg, &mut substream(6, 2)).unwrap();
            assert_eq!(z.len(), 36);
            assert!(z.iter().all(|&v| v == 0.0 || v == 1.0));
        }
    }

    #[test]
    fn bootstrap_matches_analytic_stderr() {
        let mut rng = substream(7, 0);
        let xs: Vec<f64> = (0..400).map(|_| rng.random::<f64>()).collect();
        let (_, se) = mean_stderr(&xs);
        let b = bootstrap_stderr(&xs, 2000, &mut rng);
        assert!((b / se - 1.0).abs() < 0.1);
        assert_eq!(bootstrap_stderr(&[1.0], 10, &mut rng), 0.0);
    }

    #[test]
    fn pgm_and_grid() {
        let dir = tempfile::tempdir().unwrap();
        let imgs = [0.0, 1.0, 1.0, 0.0, 0.25, 0.25, 0.25, 0.25, 1.0, 1.0, 1.0, 1.0];
        let (w, h, px) = image_grid(&imgs, 2, 2, 2);
        assert_eq!((w, h), (7, 7));
        assert_eq!(px[w + 1], 0.0);
        assert_eq!(px[w + 2], 1.0);
        assert_eq!(px[w + 4], 0.25);
        assert_eq!(px[4 * w + 1], 1.0);
        let path = dir.path().join("g.pgm");
        write_pgm(&path, w, h, &px).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"P5\n7 7\n255\n"));
        assert_eq!(bytes.len(), 11 + 49);
        assert!(write_pgm(&path, 3, 3, &px).is_err());
    }
}
