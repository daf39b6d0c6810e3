use std::path::Path;

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::config::{PriorKind, VaeConfig};
use super::network::Mlp;
use crate::diffcore::{checkpoint, BatchStats, ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{shape_err, Error, Result};
use crate::math::PROB_EPS;
use crate::qbm::QbmParams;
use crate::rbm::{Moments, RbmParams};
use crate::reparam::discrete_from_noise;
use crate::rng::Rng;

#[derive(Clone, Copy, Debug)]
enum Prior {
    Gaussian,
    Bernoulli { logits: ParamId },
    Boltzmann { h: ParamId, w: ParamId },
}

/// Batch-mean decomposition of the objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ElboBreakdown {
    pub autoencoding: f64,
    pub entropy: f64,
    /// Cross-entropy to the prior; for a QBM this is the diagonal-energy bound.
    pub cross_entropy: f64,
    pub total: f64,
}

impl ElboBreakdown {
    pub fn from_rows(ae: &[f64], ent: &[f64], ce: &[f64]) -> Self {
        let n = ae.len().max(1) as f64;
        let autoencoding = ae.iter().sum::<f64>() / n;
        let entropy = ent.iter().sum::<f64>() / n;
        let cross_entropy = ce.iter().sum::<f64>() / n;
        Self { autoencoding, entropy, cross_entropy, total: autoencoding + entropy - cross_entropy }
    }

    /// `entropy − cross_entropy`, the negative KL term.
    pub fn neg_kl(&self) -> f64 {
        self.entropy - self.cross_entropy
    }
}

/// A recorded forward pass over one batch.
#[derive(Debug)]
pub struct ForwardPass {
    pub tape: Tape,
    pub loss: Var,
    pub breakdown: ElboBreakdown,
    pub rows: usize,
    /// Per-row `log p(x|ζ)`.
    pub autoencoding: Vec<f64>,
    /// Per-row entropy term.
    pub entropy: Vec<f64>,
    /// Per-row cross-entropy term (includes `log Z` for Boltzmann priors).
    pub cross_entropy: Vec<f64>,
    /// Per-row `autoencoding + entropy − cross_entropy`.
    pub elbo: Vec<f64>,
    /// Posterior probabilities, `rows × L` (means for the Gaussian prior).
    pub q: Vec<f64>,
    /// Posterior standard deviations for the Gaussian prior.
    pub sigma: Vec<f64>,
    pub z: Vec<u8>,
    pub zeta: Vec<f64>,
    pub decoder_logits: Vec<f64>,
    stats: Vec<BatchStats>,
}

/// Discrete (or Gaussian) VAE with a hierarchical posterior.
#[derive(Clone, Debug)]
pub struct Dvae {
    config: VaeConfig,
    store: ParamStore,
    encoders: Vec<Mlp>,
    decoder: Mlp,
    prior: Prior,
}

fn rows_of(len: usize, cols: usize, what: &'static str) -> Result<usize> {
    if cols == 0 || !len.is_multiple_of(cols) {
        return Err(shape_err(what, format!("{len} values do not form rows of {cols}")));
    }
    Ok(len / cols)
}

impl Dvae {
    pub fn new(config: VaeConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let (d, l, gs) = (config.input_size, config.latent_size, config.group_size());
        let gaussian = config.prior == PriorKind::Gaussian;
        let encoders = (0..config.groups)
            .map(|g| {
                let out = if gaussian { 2 * l } else { gs };
                Mlp::new(&mut store, &format!("enc{g}"), d + g * gs, &config.encoder_hidden, out, config.batch_norm, rng)
            })
            .collect();
        let decoder = Mlp::new(&mut store, "dec", l, &config.decoder_hidden, d, config.batch_norm, rng);
        let prior = match config.prior {
            PriorKind::Gaussian => Prior::Gaussian,
            PriorKind::Bernoulli => Prior::Bernoulli { logits: store.add("prior.logits", Tensor::zeros(&[l])) },
            PriorKind::Rbm | PriorKind::Qbm => Prior::Boltzmann {
                h: store.add("prior.h", Tensor::zeros(&[l])),
                w: store.add("prior.w", Tensor::zeros(&[l / 2, l / 2])),
            },
        };
        Ok(Self { config, store, encoders, decoder, prior })
    }

    pub fn config(&self) -> &VaeConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn is_discrete(&self) -> bool {
        !matches!(self.prior, Prior::Gaussian)
    }

    /// Classical part of a Boltzmann prior.
    pub fn rbm_params(&self) -> Option<RbmParams> {
        match self.prior {
            Prior::Boltzmann { h, w } => {
                let half = self.config.latent_size / 2;
                let h = self.store.get(h).values().to_vec();
                let w = self.store.get(w).values().to_vec();
                Some(RbmParams::new(half, half, h, w).expect("prior tensors have fixed shapes"))
            }
            _ => None,
        }
    }

    /// Boltzmann prior with the configured transverse field (zero for an RBM).
    pub fn qbm_params(&self) -> Option<QbmParams> {
        self.rbm_params().map(|r| QbmParams::uniform(self.config.gamma, r).expect("validated gamma"))
    }

    /// Factorial Bernoulli prior logits `a`, with `p(z_l = 1) = sigmoid(a_l)`.
    pub fn bernoulli_logits(&self) -> Option<&[f64]> {
        match self.prior {
            Prior::Bernoulli { logits } => Some(self.store.get(logits).values()),
            _ => None,
        }
    }

    /// Reparameterization noise for `rows` inputs: uniform for discrete
    /// latents, standard normal for the Gaussian baseline.
    pub fn latent_noise(&self, rows: usize, rng: &mut Rng) -> Vec<f64> {
        let n = rows * self.config.latent_size;
        if self.is_discrete() {
            (0..n).map(|_| rng.random::<f64>()).collect()
        } else {
            (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
        }
    }

    /// Records the single-sample objective for `x` (`rows × input_size`) with
    /// the given noise. `log_z` is added to the Boltzmann cross-entropy as a
    /// constant; its gradient comes from [`Dvae::apply_negative_phase`].
    pub fn forward(&self, x: &[f64], noise: &[f64], beta: f64, log_z: f64, train: bool) -> Result<ForwardPass> {
        let (d, l) = (self.config.input_size, self.config.latent_size);
        let rows = rows_of(x.len(), d, "forward")?;
        if noise.len() != rows * l {
            return Err(shape_err("forward", format!("noise has {} values, expected {}", noise.len(), rows * l)));
        }
        let mut tape = Tape::new();
        let xv = tape.leaf(Tensor::matrix(rows, d, x.to_vec())?);
        let mut stats = Vec::new();
        let (zeta, ent, ce, q_var, sigma_var, z) = if self.is_discrete() {
            let gs = self.config.group_size();
            let mut zetas: Vec<Var> = Vec::new();
            let mut qs: Vec<Var> = Vec::new();
            let mut z = vec![0u8; rows * l];
            for (g, enc) in self.encoders.iter().enumerate() {
                let input = if g == 0 {
                    xv
                } else {
                    let mut parts = vec![xv];
                    parts.extend(&zetas);
                    tape.concat(&parts)?
                };
                let (logits, s) = enc.forward(&mut tape, &self.store, input, train)?;
                stats.extend(s);
                let q = tape.sigmoid(logits);
                let q = tape.clamp(q, PROB_EPS, 1.0 - PROB_EPS);
                let mut rho = Vec::with_capacity(rows * gs);
                for r in 0..rows {
                    rho.extend_from_slice(&noise[r * l + g * gs..r * l + (g + 1) * gs]);
                }
                let qv = tape.value(q).values();
                for r in 0..rows {
                    for k in 0..gs {
                        z[r * l + g * gs + k] = discrete_from_noise(rho[r * gs + k], qv[r * gs + k]);
                    }
                }
                zetas.push(tape.spike_exp(q, rho, beta)?);
                qs.push(q);
            }
            let q_all = if qs.len() == 1 { qs[0] } else { tape.concat(&qs)? };
            let zeta = if zetas.len() == 1 { zetas[0] } else { tape.concat(&zetas)? };
            let ent = tape.binary_entropy(q_all)?;
            let ce = match self.prior {
                Prior::Bernoulli { logits } => {
                    let a = tape.param(&self.store, logits);
                    tape.bernoulli_cross_entropy(q_all, a)?
                }
                Prior::Boltzmann { h, w } => {
                    let (hv, wv) = (tape.param(&self.store, h), tape.param(&self.store, w));
                    let e = tape.prior_energy(z.clone(), hv, wv, Some(q_all))?;
                    tape.add_scalar(e, log_z)
                }
                Prior::Gaussian => unreachable!(),
            };
            (zeta, ent, ce, q_all, None, z)
        } else {
            let (out, s) = self.encoders[0].forward(&mut tape, &self.store, xv, train)?;
            stats.extend(s);
            let mu = tape.slice_cols(out, 0, l)?;
            let log_sigma = tape.slice_cols(out, l, 2 * l)?;
            let sigma = tape.exp(log_sigma);
            let eps = tape.mul_const(sigma, noise.to_vec())?;
            let zeta = tape.add(mu, eps)?;
            let half_log_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
            let ent = tape.row_sum(log_sigma)?;
            let ent = tape.add_scalar(ent, l as f64 * (half_log_2pi + 0.5));
            let mu2 = tape.mul(mu, mu)?;
            let s2 = tape.mul(sigma, sigma)?;
            let m2 = tape.add(mu2, s2)?;
            let m2 = tape.scale(m2, 0.5);
            let ce = tape.row_sum(m2)?;
            let ce = tape.add_scalar(ce, l as f64 * half_log_2pi);
            (zeta, ent, ce, mu, Some(sigma), Vec::new())
        };
        let (logits, s) = self.decoder.forward(&mut tape, &self.store, zeta, train)?;
        stats.extend(s);
        let ae = tape.bernoulli_log_lik(logits, x.to_vec())?;
        let total = tape.add(ae, ent)?;
        let total = tape.sub(total, ce)?;
        let mean = tape.mean(total);
        let loss = tape.scale(mean, -1.0);
        let lv = tape.value(loss).values()[0];
        if !lv.is_finite() {
            return Err(Error::NonFinite { context: "loss".into(), detail: format!("{lv} over {rows} rows") });
        }
        let get = |t: &Tape, v: Var| t.value(v).values().to_vec();
        let (autoencoding, entropy, cross_entropy) = (get(&tape, ae), get(&tape, ent), get(&tape, ce));
        Ok(ForwardPass {
            breakdown: ElboBreakdown::from_rows(&autoencoding, &entropy, &cross_entropy),
            elbo: get(&tape, total),
            q: get(&tape, q_var),
            sigma: sigma_var.map(|s| get(&tape, s)).unwrap_or_default(),
            zeta: get(&tape, zeta),
            decoder_logits: get(&tape, logits),
            autoencoding,
            entropy,
            cross_entropy,
            z,
            rows,
            loss,
            tape,
            stats,
        })
    }

    /// Back-propagates the loss of `pass` into the parameter gradients.
    pub fn backward(&mut self, pass: &mut ForwardPass) -> Result<()> {
        pass.tape.backward(pass.loss, &mut self.store)
    }

    /// Subtracts the model expectations from the prior gradients, completing
    /// the positive-minus-negative phase gradient of `log Z`.
    pub fn apply_negative_phase(&mut self, m: &Moments) -> Result<()> {
        let Prior::Boltzmann { h, w } = self.prior else {
            return Err(Error::InvalidArgument("negative phase needs a Boltzmann prior".into()));
        };
        let l = self.config.latent_size;
        if m.first.len() != l || m.cross.len() != (l / 2) * (l / 2) {
            return Err(shape_err("negative_phase", "moment sizes do not match the prior"));
        }
        let neg_first: Vec<f64> = m.first.iter().map(|v| -v).collect();
        let neg_cross: Vec<f64> = m.cross.iter().map(|v| -v).collect();
        self.store.get_mut(h).accumulate_grad(&neg_first);
        self.store.get_mut(w).accumulate_grad(&neg_cross);
        Ok(())
    }

    /// Folds the training batch statistics of `pass` into the running
    /// batch-norm averages.
    pub fn update_running_stats(&mut self, pass: &ForwardPass) {
        let mut off = 0;
        for net in self.encoders.iter_mut().chain(std::iter::once(&mut self.decoder)) {
            let n = net.norm_layers();
            if off + n <= pass.stats.len() {
                net.update_running(&pass.stats[off..off + n]);
            }
            off += n;
        }
    }

    /// Decoder Bernoulli logits for `zeta` (`rows × L`), evaluation mode.
    pub fn decode_logits(&self, zeta: &[f64]) -> Result<Vec<f64>> {
        let l = self.config.latent_size;
        let rows = rows_of(zeta.len(), l, "decode")?;
        let mut tape = Tape::new();
        let zv = tape.leaf(Tensor::matrix(rows, l, zeta.to_vec())?);
        let (out, _) = self.decoder.forward(&mut tape, &self.store, zv, false)?;
        Ok(tape.value(out).values().to_vec())
    }

    /// Writes parameters, batch-norm buffers and the configuration to `dir`.
    pub fn save(&self, dir: &Path, extra: serde_json::Value) -> Result<()> {
        let buffers: Vec<(String, Tensor)> =
            self.encoders.iter().chain(std::iter::once(&self.decoder)).flat_map(Mlp::buffers).collect();
        let tensors = self.store.iter().chain(buffers.iter().map(|(n, t)| (n.as_str(), t)));
        let meta = serde_json::json!({ "config": self.config, "extra": extra });
        checkpoint::save(dir, tensors, meta)
    }

    /// Loads a checkpoint written by [`Dvae::save`]. When `expected` is given
    /// the stored configuration's architecture must match it.
    pub fn load(dir: &Path, expected: Option<&VaeConfig>) -> Result<(Self, serde_json::Value)> {
        let (tensors, meta) = checkpoint::load(dir)?;
        let config: VaeConfig = serde_json::from_value(meta["config"].clone())
            .map_err(|e| Error::CheckpointMismatch(format!("stored config: {e}")))?;
        if let Some(exp) = expected {
            let arch = |c: &VaeConfig| {
                (c.input_size, c.latent_size, c.groups, c.encoder_hidden.clone(), c.decoder_hidden.clone(), c.batch_norm, c.prior)
            };
            if arch(exp) != arch(&config) {
                return Err(Error::CheckpointMismatch("checkpoint architecture differs from the config".into()));
            }
        }
        let mut model = Self::new(config, &mut crate::rng::substream(0, 0))?;
        let (params, buffers): (Vec<_>, Vec<_>) =
            tensors.into_iter().partition(|(n, _)| model.store.find(n).is_some());
        checkpoint::restore(&mut model.store, &params)?;
        let mut used = 0;
        for net in model.encoders.iter_mut().chain(std::iter::once(&mut model.decoder)) {
            used += net.load_buffers(&buffers);
        }
        if used != buffers.len() {
            return Err(Error::CheckpointMismatch(format!("{} unrecognised tensors", buffers.len() - used)));
        }
        Ok((model, meta["extra"].clone()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::config::{NegativePhaseKind, PriorKind};
    use crate::rng::substream;

    fn config(prior: PriorKind, groups: usize, hidden: &[usize], bn: bool) -> VaeConfig {
        let mut c: VaeConfig = serde_json::from_value(serde_json::json!({
            "input_size": 6, "latent_size": 4, "groups": groups, "prior": prior,
            "encoder_hidden": hidden, "decoder_hidden": hidden, "batch_norm": bn, "batch_size": 8
        }))
        .unwrap();
        c.sampler.negative_phase = NegativePhaseKind::Exact;
        c
    }

    fn inputs(rows: usize, rng: &mut Rng) -> Vec<f64> {
        (0..rows * 6).map(|_| f64::from(rng.random::<bool>())).collect()
    }

    /// Central differences of the loss under fixed noise against the tape.
    fn gradient_check(model: &mut Dvae, x: &[f64], noise: &[f64], train: bool) {
        let beta = 4.0;
        model.params_mut().zero_grads();
        let mut pass = model.forward(x, noise, beta, 0.0, train).unwrap();
        model.backward(&mut pass).unwrap();
        let analytic = model.params().flatten_grads();
        let base = model.params().flatten();
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for k in 0..base.len() {
            let mut p = base.clone();
            p[k] += h;
            model.params_mut().assign_flat(&p).unwrap();
            let up = model.forward(x, noise, beta, 0.0, train).unwrap();
            p[k] -= 2.0 * h;
            model.params_mut().assign_flat(&p).unwrap();
            let down = model.forward(x, noise, beta, 0.0, train).unwrap();
            assert_eq!(up.z, down.z, "finite difference crossed a discrete boundary");
            let lv = |f: &ForwardPass| f.tape.value(f.loss).values()[0];
            let numeric = (lv(&up) - lv(&down)) / (2.0 * h);
            let err = (analytic[k] - numeric).abs() / analytic[k].abs().max(numeric.abs()).max(1e-3);
            worst = worst.max(err);
        }
        model.params_mut().assign_flat(&base).unwrap();
        assert!(worst <= 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn whole_model_gradient_bernoulli_prior() {
        let mut rng = substream(1, 0);
        let mut m = Dvae::new(config(PriorKind::Bernoulli, 2, &[5], false), &mut rng).unwrap();
        let x = inputs(3, &mut rng);
        let noise = m.latent_noise(3, &mut rng);
        gradient_check(&mut m, &x, &noise, true);
    }

    #[test]
    fn whole_model_gradient_with_batch_norm() {
        let mut rng = substream(2, 0);
        let mut m = Dvae::new(config(PriorKind::Bernoulli, 2, &[5], true), &mut rng).unwrap();
        let x = inputs(4, &mut rng);
        let noise = m.latent_noise(4, &mut rng);
        gradient_check(&mut m, &x, &noise, true);
        gradient_check(&mut m, &x, &noise, false);
    }

    #[test]
    fn whole_model_gradient_gaussian() {
        let mut rng = substream(3, 0);
        let mut m = Dvae::new(config(PriorKind::Gaussian, 1, &[5], false), &mut rng).unwrap();
        let x = inputs(3, &mut rng);
        let noise = m.latent_noise(3, &mut rng);
        gradient_check(&mut m, &x, &noise, true);
    }

    #[test]
    fn perfect_decoder_has_zero_autoencoding() {
        let mut rng = substream(4, 0);
        let mut m = Dvae::new(config(PriorKind::Rbm, 1, &[], false), &mut rng).unwrap();
        let x = [1.0, 0.0, 1.0, 1.0, 0.0, 0.0];
        let w = m.params().find("dec.l0.w").unwrap();
        let b = m.params().find("dec.l0.b").unwrap();
        m.params_mut().get_mut(w).values_mut().fill(0.0);
        m.params_mut().get_mut(b).values_mut().iter_mut().zip(&x).for_each(|(v, &t)| *v = if t == 1.0 { 60.0 } else { -60.0 });
        let noise = m.latent_noise(1, &mut rng);
        let pass = m.forward(&x, &noise, 5.0, 0.0, false).unwrap();
        assert!(pass.autoencoding[0].abs() < 1e-20);
    }

    #[test]
    fn matching_factorial_prior_has_zero_kl() {
        let mut rng = substream(5, 0);
        let mut m = Dvae::new(config(PriorKind::Bernoulli, 1, &[], false), &mut rng).unwrap();
        let bias = [0.3, -1.2, 2.0, 0.0];
        let w = m.params().find("enc0.l0.w").unwrap();
        let b = m.params().find("enc0.l0.b").unwrap();
        let a = m.params().find("prior.logits").unwrap();
        m.params_mut().get_mut(w).values_mut().fill(0.0);
        m.params_mut().get_mut(b).values_mut().copy_from_slice(&bias);
        m.params_mut().get_mut(a).values_mut().copy_from_slice(&bias);
        let x = inputs(5, &mut rng);
        let noise = m.latent_noise(5, &mut rng);
        let pass = m.forward(&x, &noise, 5.0, 0.0, false).unwrap();
        assert!(pass.breakdown.neg_kl().abs() < 1e-12);
    }

    #[test]
    fn breakdown_is_additive_and_deterministic() {
        let mut rng = substream(6, 0);
        let m = Dvae::new(config(PriorKind::Rbm, 2, &[7], true), &mut rng).unwrap();
        let x = inputs(8, &mut rng);
        let noise = m.latent_noise(8, &mut rng);
        let a = m.forward(&x, &noise, 3.0, 2.77, true).unwrap();
        let b = m.forward(&x, &noise, 3.0, 2.77, true).unwrap();
        let br = a.breakdown;
        assert_eq!(br.total, br.autoencoding + br.entropy - br.cross_entropy);
        assert_eq!(a.elbo, b.elbo);
        assert!((a.tape.value(a.loss).values()[0] + br.total).abs() < 1e-12);
    }

    #[test]
    fn shape_errors() {
        let mut rng = substream(7, 0);
        let m = Dvae::new(config(PriorKind::Rbm, 2, &[], false), &mut rng).unwrap();
        assert!(m.forward(&[0.0; 7], &[0.5; 4], 1.0, 0.0, false).is_err());
        assert!(m.forward(&[0.0; 6], &[0.5; 3], 1.0, 0.0, false).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = substream(8, 0);
        let mut m = Dvae::new(config(PriorKind::Rbm, 2, &[5], true), &mut rng).unwrap();
        let x = inputs(8, &mut rng);
        let noise = m.latent_noise(8, &mut rng);
        let pass = m.forward(&x, &noise, 2.0, 0.0, true).unwrap();
        m.update_running_stats(&pass);
        m.save(dir.path(), serde_json::json!({"epoch": 3})).unwrap();
        let (back, extra) = Dvae::load(dir.path(), Some(m.config())).unwrap();
        assert_eq!(extra["epoch"], 3);
        assert_eq!(back.params().flatten(), m.params().flatten());
        let e1 = m.forward(&x, &noise, 2.0, 0.0, false).unwrap().elbo;
        let e2 = back.forward(&x, &noise, 2.0, 0.0, false).unwrap().elbo;
        assert_eq!(e1, e2);
        let mut other = m.config().clone();
        other.encoder_hidden = vec![6];
        assert!(matches!(Dvae::load(dir.path(), Some(&other)), Err(Error::CheckpointMismatch(_))));
    }
}
