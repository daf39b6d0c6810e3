//! Latent-variable transformations.
//!
//! Binary latents `z` are smoothed by the spike-and-exponential distribution
//! `r(ζ|z)`: a point mass at zero when `z = 0` and a truncated exponential on
//! `(0, 1]` with sharpness `β` when `z = 1`. Mixing with Bernoulli(`q`) gives a
//! continuous-plus-atom marginal whose CDF inverts in closed form, so a uniform
//! draw `ρ` determines both `ζ` and `z = Θ(ρ + q − 1)`.

use crate::error::{Error, Result};
use crate::math::{clip_prob, PROB_EPS};

/// Inverse of the spike-and-exponential mixture CDF.
///
/// `ζ = (1/β) log[(max(ρ + q − 1, 0)/q)(e^β − 1) + 1]`, with `q` clipped to
/// `[ε, 1 − ε]`. The result is exactly zero on the spike branch.
pub fn spike_exp_inverse_cdf(rho: f64, q: f64, beta: f64) -> f64 {
    debug_assert!(beta > 0.0);
    let q = clip_prob(q);
    let d = rho + q - 1.0;
    if d <= 0.0 {
        return 0.0;
    }
    (((d / q) * beta.exp_m1()).ln_1p() / beta).clamp(0.0, 1.0)
}

/// The mixture CDF `F(ζ) = (1 − q) + q (e^{βζ} − 1)/(e^β − 1)` on `[0, 1]`.
pub fn spike_exp_cdf(zeta: f64, q: f64, beta: f64) -> f64 {
    let q = clip_prob(q);
    if zeta < 0.0 {
        0.0
    } else if zeta >= 1.0 {
        1.0
    } else {
        (1.0 - q) + q * (beta * zeta).exp_m1() / beta.exp_m1()
    }
}

/// `∂ζ/∂q` of [`spike_exp_inverse_cdf`] at fixed `ρ`; zero on the spike branch.
pub fn spike_exp_dzeta_dq(rho: f64, q: f64, beta: f64) -> f64 {
    let raw = q;
    let q = clip_prob(q);
    if raw != q {
        return 0.0;
    }
    let d = rho + q - 1.0;
    if d <= 0.0 {
        return 0.0;
    }
    let em1 = beta.exp_m1();
    let arg = 1.0 + (d / q) * em1;
    em1 * (1.0 - rho) / (beta * q * q * arg)
}

/// `z = Θ(ρ + q − 1)`: one exactly when the smoothed value is positive.
#[inline]
pub fn discrete_from_noise(rho: f64, q: f64) -> u8 {
    u8::from(rho + clip_prob(q) - 1.0 > 0.0)
}

/// Weight `(1 − z)/(1 − q)` multiplying `∂f/∂z_l` in the gradient routed to
/// `q_l`. It vanishes whenever `z_l = 1`.
#[inline]
pub fn discrete_grad_weight(z: u8, q: f64) -> f64 {
    if z == 1 {
        0.0
    } else {
        1.0 / (1.0 - clip_prob(q))
    }
}

/// Entropy of one Bernoulli unit in nats.
#[inline]
pub fn binary_entropy(q: f64) -> f64 {
    let q = clip_prob(q);
    -(q * q.ln() + (1.0 - q) * (1.0 - q).ln())
}

/// `−Σ (q_l log q_l + (1 − q_l) log(1 − q_l))`.
pub fn bernoulli_entropy(q: &[f64]) -> f64 {
    q.iter().map(|&v| binary_entropy(v)).sum()
}

/// `−Σ (q_l log p_l + (1 − q_l) log(1 − p_l))`.
pub fn bernoulli_cross_entropy(q: &[f64], p: &[f64]) -> Result<f64> {
    if q.len() != p.len() {
        return Err(Error::InvalidArgument(format!(
            "cross-entropy lengths differ: {} vs {}",
            q.len(),
            p.len()
        )));
    }
    Ok(q.iter()
        .zip(p)
        .map(|(&q, &p)| {
            let (q, p) = (clip_prob(q), clip_prob(p));
            -(q * p.ln() + (1.0 - q) * (1.0 - p).ln())
        })
        .sum())
}

/// KL divergence of `N(μ, σ²)` from the standard normal, summed over units.
pub fn gaussian_kl(mu: &[f64], sigma: &[f64]) -> Result<f64> {
    if mu.len() != sigma.len() {
        return Err(Error::InvalidArgument("mu and sigma lengths differ".into()));
    }
    if let Some(s) = sigma.iter().find(|&&s| s.is_nan() || s <= 0.0) {
        return Err(Error::InvalidArgument(format!("sigma must be positive, got {s}")));
    }
    Ok(mu
        .iter()
        .zip(sigma)
        .map(|(&m, &s)| 0.5 * (m * m + s * s - 1.0 - (s * s).ln()))
        .sum())
}

/// `ζ = μ + σ ⊙ ρ` with `ρ ~ N(0, 1)`.
pub fn gaussian_reparam(rho: &[f64], mu: &[f64], sigma: &[f64]) -> Vec<f64> {
    rho.iter().zip(mu).zip(sigma).map(|((&r, &m), &s)| m + s * r).collect()
}

/// Draw from `r(ζ|z)` given a uniform `u`.
pub fn smoothing_sample(z: u8, u: f64, beta: f64) -> f64 {
    if z == 0 {
        0.0
    } else {
        ((u * beta.exp_m1()).ln_1p() / beta).clamp(0.0, 1.0)
    }
}

/// One encoder pass worth of aligned noise, probabilities, and latents.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentSample {
    pub rho: Vec<f64>,
    pub q: Vec<f64>,
    pub z: Vec<u8>,
    pub zeta: Vec<f64>,
    pub beta: f64,
}

impl LatentSample {
    /// Builds the factorial sample for given noise and probabilities.
    pub fn from_noise(rho: Vec<f64>, q: Vec<f64>, beta: f64) -> Result<Self> {
        if rho.len() != q.len() {
            return Err(Error::InvalidArgument("rho and q lengths differ".into()));
        }
        let z = rho.iter().zip(&q).map(|(&r, &q)| discrete_from_noise(r, q)).collect();
        let zeta = rho.iter().zip(&q).map(|(&r, &q)| spike_exp_inverse_cdf(r, q, beta)).collect();
        Ok(Self { rho, q, z, zeta, beta })
    }

    pub fn len(&self) -> usize {
        self.z.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z.is_empty()
    }
}

/// Partition of the latent units into ordered posterior groups.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HierarchySpec {
    group_sizes: Vec<usize>,
}

impl HierarchySpec {
    pub fn new(group_sizes: Vec<usize>) -> Result<Self> {
        if group_sizes.is_empty() || group_sizes.contains(&0) {
            return Err(Error::InvalidArgument("hierarchy groups must be non-empty".into()));
        }
        Ok(Self { group_sizes })
    }

    /// `groups` equal groups over `latent` units.
    pub fn uniform(latent: usize, groups: usize) -> Result<Self> {
        if groups == 0 || !latent.is_multiple_of(groups) {
            return Err(Error::InvalidArgument(format!(
                "latent size {latent} is not divisible by {groups} groups"
            )));
        }
        Self::new(vec![latent / groups; groups])
    }

    pub fn groups(&self) -> usize {
        self.group_sizes.len()
    }

    pub fn latent_size(&self) -> usize {
        self.group_sizes.iter().sum()
    }

    pub fn group_sizes(&self) -> &[usize] {
        &self.group_sizes
    }

    /// Unit index range of group `g`.
    pub fn range(&self, g: usize) -> std::ops::Range<usize> {
        let start: usize = self.group_sizes[..g].iter().sum();
        start..start + self.group_sizes[g]
    }
}

/// Samples the hierarchical posterior group by group.
///
/// `conditional(g, x, zeta_prefix)` must return the Bernoulli probabilities of
/// group `g` given the input and the smoothed values of all earlier groups.
pub fn hierarchical_sample<F>(
    spec: &HierarchySpec,
    x: &[f64],
    rho: &[f64],
    beta: f64,
    mut conditional: F,
) -> Result<LatentSample>
where
    F: FnMut(usize, &[f64], &[f64]) -> Vec<f64>,
{
    let l = spec.latent_size();
    if rho.len() != l {
        return Err(Error::InvalidArgument(format!("rho has {} entries, expected {l}", rho.len())));
    }
    let mut q = Vec::with_capacity(l);
    let mut z = Vec::with_capacity(l);
    let mut zeta = Vec::with_capacity(l);
    for g in 0..spec.groups() {
        let range = spec.range(g);
        let qg = conditional(g, x, &zeta);
        if qg.len() != range.len() {
            return Err(Error::InvalidArgument(format!(
                "group {g} produced {} probabilities, expected {}",
                qg.len(),
                range.len()
            )));
        }
        for (&r, &p) in rho[range].iter().zip(&qg) {
            let p = clip_prob(p);
            q.push(p);
            z.push(discrete_from_noise(r, p));
            zeta.push(spike_exp_inverse_cdf(r, p, beta));
        }
    }
    Ok(LatentSample { rho: rho.to_vec(), q, z, zeta, beta })
}

/// Smallest probability the engine lets through.
pub const fn prob_floor() -> f64 {
    PROB_EPS
}
