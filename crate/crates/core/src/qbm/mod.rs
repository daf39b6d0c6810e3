//! Transverse-field quantum Boltzmann machine
//! `H = Σ_l Γ_l σ^x_l + diag(E(z))`, with `E` the bipartite RBM energy in the
//! `{0,1}` parameterization and `σ^z |z⟩ = (2z − 1) |z⟩`.
//!
//! The partition function `Tr e^{-H}` is sampled through its `M`-slice path
//! integral. Each site carries a periodic worldline; adjacent slices that
//! differ form a kink.

mod cluster;
mod oracle;
mod sampler;

pub use cluster::cluster_update;
pub use oracle::{exact_quantum_oracle, QuantumOracle, MAX_ORACLE_UNITS};
pub use sampler::{
    clamped_log_prob, clamped_log_trace, quantum_log_z_pa, QmcConfig, QmcNegativePhase,
};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rbm::{bipartite_energy, RbmParams};

/// Weight given to one imaginary-time kink.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KinkWeight {
    /// Exact finite-`M` Trotter weights: fugacity `tanh(Γ/M)` per kink and a
    /// `cosh(Γ/M)^M` factor per site.
    #[default]
    Trotter,
    /// Fugacity `Γ/M` per kink with no per-site factor.
    Linear,
}

impl KinkWeight {
    /// Kink fugacity for a field `g` split over `m` slices.
    pub fn fugacity(self, g: f64, m: usize) -> f64 {
        let tau = g / m as f64;
        match self {
            Self::Trotter => tau.tanh(),
            Self::Linear => tau,
        }
    }

    /// Log weight of a site worldline with no kinks.
    pub fn log_norm(self, g: f64, m: usize) -> f64 {
        match self {
            Self::Trotter => m as f64 * (g / m as f64).cosh().ln(),
            Self::Linear => 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QbmParams {
    /// Per-site transverse field.
    pub gamma: Vec<f64>,
    pub rbm: RbmParams,
}

impl QbmParams {
    pub fn new(gamma: Vec<f64>, rbm: RbmParams) -> Result<Self> {
        if gamma.len() != rbm.len() {
            return Err(Error::InvalidArgument(format!(
                "{} transverse fields for {} units",
                gamma.len(),
                rbm.len()
            )));
        }
        if gamma.iter().any(|g| !g.is_finite() || *g < 0.0) {
            return Err(Error::InvalidArgument("transverse field must be finite and non-negative".into()));
        }
        Ok(Self { gamma, rbm })
    }

    pub fn uniform(gamma: f64, rbm: RbmParams) -> Result<Self> {
        let l = rbm.len();
        Self::new(vec![gamma; l], rbm)
    }

    pub fn len(&self) -> usize {
        self.rbm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rbm.is_empty()
    }

    pub fn is_classical(&self) -> bool {
        self.gamma.iter().all(|&g| g == 0.0)
    }
}

/// `⟨z| H |z⟩`; the transverse term has no diagonal part.
pub fn classical_energy_of_state(params: &QbmParams, z: &[u8]) -> Result<f64> {
    params.rbm.energy(z)
}

/// `M` imaginary-time slices of `L` binary units, slice-major.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PathConfiguration {
    m: usize,
    l: usize,
    z: Vec<u8>,
}

impl PathConfiguration {
    /// Every slice equal to `z`.
    pub fn constant(z: &[u8], m: usize) -> Self {
        Self { m, l: z.len(), z: z.repeat(m) }
    }

    pub fn random_constant(l: usize, m: usize, rng: &mut crate::rng::Rng) -> Self {
        let z: Vec<u8> = (0..l).map(|_| u8::from(rng.random::<bool>())).collect();
        Self::constant(&z, m)
    }

    pub fn from_slices(slices: &[Vec<u8>]) -> Result<Self> {
        let l = slices.first().map_or(0, Vec::len);
        if slices.is_empty() || slices.iter().any(|s| s.len() != l || s.iter().any(|&v| v > 1)) {
            return Err(Error::InvalidArgument("slices must be non-empty binary vectors of equal length".into()));
        }
        Ok(Self { m: slices.len(), l, z: slices.concat() })
    }

    pub fn slices(&self) -> usize {
        self.m
    }

    pub fn units(&self) -> usize {
        self.l
    }

    pub fn slice(&self, a: usize) -> &[u8] {
        &self.z[a * self.l..(a + 1) * self.l]
    }

    pub fn get(&self, a: usize, i: usize) -> u8 {
        self.z[a * self.l + i]
    }

    /// Spin `s = 2z − 1` at slice `a`, site `i`.
    pub fn spin(&self, a: usize, i: usize) -> i8 {
        2 * self.get(a, i) as i8 - 1
    }

    pub(crate) fn flip(&mut self, a: usize, i: usize) {
        self.z[a * self.l + i] ^= 1;
    }

    /// Kinks at site `i` over the periodic worldline.
    pub fn kinks(&self, i: usize) -> usize {
        (0..self.m).filter(|&a| self.get(a, i) != self.get((a + 1) % self.m, i)).count()
    }

    pub fn total_kinks(&self) -> usize {
        (0..self.l).map(|i| self.kinks(i)).sum()
    }

    /// Kinks per site and slice.
    pub fn kink_density(&self) -> f64 {
        self.total_kinks() as f64 / (self.m * self.l).max(1) as f64
    }

    /// `(1/M) Σ_a E(z^a)`.
    pub fn mean_classical_energy(&self, rbm: &RbmParams) -> f64 {
        (0..self.m).map(|a| bipartite_energy(&rbm.h, &rbm.w, rbm.left(), self.slice(a))).sum::<f64>()
            / self.m as f64
    }
}

/// Kinetic log weight of `path` with fields scaled by `t`; `-inf` when a site
/// with zero field carries kinks.
pub(crate) fn kinetic_log_weight(gamma: &[f64], path: &PathConfiguration, t: f64, kind: KinkWeight) -> f64 {
    let m = path.slices();
    let mut lw = 0.0;
    for (i, &g) in gamma.iter().enumerate() {
        let g = t * g;
        lw += kind.log_norm(g, m);
        let k = path.kinks(i);
        if k > 0 {
            lw += k as f64 * kind.fugacity(g, m).ln();
        }
    }
    lw
}

/// `(E_q, E_cl)`: the kink energy `−Σ_i k_i log w_i` (less the per-site
/// normalisation for Trotter weights) and the slice-averaged classical energy.
pub fn path_energy(params: &QbmParams, path: &PathConfiguration, kind: KinkWeight) -> Result<(f64, f64)> {
    if params.is_classical() {
        return Err(Error::ZeroTransverseField);
    }
    if path.units() != params.len() || path.slices() < 2 {
        return Err(Error::InvalidArgument(format!(
            "path of {} slices x {} units does not fit a {}-unit QBM (need M >= 2)",
            path.slices(),
            path.units(),
            params.len()
        )));
    }
    let e_q = -kinetic_log_weight(&params.gamma, path, 1.0, kind);
    Ok((e_q, path.mean_classical_energy(&params.rbm)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(gamma: f64, h: f64) -> QbmParams {
        QbmParams::uniform(gamma, RbmParams::new(1, 0, vec![h], vec![]).unwrap()).unwrap()
    }

    #[test]
    fn path_energy_examples() {
        let p = single(1.0, 0.0);
        let flat = PathConfiguration::constant(&[1], 8);
        assert_eq!(path_energy(&p, &flat, KinkWeight::Linear).unwrap(), (0.0, 0.0));
        let mut slices = vec![vec![0u8]; 8];
        slices[2][0] = 1;
        slices[3][0] = 1;
        let two = PathConfiguration::from_slices(&slices).unwrap();
        assert_eq!(two.kinks(0), 2);
        let (eq, ecl) = path_energy(&p, &two, KinkWeight::Linear).unwrap();
        assert!((eq - 2.0 * 8f64.ln()).abs() < 1e-12);
        assert!((eq - 4.158_883_083).abs() < 1e-9);
        assert_eq!(ecl, 0.0);
        assert!(matches!(path_energy(&single(0.0, 0.0), &two, KinkWeight::Linear), Err(Error::ZeroTransverseField)));
    }

    #[test]
    fn classical_energy_ignores_field() {
        let rbm = RbmParams::new(1, 1, vec![1.0, -1.0], vec![0.5]).unwrap();
        for g in [0.0, 0.7, 3.0] {
            let p = QbmParams::uniform(g, rbm.clone()).unwrap();
            assert_eq!(classical_energy_of_state(&p, &[1, 1]).unwrap(), 0.5);
            assert_eq!(classical_energy_of_state(&p, &[1, 0]).unwrap(), 1.0);
        }
        let zero = QbmParams::uniform(1.0, RbmParams::zeros(1, 1)).unwrap();
        assert_eq!(classical_energy_of_state(&zero, &[1, 1]).unwrap(), 0.0);
    }

    #[test]
    fn rejects_negative_field() {
        assert!(QbmParams::uniform(-0.1, RbmParams::zeros(1, 1)).is_err());
    }
}
