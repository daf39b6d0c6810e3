//! Classical restricted Boltzmann machine prior over `z ∈ {0,1}^L` with
//! `p(z) = e^{-E(z)} / Z` and
//! `E(z) = Σ_l h_l z_l + Σ_{i<left, j} W_ij z_i z_{left+j}`.

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::anneal::{anneal, Annealable, PaConfig, PaEstimate};
use crate::error::{Error, Result};
use crate::math::{sigmoid, LogSumExp};
use crate::rng::{particle_streams, Rng};

/// Largest system handled by exact enumeration.
pub const MAX_EXACT_UNITS: usize = 24;

/// Energy of `z` under biases `h` and cross couplings `w` (`left × right`,
/// row-major).
pub fn bipartite_energy(h: &[f64], w: &[f64], left: usize, z: &[u8]) -> f64 {
    let right = h.len() - left;
    let mut e: f64 = h.iter().zip(z).filter(|(_, &zk)| zk == 1).map(|(h, _)| h).sum();
    for i in 0..left {
        if z[i] == 1 {
            let row = &w[i * right..(i + 1) * right];
            e += row.iter().zip(&z[left..]).filter(|(_, &zj)| zj == 1).map(|(w, _)| w).sum::<f64>();
        }
    }
    e
}

/// `E(z | z_k = 1) − E(z | z_k = 0)`.
pub fn unit_field(h: &[f64], w: &[f64], left: usize, z: &[u8], k: usize) -> f64 {
    let right = h.len() - left;
    let mut f = h[k];
    if k < left {
        let row = &w[k * right..(k + 1) * right];
        for (wj, &zj) in row.iter().zip(&z[left..]) {
            if zj == 1 {
                f += wj;
            }
        }
    } else {
        let j = k - left;
        for i in 0..left {
            if z[i] == 1 {
                f += w[i * right + j];
            }
        }
    }
    f
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RbmParams {
    left: usize,
    right: usize,
    pub h: Vec<f64>,
    pub w: Vec<f64>,
}

impl RbmParams {
    pub fn zeros(left: usize, right: usize) -> Self {
        Self { left, right, h: vec![0.0; left + right], w: vec![0.0; left * right] }
    }

    pub fn new(left: usize, right: usize, h: Vec<f64>, w: Vec<f64>) -> Result<Self> {
        if h.len() != left + right || w.len() != left * right {
            return Err(Error::InvalidArgument(format!(
                "RBM {left}x{right} needs {} biases and {} couplings, got {} and {}",
                left + right,
                left * right,
                h.len(),
                w.len()
            )));
        }
        if h.iter().chain(&w).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { context: "RBM parameters".into(), detail: "non-finite entry".into() });
        }
        Ok(Self { left, right, h, w })
    }

    /// Parameters drawn uniformly from `[-scale, scale]`.
    pub fn random(left: usize, right: usize, scale: f64, rng: &mut Rng) -> Self {
        let mut draw = |n| (0..n).map(|_| rng.random_range(-scale..=scale)).collect::<Vec<_>>();
        let h = draw(left + right);
        let w = draw(left * right);
        Self { left, right, h, w }
    }

    pub fn left(&self) -> usize {
        self.left
    }

    pub fn right(&self) -> usize {
        self.right
    }

    pub fn len(&self) -> usize {
        self.left + self.right
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn coupling(&self, i: usize, j: usize) -> f64 {
        self.w[i * self.right + j]
    }

    /// Parameters multiplied by `t`.
    pub fn scaled(&self, t: f64) -> Self {
        Self {
            left: self.left,
            right: self.right,
            h: self.h.iter().map(|v| v * t).collect(),
            w: self.w.iter().map(|v| v * t).collect(),
        }
    }

    fn check(&self, z: &[u8]) -> Result<()> {
        if z.len() != self.len() {
            return Err(Error::InvalidArgument(format!("state has {} units, RBM has {}", z.len(), self.len())));
        }
        if z.iter().any(|&v| v > 1) {
            return Err(Error::InvalidArgument("state entries must be 0 or 1".into()));
        }
        Ok(())
    }

    pub fn energy(&self, z: &[u8]) -> Result<f64> {
        self.check(z)?;
        Ok(bipartite_energy(&self.h, &self.w, self.left, z))
    }

    /// `P(z_k = 1 | rest)` at inverse temperature `t`.
    pub fn conditional(&self, z: &[u8], k: usize, t: f64) -> f64 {
        sigmoid(-t * unit_field(&self.h, &self.w, self.left, z, k))
    }
}

/// Bits of `index` as a state, least significant bit first.
pub fn state_from_index(index: usize, len: usize) -> Vec<u8> {
    (0..len).map(|k| ((index >> k) & 1) as u8).collect()
}

fn tempered_block_sweep(p: &RbmParams, z: &mut [u8], t: f64, rng: &mut Rng) {
    let (l, r) = (p.left, p.right);
    for k in (0..l).chain(l..l + r) {
        let pk = p.conditional(z, k, t);
        z[k] = u8::from(rng.random::<f64>() < pk);
    }
}

/// One block Gibbs sweep: the left side from its exact conditionals given
/// the right side, then the right side given the new left side.
pub fn gibbs_block_sweep(params: &RbmParams, z: &mut [u8], rng: &mut Rng) -> Result<()> {
    params.check(z)?;
    tempered_block_sweep(params, z, 1.0, rng);
    Ok(())
}

/// Estimates of `⟨z_l⟩` and `⟨z_i z_{left+j}⟩`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub first: Vec<f64>,
    /// Row-major `left × right`.
    pub cross: Vec<f64>,
    /// Standard errors of `first` (zero for exact moments).
    pub first_stderr: Vec<f64>,
}

impl Moments {
    /// Unweighted average over a set of states.
    pub fn from_states<'a>(left: usize, right: usize, states: impl IntoIterator<Item = &'a [u8]>) -> Self {
        let l = left + right;
        let mut first = vec![0.0; l];
        let mut cross = vec![0.0; left * right];
        let mut n = 0usize;
        for z in states {
            n += 1;
            for k in 0..l {
                first[k] += z[k] as f64;
            }
            for i in 0..left {
                if z[i] == 1 {
                    for j in 0..right {
                        cross[i * right + j] += z[left + j] as f64;
                    }
                }
            }
        }
        let nf = n.max(1) as f64;
        first.iter_mut().for_each(|v| *v /= nf);
        cross.iter_mut().for_each(|v| *v /= nf);
        let first_stderr = first.iter().map(|m| (m * (1.0 - m) / nf).sqrt()).collect();
        Self { first, cross, first_stderr }
    }
}

/// Persistent Gibbs chains for the negative phase.
#[derive(Clone, Debug)]
pub struct PcdState {
    left: usize,
    right: usize,
    chains: Vec<Vec<u8>>,
    rngs: Vec<Rng>,
    sweeps: u64,
}

impl PcdState {
    pub fn new(params: &RbmParams, chains: usize, rng: &mut Rng) -> Self {
        let mut rngs = particle_streams(rng, chains);
        let l = params.len();
        let chains = rngs.iter_mut().map(|r| (0..l).map(|_| u8::from(r.random::<bool>())).collect()).collect();
        Self { left: params.left, right: params.right, chains, rngs, sweeps: 0 }
    }

    pub fn chains(&self) -> &[Vec<u8>] {
        &self.chains
    }

    pub fn sweeps(&self) -> u64 {
        self.sweeps
    }
}

/// Advances every chain by `k` sweeps and returns the moments of the new
/// chain states.
pub fn pcd_negative_phase(params: &RbmParams, state: &mut PcdState, k: usize) -> Result<Moments> {
    if k == 0 {
        return Err(Error::InvalidArgument("PCD needs at least one sweep".into()));
    }
    if state.left != params.left || state.right != params.right {
        return Err(Error::InvalidArgument("PCD chains do not match the RBM shape".into()));
    }
    state.chains.par_iter_mut().zip(state.rngs.par_iter_mut()).for_each(|(z, r)| {
        for _ in 0..k {
            tempered_block_sweep(params, z, 1.0, r);
        }
    });
    state.sweeps += k as u64;
    Ok(Moments::from_states(params.left, params.right, state.chains.iter().map(Vec::as_slice)))
}

fn check_exact(params: &RbmParams) -> Result<()> {
    if params.len() > MAX_EXACT_UNITS {
        return Err(Error::TooLarge { size: params.len(), limit: MAX_EXACT_UNITS });
    }
    Ok(())
}

/// `log Σ_z e^{-E(z)}` by enumeration.
pub fn exact_log_z(params: &RbmParams) -> Result<f64> {
    check_exact(params)?;
    let l = params.len();
    let mut acc = LogSumExp::default();
    for idx in 0..1usize << l {
        acc.push(-bipartite_energy(&params.h, &params.w, params.left, &state_from_index(idx, l)));
    }
    Ok(acc.value())
}

/// Exact moments by enumeration.
pub fn exact_moments(params: &RbmParams) -> Result<Moments> {
    let probs = exact_probabilities(params)?;
    let (l, left, right) = (params.len(), params.left, params.right);
    let mut first = vec![0.0; l];
    let mut cross = vec![0.0; left * right];
    for (idx, p) in probs.iter().enumerate() {
        let z = state_from_index(idx, l);
        for k in 0..l {
            first[k] += p * z[k] as f64;
        }
        for i in 0..left {
            for j in 0..right {
                cross[i * right + j] += p * (z[i] * z[left + j]) as f64;
            }
        }
    }
    Ok(Moments { first, cross, first_stderr: vec![0.0; l] })
}

/// `p(z)` for every state, indexed as in [`state_from_index`].
pub fn exact_probabilities(params: &RbmParams) -> Result<Vec<f64>> {
    let log_z = exact_log_z(params)?;
    let l = params.len();
    Ok((0..1usize << l)
        .map(|idx| (-bipartite_energy(&params.h, &params.w, params.left, &state_from_index(idx, l)) - log_z).exp())
        .collect())
}

struct Tempered<'a>(&'a RbmParams);

impl Annealable for Tempered<'_> {
    type State = Vec<u8>;

    fn reference(&self, rng: &mut Rng) -> Vec<u8> {
        (0..self.0.len()).map(|_| u8::from(rng.random::<bool>())).collect()
    }

    fn log_z0(&self) -> f64 {
        self.0.len() as f64 * std::f64::consts::LN_2
    }

    fn log_density(&self, z: &Vec<u8>, t: f64) -> f64 {
        -t * bipartite_energy(&self.0.h, &self.0.w, self.0.left, z)
    }

    fn sweep(&self, z: &mut Vec<u8>, t: f64, rng: &mut Rng) {
        tempered_block_sweep(self.0, z, t, rng);
    }
}

/// Population-annealing estimate of `log Z` along `θ_t = t θ` from the
/// uniform reference at `t = 0`.
pub fn log_z_population_annealing(params: &RbmParams, cfg: &PaConfig, rng: &mut Rng) -> Result<PaEstimate> {
    Ok(anneal(&Tempered(params), cfg, rng)?.estimate)
}
