use nalgebra::{DMatrix, SymmetricEigen};

use super::QbmParams;
use crate::error::{Error, Result};
use crate::math::log_sum_exp;
use crate::rbm::{bipartite_energy, state_from_index, Moments};

/// Largest system the dense oracle accepts.
pub const MAX_ORACLE_UNITS: usize = 12;

/// Exact quantities of `e^{-H}` in the computational basis.
#[derive(Clone, Debug)]
pub struct QuantumOracle {
    pub log_z: f64,
    /// `⟨z|e^{-H}|z⟩ / Z`, indexed as in [`state_from_index`].
    pub probs: Vec<f64>,
    pub moments: Moments,
}

impl QuantumOracle {
    pub fn log_prob(&self, z: &[u8]) -> f64 {
        let idx: usize = z.iter().enumerate().map(|(k, &b)| (b as usize) << k).sum();
        self.probs[idx].ln()
    }
}

/// Builds the `2^L × 2^L` Hamiltonian and diagonalises it.
pub fn exact_quantum_oracle(params: &QbmParams) -> Result<QuantumOracle> {
    let l = params.len();
    if l > MAX_ORACLE_UNITS {
        return Err(Error::TooLarge { size: l, limit: MAX_ORACLE_UNITS });
    }
    let n = 1usize << l;
    let rbm = &params.rbm;
    let diag: Vec<f64> = (0..n).map(|s| bipartite_energy(&rbm.h, &rbm.w, rbm.left(), &state_from_index(s, l))).collect();
    let (log_z, probs) = if params.is_classical() {
        let log_z = log_sum_exp(&diag.iter().map(|e| -e).collect::<Vec<_>>());
        (log_z, diag.iter().map(|e| (-e - log_z).exp()).collect::<Vec<_>>())
    } else {
        let mut h = DMatrix::<f64>::from_diagonal(&nalgebra::DVector::from_vec(diag));
        for s in 0..n {
            for (i, &g) in params.gamma.iter().enumerate() {
                h[(s ^ (1 << i), s)] += g;
            }
        }
        let eig = SymmetricEigen::new(h);
        let lam = eig.eigenvalues;
        let lmin = lam.iter().copied().fold(f64::INFINITY, f64::min);
        let boltz: Vec<f64> = lam.iter().map(|v| (-(v - lmin)).exp()).collect();
        let tr: f64 = boltz.iter().sum();
        let log_z = tr.ln() - lmin;
        let probs = (0..n)
            .map(|s| (0..n).map(|k| eig.eigenvectors[(s, k)].powi(2) * boltz[k]).sum::<f64>() / tr)
            .collect();
        (log_z, probs)
    };
    let (left, right) = (rbm.left(), rbm.right());
    let mut first = vec![0.0; l];
    let mut cross = vec![0.0; left * right];
    for (s, p) in probs.iter().enumerate() {
        let z = state_from_index(s, l);
        for k in 0..l {
            first[k] += p * z[k] as f64;
        }
        for i in 0..left {
            for j in 0..right {
                cross[i * right + j] += p * (z[i] * z[left + j]) as f64;
            }
        }
    }
    Ok(QuantumOracle { log_z, probs, moments: Moments { first, cross, first_stderr: vec![0.0; l] } })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rbm::{exact_log_z, RbmParams};
    use crate::rng::substream;

    #[test]
    fn classical_limit_matches_enumeration() {
        let rbm = RbmParams::random(3, 3, 1.0, &mut substream(1, 0));
        let o = exact_quantum_oracle(&QbmParams::uniform(0.0, rbm.clone()).unwrap()).unwrap();
        assert!((o.log_z - exact_log_z(&rbm).unwrap()).abs() < 1e-10);
    }

    #[test]
    fn single_spin_closed_form() {
        for (g, h) in [(1.0f64, 0.0f64), (0.5, 1.0), (2.0, -0.7)] {
            let p = QbmParams::uniform(g, RbmParams::new(1, 0, vec![h], vec![]).unwrap()).unwrap();
            let o = exact_quantum_oracle(&p).unwrap();
            // eigenvalues of [[0, g], [g, h]]
            let r = (g * g + h * h / 4.0).sqrt();
            let exact = (-h / 2.0).exp() * 2.0 * r.cosh();
            assert!((o.log_z - exact.ln()).abs() < 1e-12);
        }
        let p = QbmParams::uniform(1.0, RbmParams::zeros(1, 0)).unwrap();
        assert!((exact_quantum_oracle(&p).unwrap().log_z - 1.126_928_011_043).abs() < 1e-11);
    }

    #[test]
    fn probabilities_normalised() {
        let rbm = RbmParams::random(2, 3, 1.0, &mut substream(2, 0));
        let o = exact_quantum_oracle(&QbmParams::uniform(1.3, rbm).unwrap()).unwrap();
        assert!((o.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(o.probs.iter().all(|&p| p > 0.0));
    }

    #[test]
    fn too_large() {
        let p = QbmParams::uniform(1.0, RbmParams::zeros(7, 6)).unwrap();
        assert!(matches!(exact_quantum_oracle(&p), Err(Error::TooLarge { .. })));
    }
}
