use std::fmt::Write as _;

use qvae::qbm::{self, QbmParams, QmcConfig, QmcNegativePhase, MAX_ORACLE_UNITS};
use qvae::rbm::{self, RbmParams};
use qvae::rng::substream;
use qvae::{Error, Result};

/// Number of most probable basis states compared individually.
const TRACKED_STATES: usize = 16;
const ROUNDS: usize = 40;
const SIGMAS: f64 = 3.0;
const EXACT_TOL: f64 = 1e-9;

#[derive(Clone, Debug)]
pub struct Row {
    pub quantity: String,
    pub exact: f64,
    pub estimate: f64,
    /// Zero for the exact classical path.
    pub stderr: f64,
}

impl Row {
    /// Deviation in standard errors, or in units of the exact tolerance.
    pub fn score(&self) -> f64 {
        let d = (self.estimate - self.exact).abs();
        if self.stderr > 0.0 {
            d / (SIGMAS * self.stderr)
        } else {
            d / EXACT_TOL
        }
    }

    pub fn pass(&self) -> bool {
        self.score() <= 1.0
    }
}

#[derive(Clone, Debug)]
pub struct OracleCheck {
    pub size: usize,
    pub gamma: f64,
    pub slices: usize,
    pub rows: Vec<Row>,
}

impl OracleCheck {
    pub fn pass(&self) -> bool {
        self.rows.iter().all(Row::pass)
    }

    pub fn worst(&self) -> String {
        let r = self.rows.iter().max_by(|a, b| a.score().total_cmp(&b.score())).expect("rows");
        format!("{}: estimate {:.6}, exact {:.6}, stderr {:.2e}", r.quantity, r.estimate, r.exact, r.stderr)
    }

    pub fn table(&self) -> String {
        let mut s = format!("L = {}, Γ = {}, M = {}\n", self.size, self.gamma, self.slices);
        let _ = writeln!(s, "{:<14} {:>12} {:>12} {:>10}  ok", "quantity", "exact", "estimate", "stderr");
        for r in &self.rows {
            let ok = if r.pass() { "yes" } else { "NO" };
            let _ = writeln!(s, "{:<14} {:>12.6} {:>12.6} {:>10.2e}  {ok}", r.quantity, r.exact, r.estimate, r.stderr);
        }
        s
    }
}

fn label(z: &[u8]) -> String {
    z.iter().map(|b| char::from(b'0' + b)).collect()
}

/// Random QBM with `|h|, |W| ≤ 1` and uniform field `gamma`, checked against
/// the dense oracle.
pub fn oracle_check(size: usize, gamma: f64, slices: usize, seed: u64) -> Result<OracleCheck> {
    if size == 0 || size > MAX_ORACLE_UNITS {
        return Err(Error::Config(format!("size must be in 1..={MAX_ORACLE_UNITS}, got {size}")));
    }
    if !(gamma >= 0.0 && gamma.is_finite()) {
        return Err(Error::Config(format!("gamma must be finite and non-negative, got {gamma}")));
    }
    if slices < 2 {
        return Err(Error::Config("slices must be at least 2".into()));
    }
    let rbm = RbmParams::random(size / 2, size - size / 2, 1.0, &mut substream(seed, 0));
    let p = QbmParams::uniform(gamma, rbm)?;
    let oracle = qbm::exact_quantum_oracle(&p)?;
    let mut order: Vec<usize> = (0..oracle.probs.len()).collect();
    order.sort_by(|&a, &b| oracle.probs[b].total_cmp(&oracle.probs[a]));
    order.truncate(TRACKED_STATES);
    let mut rows = Vec::new();
    if p.is_classical() {
        let exact = rbm::exact_probabilities(&p.rbm)?;
        let moments = rbm::exact_moments(&p.rbm)?;
        rows.push(Row { quantity: "log Z".into(), exact: oracle.log_z, estimate: rbm::exact_log_z(&p.rbm)?, stderr: 0.0 });
        for (k, (&e, &o)) in moments.first.iter().zip(&oracle.moments.first).enumerate() {
            rows.push(Row { quantity: format!("<z{k}>"), exact: o, estimate: e, stderr: 0.0 });
        }
        for &s in &order {
            let z = rbm::state_from_index(s, size);
            rows.push(Row { quantity: format!("p({})", label(&z)), exact: oracle.probs[s], estimate: exact[s], stderr: 0.0 });
        }
    } else {
        let mut cfg = QmcConfig { slices, ..QmcConfig::default() };
        cfg.pa.sweeps = 2;
        let mut pop = QmcNegativePhase::new(&p, &cfg, &mut substream(seed, 1))?;
        let est = pop.estimate().clone();
        rows.push(Row { quantity: "log Z".into(), exact: oracle.log_z, estimate: est.log_z, stderr: est.stderr });
        let n = pop.paths().len();
        // Per-particle time averages of the unit means and tracked-state frequencies.
        let width = size + order.len();
        let mut acc = vec![vec![0.0; width]; n];
        for _ in 0..ROUNDS {
            pop.sample(&p, 1)?;
            for (a, path) in acc.iter_mut().zip(pop.paths()) {
                let m = path.slices() as f64 * ROUNDS as f64;
                for t in 0..path.slices() {
                    let z = path.slice(t);
                    for k in 0..size {
                        a[k] += f64::from(z[k]) / m;
                    }
                    let idx = z.iter().enumerate().map(|(k, &b)| usize::from(b) << k).sum::<usize>();
                    if let Some(j) = order.iter().position(|&s| s == idx) {
                        a[size + j] += 1.0 / m;
                    }
                }
            }
        }
        let stats = |j: usize| {
            let mean = acc.iter().map(|a| a[j]).sum::<f64>() / n as f64;
            let var = acc.iter().map(|a| (a[j] - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0).max(1.0);
            (mean, (var / n as f64).sqrt())
        };
        for k in 0..size {
            let (mean, se) = stats(k);
            rows.push(Row { quantity: format!("<z{k}>"), exact: oracle.moments.first[k], estimate: mean, stderr: se });
        }
        for (j, &s) in order.iter().enumerate() {
            let (mean, se) = stats(size + j);
            let exact = oracle.probs[s];
            // Floor: at least one independent draw per particle.
            let floor = (exact * (1.0 - exact) / n as f64).sqrt();
            let z = rbm::state_from_index(s, size);
            rows.push(Row { quantity: format!("p({})", label(&z)), exact, estimate: mean, stderr: se.max(floor) });
        }
    }
    Ok(OracleCheck { size, gamma, slices, rows })
}
