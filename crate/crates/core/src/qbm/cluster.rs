use rand::Rng as _;

use super::{KinkWeight, PathConfiguration, QbmParams};
use crate::error::{Error, Result};
use crate::math::sigmoid;
use crate::rbm::unit_field;
use crate::rng::Rng;

fn accept(log_ratio: f64, rng: &mut Rng) -> bool {
    log_ratio >= 0.0 || rng.random::<f64>() < log_ratio.exp()
}

/// Heat-bath choice between a state and its flip with energy change `cost`.
fn heat_bath(cost: f64, rng: &mut Rng) -> bool {
    rng.random::<f64>() < sigmoid(-cost)
}

/// One update of every worldline at field scale `t`.
///
/// With a kink fugacity `w < 1`, aligned neighbouring slices are bonded with
/// probability `1 − w`; each bonded segment is then flipped by heat bath on
/// its classical energy change, followed by a whole-worldline flip.
/// With `w ≥ 1` no bonds form and single slices are flipped with acceptance
/// `e^{-ΔE} w^{Δk}`. When `clamped`, slice 0 never changes.
pub(crate) fn sweep(
    params: &QbmParams,
    path: &mut PathConfiguration,
    t: f64,
    kind: KinkWeight,
    clamped: bool,
    rng: &mut Rng,
) {
    let (m, l) = (path.slices(), path.units());
    let rbm = &params.rbm;
    let mut delta = vec![0.0; m];
    let mut bonded = vec![false; m];
    for i in 0..l {
        // cost of flipping slice a of site i
        for (a, d) in delta.iter_mut().enumerate() {
            let f = t * unit_field(&rbm.h, &rbm.w, rbm.left(), path.slice(a), i) / m as f64;
            *d = if path.get(a, i) == 0 { f } else { -f };
        }
        let w = kind.fugacity(t * params.gamma[i], m);
        if w >= 1.0 {
            let log_w = w.ln();
            for (a, d) in delta.iter_mut().enumerate().skip(usize::from(clamped)) {
                let (prev, next) = ((a + m - 1) % m, (a + 1) % m);
                let z = path.get(a, i);
                let before = usize::from(path.get(prev, i) != z) + usize::from(path.get(next, i) != z);
                let dk = 2.0 - 2.0 * before as f64;
                if accept(-*d + dk * log_w, rng) {
                    path.flip(a, i);
                    *d = -*d;
                }
            }
            continue;
        }
        let p_bond = 1.0 - w;
        for (a, bond) in bonded.iter_mut().enumerate() {
            let b = (a + 1) % m;
            *bond = path.get(a, i) == path.get(b, i) && rng.random::<f64>() < p_bond;
        }
        match bonded.iter().position(|&b| !b) {
            None => {
                if !clamped && heat_bath(delta.iter().sum::<f64>(), rng) {
                    (0..m).for_each(|a| path.flip(a, i));
                    delta.iter_mut().for_each(|d| *d = -*d);
                }
            }
            Some(cut) => {
                // segments start just after each unbonded link
                let start = (cut + 1) % m;
                let mut a = start;
                loop {
                    let seg_start = a;
                    let mut len = 1;
                    while bonded[(seg_start + len - 1) % m] {
                        len += 1;
                    }
                    let slices = (0..len).map(|k| (seg_start + k) % m);
                    let touches_frozen = clamped && slices.clone().any(|s| s == 0);
                    let cost: f64 = slices.clone().map(|s| delta[s]).sum();
                    if !touches_frozen && heat_bath(cost, rng) {
                        for s in slices {
                            path.flip(s, i);
                            delta[s] = -delta[s];
                        }
                    }
                    a = (seg_start + len) % m;
                    if a == start {
                        break;
                    }
                }
            }
        }
        if !clamped && heat_bath(delta.iter().sum::<f64>(), rng) {
            (0..m).for_each(|a| path.flip(a, i));
        }
    }
}

/// One full cluster update of `path` under `params`.
pub fn cluster_update(params: &QbmParams, path: &mut PathConfiguration, kind: KinkWeight, rng: &mut Rng) -> Result<()> {
    if params.is_classical() {
        return Err(Error::ZeroTransverseField);
    }
    if path.units() != params.len() || path.slices() < 2 {
        return Err(Error::InvalidArgument("path does not fit the QBM or has fewer than two slices".into()));
    }
    sweep(params, path, 1.0, kind, false, rng);
    Ok(())
}
