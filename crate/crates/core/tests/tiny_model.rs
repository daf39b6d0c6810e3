mod support;

use qvae::eval::{log_weights, PriorLogProb};
use qvae::math::{log_mean_exp, mean_stderr};
use qvae::model::Dvae;
use qvae::rng::substream;
use rand::Rng as _;
use support::{gauss_legendre, tiny_config, Tiny};

const BETA: f64 = 4.0;

fn tiny(seed: u64) -> Dvae {
    let mut m = Dvae::new(tiny_config(), &mut substream(seed, 0)).unwrap();
    let mut rng = substream(seed, 1);
    let flat: Vec<f64> = m.params().flatten().iter().map(|v| v + rng.random_range(-0.7..0.7)).collect();
    m.params_mut().assign_flat(&flat).unwrap();
    m
}

#[test]
fn quadrature_integrates_polynomials() {
    let (x, w) = gauss_legendre(8);
    for p in 0..16 {
        let v: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(p)).sum();
        assert!((v - 1.0 / (p as f64 + 1.0)).abs() < 1e-14, "degree {p}");
    }
}

#[test]
fn sampled_elbo_matches_enumeration() {
    let m = tiny(1);
    let t = Tiny::from_model(&m, BETA, 16);
    let log_z = t.log_z();
    let x = [1.0, 0.0, 1.0, 1.0, 0.0, 0.0];
    let n = 200_000;
    let noise = m.latent_noise(n, &mut substream(1, 2));
    let pass = m.forward(&x.repeat(n), &noise, BETA, log_z, false).unwrap();
    let (mean, se) = mean_stderr(&pass.elbo);
    let exact = t.elbo(&x);
    assert!((mean - exact).abs() < 4.0 * se, "{mean} ± {se} vs {exact}");
}

#[test]
fn importance_sampling_approaches_marginal_likelihood() {
    let m = tiny(2);
    let t = Tiny::from_model(&m, BETA, 16);
    let mut prior = PriorLogProb::classical(&m, t.log_z());
    let x = [0.0, 1.0, 1.0, 0.0, 1.0, 0.0];
    let w = log_weights(&m, &x, 50_000, BETA, &mut prior, &mut substream(2, 2)).unwrap();
    let exact = t.log_px(&x);
    assert!((log_mean_exp(&w) - exact).abs() < 0.02, "{} vs {exact}", log_mean_exp(&w));
    assert!(t.elbo(&x) < exact);
}
